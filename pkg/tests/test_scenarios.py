import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ccorbit.dynamics import DynamicsModel, propagate
from ccorbit.scenarios import (ConfigError, ScenarioConfig, Units, bundled_scenario_path,
                               differential_correct_nrho, load_scenario, nodes_drift)

GUESS = np.array([1.0300, 0.0, -0.1871, 0.0, -0.1200, 0.0])


def test_cwh_bundled_values(cwh_config):
    v = cwh_config.values
    assert v["uncertainty"]["sigma_obs_r"] == pytest.approx(1e-3)
    assert v["constraints"]["u_max"] == pytest.approx(1e-2)
    assert v["constraints"]["cone_theta_max"] == pytest.approx(np.deg2rad(30))
    assert v["constraints"]["r_trigger"] == pytest.approx(0.5)
    assert v["risk"]["eps_x"] == v["risk"]["eps_u"] == 1e-3


def test_nrho_bundled_values(nrho_config):
    v = nrho_config.values
    ls, ts = v["dynamics"]["lstar"], v["dynamics"]["tstar"]
    assert np.allclose(v["boundary"]["r0"] / ls, [1.0300, 0.0, -0.1871], rtol=1e-14)
    assert np.allclose(v["boundary"]["v0"] / (ls / ts), [0.0, -0.1200, 0.0], rtol=1e-14)
    assert v["constraints"]["d_max"] == 1500.0
    assert v["constraints"]["u_max"] == pytest.approx(5e-3)


def test_cwh_scenario_shape(cwh_scenario):
    sc = cwh_scenario
    assert sc.N == 14
    assert sc.constraints.du_max == pytest.approx(1e-2 * np.deg2rad(1.0) * 30.0)
    assert np.allclose(sc.constraints.P_f, np.diag([1e-2**2] * 3 + [1e-4**2] * 3))


def test_nrho_scenario_shape(nrho_scenario):
    sc = nrho_scenario
    assert sc.N == 45
    assert sc.maneuver_mask.sum() == 15 and sc.maneuver_mask[::3].all()
    Pf = sc.units.covariance_to_canonical(sc.constraints.P_f)
    assert np.allclose(np.sqrt(np.diag(Pf)), [100.0] * 3 + [1e-3] * 3, rtol=1e-12)
    assert any("pseudo-measurement" in n for n in sc.notes)


def test_empty_file_lists_required_keys():
    with pytest.raises(ConfigError, match="required keys"):
        ScenarioConfig.loads("")


def test_schema_errors_name_the_key(cwh_config):
    with pytest.raises(ConfigError, match="constraints.u_max"):
        cwh_config.with_overrides(["constraints.u_max_m_per_s=-1.0"])
    with pytest.raises(ConfigError, match="bogus"):
        cwh_config.with_overrides(["bogus.key=1"])
    with pytest.raises(ConfigError):
        cwh_config.with_overrides(["risk.eps_x"])


def test_unit_suffixes_convert(cwh_config):
    a = cwh_config.with_overrides(["constraints.u_max_m_per_s=10.0"])
    raw = {k: dict(v) for k, v in cwh_config.raw.items()}
    del raw["constraints"]["u_max_m_per_s"]
    raw["constraints"]["u_max_km_per_s"] = 0.01
    b = ScenarioConfig.from_dict(raw)
    assert a.get("constraints.u_max") == pytest.approx(b.get("constraints.u_max"), rel=1e-15)
    raw["constraints"]["u_max_m_per_s"] = 10.0
    with pytest.raises(ConfigError, match="duplicate"):
        ScenarioConfig.from_dict(raw)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_scenario("/nonexistent/scenario.toml")


@given(st.floats(1e-5, 0.4), st.integers(1, 5000), st.floats(1.0, 1e3))
def test_config_round_trip(eps, seed, umax):
    cfg = load_scenario(bundled_scenario_path("cwh_rendezvous")).with_overrides(
        [f"risk.eps_x={eps!r}", f"mc.seed={seed}", f"constraints.u_max_m_per_s={umax!r}"])
    back = ScenarioConfig.loads(cfg.dumps())
    assert back == cfg
    assert back.hash == cfg.hash
    assert back.values["risk"]["eps_x"] == eps


def test_hash_tracks_content(cwh_config):
    assert cwh_config.with_overrides(["risk.eps_x=0.01"]).hash != cwh_config.hash
    assert cwh_config.with_overrides(["risk.eps_x=0.001"]).hash == cwh_config.hash


@given(arrays(float, 6, elements=st.floats(-1e6, 1e6)), st.floats(1.0, 1e6), st.floats(1.0, 1e6))
def test_nondimensionalization_inverse(x, lstar, tstar):
    u = Units(lstar, tstar)
    back = u.dimensionalize(u.nondimensionalize(x))
    assert np.all(np.abs(back - x) <= 1e-14 * np.maximum(np.abs(x), 1e-300))


def test_corrector_fixed_point():
    corr = differential_correct_nrho(GUESS, 0.012150585)
    again = differential_correct_nrho(corr.state, 0.012150585)
    assert again.iterations == 0
    assert again.residuals[-1] < 1e-12
    assert np.allclose(again.state, corr.state, rtol=0, atol=1e-15)


def test_corrector_refines_guess():
    corr = differential_correct_nrho(GUESS, 0.012150585)
    assert np.max(np.abs(corr.state - GUESS)) < 1e-3
    res = corr.residuals
    assert all(b < a for a, b in zip(res, res[1:]))
    # perpendicular crossing at half period
    m = DynamicsModel.cr3bp()
    xh = propagate(m, corr.state, 0.0, corr.period / 2)
    assert abs(xh[1]) < 1e-9 and abs(xh[3]) < 1e-9 and abs(xh[5]) < 1e-9


def test_five_revolution_drift(nrho_scenario):
    drift = nodes_drift(nrho_scenario.model, nrho_scenario.reference) * nrho_scenario.units.length
    assert drift.max() < 1.0


def test_execution_envelope_rebuilds_maneuver_nodes(cwh_scenario):
    rms = np.full(cwh_scenario.N, 5e-3)
    sc = cwh_scenario.with_execution_envelope(rms)
    assert np.array_equal(sc.execution_rms, rms)
    k = int(np.flatnonzero(sc.maneuver_mask)[0])
    G = sc.segments[k].G_exe
    assert not np.allclose(G, cwh_scenario.segments[k].G_exe)
    assert np.trace(sc.schedule.P_minus[-1]) >= np.trace(cwh_scenario.schedule.P_minus[-1])
    assert cwh_scenario.execution_rms is None


def test_nondimensional_units_need_cr3bp(cwh_config):
    raw = {k: dict(v) for k, v in cwh_config.raw.items()}
    del raw["boundary"]["r0_km"]
    raw["boundary"]["r0_nd"] = [1.0, 0.0, 0.0]
    with pytest.raises(ConfigError, match="boundary.r0_nd: nondimensional units need CR3BP"):
        ScenarioConfig.from_dict(raw)
