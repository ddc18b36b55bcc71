"""Output-feedback chance-constrained covariance steering for spacecraft guidance."""

__version__ = "0.1.0"
