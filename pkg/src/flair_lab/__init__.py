"""Fair, domain-invariant classification on synthetic multi-domain tabular data."""

__version__ = "0.1.0"
