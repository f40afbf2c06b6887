"""Learning variable-stiffness manipulation policies from augmented position-control demos."""

__version__ = "0.1.0"
