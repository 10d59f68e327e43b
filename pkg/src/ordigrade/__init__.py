"""Multi-task ordinal grading: three-head numpy CNN, staged training, TTA ensembles."""

__version__ = "0.1.0"
