"""Distance-learning approximate Bayesian computation for tephra deposit models."""

__version__ = "0.1.0"
