"""Deep matrix factorization dynamics for matrix completion."""

__version__ = "0.1.0"
