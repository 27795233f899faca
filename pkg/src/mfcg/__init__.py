"""Matrix-free high-order finite-element toolkit: sum-factorization operator
evaluation, conjugate-gradient variants with merged vector operations, and
memory-locality analysis (transfer model, liveliness, cache simulation)."""

__version__ = "0.1.0"
