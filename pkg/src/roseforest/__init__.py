"""Robust semiparametric efficient (ROSE) random forests.

Estimation of the scalar parameter in generalized partially linear models
through cross-fitted estimating equations, with forest-based weight
learning that targets the sandwich variance of the estimator.
"""

__version__ = "0.1.0"
