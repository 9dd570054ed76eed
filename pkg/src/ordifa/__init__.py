"""Bayesian item factor analysis for ordered-categorical indicators.

Estimation uses an augmented truncated-multivariate-normal likelihood with
uniform nuisance variables, gradient-based MCMC, and a choice of two
threshold-prior families: sequentially defined sum-of-exponentials normal
priors and a joint induced-Dirichlet prior with Jacobian adjustment.
"""

__version__ = "0.1.0"
