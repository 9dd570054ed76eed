"""Prior densities for thresholds and structural parameters.

Two threshold-prior families are implemented:

- Sequentially defined: independent normal priors on unconstrained
  components tau*, mapped to ordered thresholds by tau_1 = tau*_1 and
  tau_c = tau_{c-1} + exp(tau*_c).  Sampling happens directly in tau*
  coordinates, so no Jacobian term is added here.
- Joint induced-Dirichlet: a Dirichlet density on the category-probability
  simplex induced by the thresholds through a CDF map, plus the
  log-determinant of the map's completed Jacobian matrix.  The matrix has a
  first column of ones and a +/-rho bidiagonal pattern, where rho_c is the
  CDF derivative at the anchored threshold.  The determinant is evaluated by
  generic LU factorization of the explicit matrix.

Structural priors: normal loadings, LKJ on the factor-correlation Cholesky
factor, and half-Cauchy on the standard deviation of each free variance
component.  Every dispersion argument carries an explicit is_variance flag
because mixing variance and standard-deviation conventions is a classic
source of silently wrong priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, ndtr, ndtri, xlogy

_LOG_2PI = math.log(2.0 * math.pi)
_LOGISTIC_SCALE = 1.702


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SequentialThresholdPrior:
    """Normal priors on the unconstrained threshold components tau*."""

    mu_star: np.ndarray
    sd_star: np.ndarray
    parameterization_note: str = "dispersion stored as a standard deviation"

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_star, dtype=float))
        sd = np.atleast_1d(np.asarray(self.sd_star, dtype=float))
        if mu.shape != sd.shape:
            raise ValueError("mu_star and sd_star must have matching shapes")
        if np.any(sd <= 0):
            raise ValueError("sd_star must be positive")
        object.__setattr__(self, "mu_star", mu)
        object.__setattr__(self, "sd_star", sd)

    @classmethod
    def from_dispersion(cls, mu_star, dispersion, is_variance=False):
        disp = np.atleast_1d(np.asarray(dispersion, dtype=float))
        if np.any(disp <= 0):
            raise ValueError("dispersion must be positive")
        sd = np.sqrt(disp) if is_variance else disp
        mu = np.broadcast_to(np.atleast_1d(np.asarray(mu_star, dtype=float)), sd.shape)
        return cls(mu_star=mu.copy(), sd_star=sd)

    @classmethod
    def homogeneous(cls, mu, dispersion, n_components, is_variance=False):
        """Same Normal(mu, dispersion) prior on each of n components."""
        return cls.from_dispersion(
            np.full(n_components, float(mu)),
            np.full(n_components, float(dispersion)),
            is_variance=is_variance)

    @property
    def var_star(self):
        return self.sd_star ** 2

    def __len__(self):
        return self.mu_star.size


@dataclass(frozen=True)
class InducedDirichletPrior:
    """Joint prior on one item's thresholds through induced probabilities."""

    alpha: np.ndarray
    anchor: float = 0.0
    cdf_variant: str = "exact-normal"

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if np.any(alpha <= 0):
            raise ValueError("alpha must be elementwise positive")
        if self.cdf_variant not in ("exact-normal", "logistic-approx"):
            raise ValueError(f"unknown cdf_variant {self.cdf_variant!r}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def n_categories(self):
        return self.alpha.size


@dataclass(frozen=True)
class StructuralPriors:
    """Priors on loadings, factor correlations, and variance components."""

    loading_loc: float = 0.0
    loading_scale: float = 10.0  # standard deviation
    factor_corr_shape: float = 1.0  # LKJ eta
    variance_scale: float = 2.5  # half-Cauchy scale, applied to SDs

    def __post_init__(self):
        if self.loading_scale <= 0 or self.factor_corr_shape <= 0 or self.variance_scale <= 0:
            raise ValueError("all prior scales must be positive")


@dataclass(frozen=True)
class PriorConfig:
    """Tagged choice of threshold-prior family plus structural priors.

    Threshold hyperparameters are stated once and instantiated per item:
    scalars broadcast to every component of every item, arrays must match
    the item's component count exactly (so heterogeneous category counts
    require scalar hyperparameters or per-model care).
    """

    threshold_family: str
    seq_mu: object = 0.0
    seq_dispersion: object = 1.5
    seq_is_variance: bool = False
    alpha: object = 1.0
    anchor: float = 0.0
    cdf_variant: str = "exact-normal"
    structural: StructuralPriors = field(default_factory=StructuralPriors)

    def __post_init__(self):
        if self.threshold_family not in ("sequential", "induced"):
            raise ValueError("threshold_family must be 'sequential' or 'induced'")
        if self.cdf_variant not in ("exact-normal", "logistic-approx"):
            raise ValueError(f"unknown cdf_variant {self.cdf_variant!r}")

    @classmethod
    def sequential(cls, mu=0.0, dispersion=1.5, is_variance=False, structural=None):
        return cls(threshold_family="sequential", seq_mu=mu, seq_dispersion=dispersion,
                   seq_is_variance=is_variance,
                   structural=structural or StructuralPriors())

    @classmethod
    def induced(cls, alpha=1.0, anchor=0.0, cdf_variant="exact-normal", structural=None):
        return cls(threshold_family="induced", alpha=alpha, anchor=anchor,
                   cdf_variant=cdf_variant, structural=structural or StructuralPriors())

    def threshold_prior_for(self, n_categories):
        """Instantiate this config's threshold prior for one item."""
        if self.threshold_family == "sequential":
            mu = np.atleast_1d(np.asarray(self.seq_mu, dtype=float))
            disp = np.atleast_1d(np.asarray(self.seq_dispersion, dtype=float))
            if mu.size == 1:
                mu = np.full(n_categories - 1, mu[0])
            if disp.size == 1:
                disp = np.full(n_categories - 1, disp[0])
            if mu.size != n_categories - 1 or disp.size != n_categories - 1:
                raise ValueError(
                    f"sequential hyperparameters sized for {mu.size} components "
                    f"cannot serve an item with {n_categories} categories")
            return SequentialThresholdPrior.from_dispersion(
                mu, disp, is_variance=self.seq_is_variance)
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if alpha.size == 1:
            alpha = np.full(n_categories, alpha[0])
        if alpha.size != n_categories:
            raise ValueError(
                f"alpha sized for {alpha.size} categories cannot serve an item "
                f"with {n_categories} categories")
        return InducedDirichletPrior(alpha=alpha, anchor=self.anchor,
                                     cdf_variant=self.cdf_variant)


def seq_transform(tau_star):
    """Map unconstrained components to strictly increasing thresholds."""
    x = np.atleast_1d(np.asarray(tau_star, dtype=float))
    out = np.empty_like(x)
    out[0] = x[0]
    if x.size > 1:
        out[1:] = x[0] + np.cumsum(np.exp(x[1:]))
    return out


def seq_transform_lpdf(tau_star, prior):
    """Sum of normal log-densities on tau*; no Jacobian term.

    The prior is defined on the unconstrained components themselves, which
    is exactly how sampling is parameterized, so the density needs no
    change-of-variables adjustment.
    """
    x = np.atleast_1d(np.asarray(tau_star, dtype=float))
    if x.size != len(prior):
        raise ValueError(f"tau_star has {x.size} components, prior expects {len(prior)}")
    z = (x - prior.mu_star) / prior.sd_star
    return float(np.sum(-0.5 * z * z - np.log(prior.sd_star) - 0.5 * _LOG_2PI))


def seq_transform_lpdf_grad(tau_star, prior):
    """Gradient of :func:`seq_transform_lpdf` with respect to tau*."""
    x = np.atleast_1d(np.asarray(tau_star, dtype=float))
    return -(x - prior.mu_star) / prior.sd_star ** 2


def sample_sequential_thresholds(prior, rng, size=None):
    """Draw realized thresholds implied by a sequential prior.

    Returns an array of shape (size, n_components) when size is given,
    otherwise (n_components,).
    """
    n = len(prior)
    shape = (n,) if size is None else (int(size), n)
    star = rng.normal(prior.mu_star, prior.sd_star, size=shape)
    if size is None:
        return seq_transform(star)
    out = np.empty_like(star)
    out[:, 0] = star[:, 0]
    if n > 1:
        out[:, 1:] = star[:, [0]] + np.cumsum(np.exp(star[:, 1:]), axis=1)
    return out


def _induced_pieces(tau, anchor, variant):
    """CDF values, densities rho, and their tau-derivatives at anchored cuts."""
    t = np.atleast_1d(np.asarray(tau, dtype=float)) - anchor
    if variant == "exact-normal":
        cdf = ndtr(t)
        rho = _norm_pdf(t)
        drho = -t * rho
    elif variant == "logistic-approx":
        s = expit(_LOGISTIC_SCALE * t)
        cdf = s
        rho = _LOGISTIC_SCALE * s * (1.0 - s)
        drho = _LOGISTIC_SCALE ** 2 * s * (1.0 - s) * (1.0 - 2.0 * s)
    else:
        raise ValueError(f"unknown cdf_variant {variant!r}")
    return cdf, rho, drho


def _probs_from_cdf(cdf):
    C = cdf.size + 1
    p = np.empty(C)
    p[0] = cdf[0]
    if C > 2:
        p[1:-1] = np.diff(cdf)
    p[-1] = 1.0 - cdf[-1]
    return p


def induced_jacobian(tau, anchor=0.0, variant="exact-normal"):
    """The completed C x C Jacobian of the threshold-to-probability map.

    First column is ones (the completion direction that shifts every
    category mass equally); column c+1 carries +rho_c in row c and -rho_c in
    row c+1, the derivatives of the CDF map.
    """
    _, rho, _ = _induced_pieces(tau, anchor, variant)
    C = rho.size + 1
    J = np.zeros((C, C))
    J[:, 0] = 1.0
    for c in range(1, C):
        J[c, c] = -rho[c - 1]
        J[c - 1, c] = rho[c - 1]
    return J


def _check_ordered(tau):
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.size > 1 and np.any(np.diff(tau) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    return tau


def induced_probabilities(tau, anchor=0.0):
    """Category probabilities induced by thresholds via the normal CDF."""
    tau = _check_ordered(tau)
    cdf, _, _ = _induced_pieces(tau, anchor, "exact-normal")
    return _probs_from_cdf(cdf)


def induced_dirichlet_lpdf(tau, alpha, anchor=0.0, variant="exact-normal"):
    """Log-density of thresholds under the induced-Dirichlet prior.

    Dirichlet log-density of the induced probability simplex plus the
    log-absolute-determinant of the completed Jacobian matrix, computed by
    LU factorization of the explicitly assembled matrix.
    """
    tau = _check_ordered(tau)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(alpha <= 0):
        raise ValueError("alpha must be elementwise positive")
    if alpha.size != tau.size + 1:
        raise ValueError(f"alpha has {alpha.size} entries, expected {tau.size + 1}")
    cdf, rho, _ = _induced_pieces(tau, anchor, variant)
    p = _probs_from_cdf(cdf)
    if np.any(p < 0):
        return -np.inf
    dir_lpdf = float(np.sum(xlogy(alpha - 1.0, p)) + gammaln(alpha.sum()) - np.sum(gammaln(alpha)))
    C = p.size
    J = np.zeros((C, C))
    J[:, 0] = 1.0
    for c in range(1, C):
        J[c, c] = -rho[c - 1]
        J[c - 1, c] = rho[c - 1]
    _, logabsdet = np.linalg.slogdet(J)
    return dir_lpdf + float(logabsdet)


def induced_dirichlet_lpdf_grad(tau, alpha, anchor=0.0, variant="exact-normal"):
    """Gradient of :func:`induced_dirichlet_lpdf` with respect to tau."""
    tau = _check_ordered(tau)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    cdf, rho, drho = _induced_pieces(tau, anchor, variant)
    p = _probs_from_cdf(cdf)
    C = p.size
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(alpha == 1.0, 0.0, (alpha - 1.0) / p)
    grad = rho * (ratio[:-1] - ratio[1:])
    J = np.zeros((C, C))
    J[:, 0] = 1.0
    for c in range(1, C):
        J[c, c] = -rho[c - 1]
        J[c - 1, c] = rho[c - 1]
    Jinv = np.linalg.inv(J)
    for c in range(C - 1):
        grad[c] += drho[c] * (Jinv[c + 1, c] - Jinv[c + 1, c + 1])
    return grad


def _induced_batch_lpdf_grad(tau_rows, alpha, anchor, variant):
    """Induced-Dirichlet value and gradient for stacked threshold rows.

    tau_rows is (n, C-1) with each row strictly increasing; alpha is shared
    across rows.  Returns (summed lpdf, (n, C-1) gradient); the gradient is
    None whenever the value is -inf (degenerate probabilities or a singular
    Jacobian), which callers treat as a rejection.
    """
    T = tau_rows - anchor
    if variant == "exact-normal":
        cdf = ndtr(T)
        rho = _norm_pdf(T)
        drho = -T * rho
    elif variant == "logistic-approx":
        sg = expit(_LOGISTIC_SCALE * T)
        cdf = sg
        rho = _LOGISTIC_SCALE * sg * (1.0 - sg)
        drho = _LOGISTIC_SCALE ** 2 * sg * (1.0 - sg) * (1.0 - 2.0 * sg)
    else:
        raise ValueError(f"unknown cdf_variant {variant!r}")
    n, cm1 = T.shape
    C = cm1 + 1
    if np.any(rho == 0.0):
        return -np.inf, None
    p = np.empty((n, C))
    p[:, 0] = cdf[:, 0]
    if C > 2:
        p[:, 1:-1] = np.diff(cdf, axis=1)
    p[:, -1] = 1.0 - cdf[:, -1]
    J = np.zeros((n, C, C))
    J[:, :, 0] = 1.0
    c = np.arange(1, C)
    J[:, c, c] = -rho
    J[:, c - 1, c] = rho
    _, logdet = np.linalg.slogdet(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = float(np.sum(xlogy(alpha - 1.0, p))) + float(logdet.sum()) \
            + n * float(gammaln(alpha.sum()) - np.sum(gammaln(alpha)))
        if not math.isfinite(value):
            return -np.inf, None
        ratio = np.where(alpha == 1.0, 0.0, (alpha - 1.0) / p)
    grad = rho * (ratio[:, :-1] - ratio[:, 1:])
    Jinv = np.linalg.inv(J)
    i = np.arange(cm1)
    grad += drho * (Jinv[:, i + 1, i] - Jinv[:, i + 1, i + 1])
    return value, grad


def sample_induced_thresholds(alpha, anchor=0.0, rng=None):
    """Draw one threshold vector by sampling the induced simplex.

    Draws p ~ Dirichlet(alpha) and inverts the probability map:
    tau_c = anchor + Phi^{-1}(p_1 + ... + p_c).
    """
    if rng is None:
        rng = np.random.default_rng()
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(alpha <= 0):
        raise ValueError("alpha must be elementwise positive")
    while True:
        p = rng.dirichlet(alpha)
        cum = np.cumsum(p[:-1])
        if np.all(cum > 0.0) and np.all(cum < 1.0):
            return anchor + ndtri(cum)


def solve_informative_sequential(E_targets, Var_targets):
    """Solve for the tau* prior matching target threshold moments.

    Given intended expectations and variances of the ordered thresholds,
    returns the sequential prior whose realized thresholds reproduce them:
    the first component passes through unchanged, and for c >= 2 with
    g = E[tau_c] - E[tau_{c-1}],

        Var[tau*_c] = log((Var[tau_c] - Var[tau_{c-1}] + g^2) / g^2)
        E[tau*_c]   = log(g) - Var[tau*_c] / 2.

    Requires strictly increasing expectations and variances; dispersions of
    the returned prior are variances (see var_star).
    """
    E = np.atleast_1d(np.asarray(E_targets, dtype=float))
    V = np.atleast_1d(np.asarray(Var_targets, dtype=float))
    if E.shape != V.shape:
        raise ValueError("E_targets and Var_targets must have matching lengths")
    if np.any(V <= 0):
        raise ValueError("infeasible targets: variances must be positive")
    if E.size > 1 and np.any(np.diff(E) <= 0):
        raise ValueError("infeasible targets: expectations must satisfy E[tau_c] > E[tau_c-1]")
    if V.size > 1 and np.any(np.diff(V) <= 0):
        raise ValueError("infeasible targets: variances must satisfy Var[tau_c] > Var[tau_c-1]")
    mu = np.empty_like(E)
    var = np.empty_like(V)
    mu[0] = E[0]
    var[0] = V[0]
    if E.size > 1:
        g = np.diff(E)
        var[1:] = np.log((np.diff(V) + g * g) / (g * g))
        mu[1:] = np.log(g) - var[1:] / 2.0
    return SequentialThresholdPrior.from_dispersion(mu, var, is_variance=True)


def lkj_lpdf(L, eta):
    """LKJ log-density (up to a constant) on a correlation Cholesky factor.

    lpdf = sum_{k=2..K} (K - k + 2*eta - 2) * log L[k, k]; eta = 1 is
    uniform over correlation matrices.  The Jacobian of the unconstrained
    parameterization lives in the transforms module, not here.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("L must be a square matrix")
    K = L.shape[0]
    if not np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-8):
        raise ValueError("rows of L must have unit norm")
    if K == 1:
        return 0.0
    k = np.arange(2, K + 1)
    coefs = K - k + 2.0 * eta - 2.0
    return float(np.sum(coefs * np.log(np.diag(L)[1:])))


def lkj_lpdf_diag_coefs(K, eta):
    """Coefficients c_k with lpdf = sum c_k log L[k,k], for gradient use."""
    if K == 1:
        return np.empty(0)
    k = np.arange(2, K + 1)
    return K - k + 2.0 * eta - 2.0


def half_cauchy_lpdf(x, scale):
    """log of 2 / (pi * scale * (1 + (x/scale)^2)) for x > 0, elementwise."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    if scale <= 0:
        raise ValueError("scale must be positive")
    out = np.log(2.0 / (math.pi * scale * (1.0 + (x / scale) ** 2)))
    return float(out) if out.ndim == 0 else out


def half_cauchy_lpdf_grad(x, scale):
    """Derivative of :func:`half_cauchy_lpdf` with respect to x."""
    x = np.asarray(x, dtype=float)
    return -2.0 * x / (scale ** 2 + x ** 2)


def normal_lpdf(x, loc, scale):
    """Sum of independent normal log-densities."""
    x = np.asarray(x, dtype=float)
    z = (x - loc) / scale
    return float(np.sum(-0.5 * z * z - math.log(scale) - 0.5 * _LOG_2PI))


def normal_lpdf_grad(x, loc, scale):
    x = np.asarray(x, dtype=float)
    return -(x - loc) / scale ** 2
