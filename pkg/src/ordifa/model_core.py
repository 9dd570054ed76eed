"""Measurement model, marginal covariance, and augmented likelihood.

The latent response y* of each respondent is multivariate normal with mean
zero (intercepts fixed for identification) and covariance L*Phi*L' + Theta.
Observed ordinal codes arise by cutting y* at per-item thresholds.  The
likelihood is evaluated through a truncated-multivariate-normal recursion
with uniform nuisance variables u in (0,1): the joint density over
(parameters, u) has the ordinal-probit likelihood as its u-marginal, so
sampling (parameters, u) jointly and discarding u yields draws from the
marginal posterior.

The posterior assembly in this module evaluates the joint log-density in
unconstrained coordinates together with its gradient (hand-derived reverse
pass, validated against finite differences).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, ndtr, ndtri

from . import priors as prior_lib
from . import transforms
from ._ghk import D_FLOOR, ghk_loglik_and_grad
from .transforms import TransformBlock, TransformLayout

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class IdentificationRule:
    """How the latent-response scale is identified.

    Intercepts are fixed to zero and one reference loading per factor is
    fixed to ``reference_loading``.  Residual variances are either free
    parameters (with a half-Cauchy prior on their standard deviations) or
    fixed to ``residual_value``; fixing them pins each item's latent scale
    and is what the simulation studies use.
    """

    reference_loading: float = 1.0
    residual: str = "free"
    residual_value: float = 1.0

    def __post_init__(self):
        if self.residual not in ("free", "fixed"):
            raise ValueError("residual must be 'free' or 'fixed'")
        if self.residual == "fixed" and self.residual_value <= 0:
            raise ValueError("fixed residual variance must be positive")


@dataclass(frozen=True)
class ItemSpec:
    """One ordinal indicator."""

    item_id: str
    factor_indices: tuple
    n_categories: int
    is_reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "item_id", str(self.item_id))
        object.__setattr__(self, "factor_indices", tuple(int(k) for k in self.factor_indices))
        if self.n_categories < 2:
            raise ValueError(f"item {self.item_id!r}: n_categories must be >= 2")
        if len(self.factor_indices) == 0:
            raise ValueError(f"item {self.item_id!r}: must load on at least one factor")

    @property
    def n_thresholds(self):
        return self.n_categories - 1


@dataclass(frozen=True)
class ModelSpec:
    """Structure of the factor model: items, factors, identification."""

    n_factors: int
    items: tuple
    identification: IdentificationRule = field(default_factory=IdentificationRule)
    n_groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.n_factors < 1 or self.n_groups < 1:
            raise ValueError("n_factors and n_groups must be positive")
        loaded = [set() for _ in range(self.n_factors)]
        refs = [0] * self.n_factors
        for i, it in enumerate(self.items):
            for k in it.factor_indices:
                if not 0 <= k < self.n_factors:
                    raise ValueError(f"item {it.item_id!r}: factor index {k} out of range")
                loaded[k].add(i)
                if it.is_reference:
                    refs[k] += 1
        for k in range(self.n_factors):
            if not loaded[k]:
                raise ValueError(f"factor {k} has no items")
            if refs[k] != 1:
                raise ValueError(f"factor {k} needs exactly one reference item, found {refs[k]}")
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids")

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_categories(self):
        return np.array([it.n_categories for it in self.items], dtype=np.int64)

    def loading_masks(self):
        """(free, fixed) boolean masks over the I x K loading matrix."""
        I, K = self.n_items, self.n_factors
        free = np.zeros((I, K), dtype=bool)
        fixed = np.zeros((I, K), dtype=bool)
        for i, it in enumerate(self.items):
            for k in it.factor_indices:
                if it.is_reference:
                    fixed[i, k] = True
                else:
                    free[i, k] = True
        return free, fixed


@dataclass(frozen=True)
class ThresholdVector:
    """Strictly increasing cutpoints for one item."""

    tau: np.ndarray

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        if tau.size > 1 and np.any(np.diff(tau) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "tau", tau)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.tau, dtype=dtype)

    def __len__(self):
        return self.tau.size


@dataclass(frozen=True)
class LatentStructure:
    """Loadings, factor covariance, residual variances, intercepts."""

    loadings: np.ndarray
    factor_cov: np.ndarray
    residual_var: np.ndarray
    intercepts: np.ndarray = None

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        phi = np.atleast_2d(np.asarray(self.factor_cov, dtype=float))
        theta = np.atleast_1d(np.asarray(self.residual_var, dtype=float))
        if phi.shape[0] != phi.shape[1] or lam.shape[1] != phi.shape[0]:
            raise ValueError("loadings and factor_cov dimensions do not conform")
        if theta.ndim == 2:
            theta = np.diag(theta)
        if theta.size != lam.shape[0]:
            raise ValueError("residual_var length must match the number of items")
        if np.any(theta <= 0):
            raise ValueError("residual variances must be positive")
        if not np.allclose(phi, phi.T, atol=1e-12):
            raise ValueError("factor_cov must be symmetric")
        np.linalg.cholesky(phi)  # SPD check
        nu = self.intercepts
        nu = np.zeros(lam.shape[0]) if nu is None else np.asarray(nu, dtype=float)
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "factor_cov", phi)
        object.__setattr__(self, "residual_var", theta)
        object.__setattr__(self, "intercepts", nu)


@dataclass(frozen=True)
class ModelParams:
    """Constrained parameters: structure plus per-item thresholds."""

    structure: LatentStructure
    thresholds: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "thresholds",
            tuple(t if isinstance(t, ThresholdVector) else ThresholdVector(np.asarray(t, dtype=float))
                  for t in self.thresholds))


@dataclass(frozen=True)
class DatasetMatrix:
    """Observed integer responses with declared category counts."""

    responses: np.ndarray
    n_categories: np.ndarray
    counts: tuple

    @classmethod
    def build(cls, responses, n_categories):
        resp = np.ascontiguousarray(np.asarray(responses, dtype=np.int64))
        if resp.ndim != 2:
            raise ValueError("responses must be a 2-D integer matrix")
        ncat = np.atleast_1d(np.asarray(n_categories, dtype=np.int64))
        if ncat.size == 1:
            ncat = np.full(resp.shape[1], int(ncat[0]), dtype=np.int64)
        if ncat.size != resp.shape[1]:
            raise ValueError("n_categories length must match the number of columns")
        if np.any(ncat < 2):
            raise ValueError("every item needs at least 2 categories")
        counts = []
        for j in range(resp.shape[1]):
            col = resp[:, j]
            bad = (col < 1) | (col > ncat[j])
            if np.any(bad):
                r = int(np.argmax(bad))
                raise ValueError(
                    f"response code {col[r]} at row {r + 1}, column {j + 1} "
                    f"is outside the declared range 1..{ncat[j]}")
            counts.append(np.bincount(col, minlength=ncat[j] + 1)[1:].copy())
        return cls(responses=resp, n_categories=ncat, counts=tuple(counts))

    @property
    def n_rows(self):
        return self.responses.shape[0]

    @property
    def n_items(self):
        return self.responses.shape[1]


@dataclass(frozen=True)
class AugmentedState:
    """Uniform nuisance values, one per response cell."""

    u: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise ValueError("u must lie strictly inside (0, 1)")
        object.__setattr__(self, "u", u)


# ---------------------------------------------------------------------------
# Core operations


def marginal_cov(loadings, factor_cov, residual_cov):
    """Marginal latent-response covariance: loadings @ Phi @ loadings' + Theta."""
    lam = np.atleast_2d(np.asarray(loadings, dtype=float))
    phi = np.atleast_2d(np.asarray(factor_cov, dtype=float))
    theta = np.asarray(residual_cov, dtype=float)
    if theta.ndim == 2:
        if not np.allclose(theta, np.diag(np.diag(theta))):
            raise ValueError("residual covariance must be diagonal")
        theta = np.diag(theta)
    theta = np.atleast_1d(theta)
    if lam.shape[1] != phi.shape[0] or phi.shape[0] != phi.shape[1]:
        raise ValueError("dimension mismatch between loadings and factor covariance")
    if theta.size != lam.shape[0]:
        raise ValueError("residual covariance size must match the number of items")
    if not np.allclose(phi, phi.T, atol=1e-12):
        raise ValueError("factor covariance must be symmetric")
    if np.any(theta <= 0):
        raise ValueError("residual variances must be positive")
    sigma = lam @ phi @ lam.T
    sigma = 0.5 * (sigma + sigma.T)
    sigma[np.diag_indices_from(sigma)] += theta
    return sigma


def cholesky_lower(sigma):
    """Lower Cholesky factor; names the failing pivot on SPD violation."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape[0] != sigma.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        # locate the failing pivot for the error message
        n = sigma.shape[0]
        L = np.zeros_like(sigma)
        for j in range(n):
            pivot = sigma[j, j] - np.dot(L[j, :j], L[j, :j])
            if pivot <= 0:
                raise ValueError(f"matrix is not positive definite: pivot {j + 1} is non-positive") from None
            L[j, j] = math.sqrt(pivot)
            for i in range(j + 1, n):
                L[i, j] = (sigma[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
        raise ValueError("matrix is not positive definite") from None


def category_prob(tau, mu=0.0, sigma=1.0):
    """Category probabilities for thresholds tau at location mu, scale sigma."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.size > 1 and np.any(np.diff(tau) <= 0):
        raise ValueError("thresholds must be strictly increasing (ordering violation)")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cdf = ndtr((tau - mu) / sigma)
    C = tau.size + 1
    p = np.empty(C)
    p[0] = cdf[0]
    if C > 2:
        p[1:-1] = np.diff(cdf)
    p[-1] = 1.0 - cdf[-1]
    return p


def ghk_tmvn(y, mu, L, thresholds, u):
    """One-row truncated-MVN recursion: latent scores z and probabilities d.

    For item k with observed code c, the conditional mean is
    mu[k] + L[k, :k] @ z[:k] and conditional scale L[k, k].  The bottom
    category uses d = Phi(z*); the top uses d = 1 - Phi(z*); interior codes
    use the difference of the two scaled threshold CDFs.  The latent score
    is z = Phi^{-1}(nu) with nu the u-interpolated point of the interval.

    Returns (z, d); d entries can underflow to values below ``D_FLOOR`` in
    which case the caller should treat the row's log-density as -inf.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    I = y.size
    taus = [np.atleast_1d(np.asarray(t, dtype=float)) for t in thresholds]
    for k, t in enumerate(taus):
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError(f"item {k + 1}: thresholds must be strictly increasing")
        if not 1 <= y[k] <= t.size + 1:
            raise ValueError(f"item {k + 1}: response code {y[k]} outside 1..{t.size + 1}")
    z = np.empty(I)
    d = np.empty(I)
    for k in range(I):
        m = mu[k] + (L[k, :k] @ z[:k] if k else 0.0)
        s = L[k, k]
        c = int(y[k])
        C = taus[k].size + 1
        if c == 1:
            u_star = ndtr((taus[k][0] - m) / s)
            d[k] = u_star
            nu = u_star * u[k]
        elif c == C:
            u_star = ndtr((taus[k][C - 2] - m) / s)
            d[k] = 1.0 - u_star
            nu = u_star + d[k] * u[k]
        else:
            u_lo = ndtr((taus[k][c - 2] - m) / s)
            u_hi = ndtr((taus[k][c - 1] - m) / s)
            d[k] = u_hi - u_lo
            nu = u_lo + d[k] * u[k]
        z[k] = ndtri(np.clip(nu, 5e-324, 1.0 - 1e-16))
    return z, d


def _pad_thresholds(taus, n_categories):
    cmax = int(max(n_categories))
    out = np.zeros((len(taus), max(cmax - 1, 1)))
    for i, t in enumerate(taus):
        t = np.asarray(t, dtype=float)
        if t.size != n_categories[i] - 1:
            raise ValueError(f"item {i + 1}: expected {n_categories[i] - 1} thresholds, got {t.size}")
        out[i, :t.size] = t
    return out


def augmented_log_likelihood(params, u, data):
    """Sum over rows and items of log interval probabilities.

    -inf when any interval probability underflows (never clamped, so the
    gradient of a finite value is always unbiased).
    """
    if isinstance(u, AugmentedState):
        u = u.u
    u = np.atleast_2d(np.asarray(u, dtype=float))
    structure = params.structure
    taus = [np.asarray(t) for t in params.thresholds]
    if data.n_rows == 0:
        return 0.0
    if u.shape != data.responses.shape:
        raise ValueError("u must match the shape of the responses")
    sigma = marginal_cov(structure.loadings, structure.factor_cov, structure.residual_var)
    L = cholesky_lower(sigma)
    tau_pad = _pad_thresholds(taus, data.n_categories)
    total, _, _, _ = ghk_loglik_and_grad(
        data.responses, data.n_categories, tau_pad, structure.intercepts, L, u)
    return float(total)


def cholesky_backward(L, L_bar):
    """Symmetric gradient of f with respect to Sigma given dF/dL.

    Standard reverse-mode rule for Sigma = L @ L.T: with P the lower
    triangle of L' @ L_bar (diagonal halved), the symmetric adjoint is
    0.5 * L^{-T} (P + P') L^{-1}.
    """
    P = np.tril(L.T @ L_bar)
    P[np.diag_indices_from(P)] *= 0.5
    S = P + P.T
    tmp = solve_triangular(L, S, lower=True, trans="T")
    out = solve_triangular(L, tmp.T, lower=True, trans="T")
    # out = L^{-T} S L^{-1} is already symmetric; the 0.25 folds in the
    # leading 0.5 of the adjoint identity after averaging for hygiene
    return 0.25 * (out + out.T)


# ---------------------------------------------------------------------------
# Posterior assembly


def build_layout(model, prior_config, n_rows):
    """Sampling layout the ModelSpec dictates for a dataset of n rows.

    Threshold blocks are sampled in tau* coordinates under the sequential
    family (density defined there, no Jacobian) and in ordered-vector
    coordinates under the induced-Dirichlet family (density on tau plus the
    ordered-vector Jacobian).  Both report as thresholds.
    """
    seq_family = prior_config.threshold_family == "sequential"
    specs = []
    for it in model.items:
        dim = it.n_thresholds
        names = tuple(f"tau[{it.item_id},{c + 1}]" for c in range(dim))
        specs.append(TransformBlock(
            name=f"tau_{it.item_id}",
            kind="unconstrained" if seq_family else "ordered_vector",
            dim=dim, report_kind="ordered_vector", element_names=names))
    free, _ = model.loading_masks()
    if free.any():
        idx = np.argwhere(free)
        names = tuple(f"lambda[{model.items[i].item_id},{k + 1}]" for i, k in idx)
        specs.append(TransformBlock(name="lambda", kind="unconstrained",
                                    dim=len(idx), element_names=names))
    specs.append(TransformBlock(
        name="factor_sd", kind="positive", dim=model.n_factors,
        element_names=tuple(f"factor_sd[{k + 1}]" for k in range(model.n_factors))))
    K = model.n_factors
    if K > 1:
        names = tuple(f"factor_corr[{i + 1},{j + 1}]" for i in range(1, K) for j in range(i))
        specs.append(TransformBlock(name="factor_corr", kind="corr_cholesky",
                                    dim=K * (K - 1) // 2, shape=(K, K), element_names=names))
    if model.identification.residual == "free":
        specs.append(TransformBlock(
            name="resid_sd", kind="positive", dim=model.n_items,
            element_names=tuple(f"resid_sd[{it.item_id}]" for it in model.items)))
    specs.append(TransformBlock(name="u", kind="unit_interval",
                                dim=n_rows * model.n_items,
                                shape=(n_rows, model.n_items), tracked=False))
    return TransformLayout.build(specs)


class Posterior:
    """Joint log-density of (parameters, u) in unconstrained coordinates.

    Immutable after construction; evaluation is a pure function of the
    input vectors, so instances are safe to share across workers.
    """

    def __init__(self, model, data, prior_config):
        if data.n_items != model.n_items:
            raise ValueError("data and model disagree on the number of items")
        if not np.array_equal(data.n_categories, model.n_categories):
            raise ValueError("declared category counts disagree with the model")
        self.model = model
        self.data = data
        self.prior_config = prior_config
        self.layout = build_layout(model, prior_config, data.n_rows)
        self.theta_dim = self.layout.total_dim - data.n_rows * model.n_items
        self.u_dim = data.n_rows * model.n_items
        free, fixed = model.loading_masks()
        self._free_idx = np.argwhere(free)
        self._fixed_mask = fixed
        self._ncat = model.n_categories
        self._cmax = int(self._ncat.max())
        self._mu0 = np.zeros(model.n_items)
        self._tau_slices = []
        off = 0
        for it in model.items:
            self._tau_slices.append(slice(off, off + it.n_thresholds))
            off += it.n_thresholds
        self._tau_total = off
        self._seq = prior_config.threshold_family == "sequential"
        self._item_priors = [prior_config.threshold_prior_for(it.n_categories)
                             for it in model.items]
        self._lkj_coefs = prior_lib.lkj_lpdf_diag_coefs(
            model.n_factors, prior_config.structural.factor_corr_shape)
        # items with equal category counts share prior parameters, so their
        # threshold transforms and densities evaluate as stacked rows
        by_c = {}
        for i, it in enumerate(model.items):
            by_c.setdefault(it.n_thresholds, []).append(i)
        self._tau_groups = []
        for cm1 in sorted(by_c):
            idxs = by_c[cm1]
            rows = np.asarray(idxs, dtype=np.int64)
            x_idx = np.empty((len(idxs), cm1), dtype=np.int64)
            for r, i in enumerate(idxs):
                b = self.layout.block(f"tau_{model.items[i].item_id}")
                x_idx[r] = np.arange(b.offset, b.offset + b.dim)
            self._tau_groups.append((rows, x_idx, self._item_priors[idxs[0]]))
        self._sl_lam = self.layout.slice_of("lambda") if free.any() else None
        self._sl_sd = self.layout.slice_of("factor_sd")
        self._sl_r = self.layout.slice_of("factor_corr") if model.n_factors > 1 else None
        self._sl_t = (self.layout.slice_of("resid_sd")
                      if model.identification.residual == "free" else None)
        self._sl_u = self.layout.slice_of("u")

    @property
    def total_dim(self):
        return self.layout.total_dim

    def log_posterior_and_gradient(self, theta_unc, u_unc):
        """Value and gradient over the concatenated (theta, u) vector.

        Non-finite intermediate states return (-inf, zeros) so the sampler
        can reject the proposal instead of aborting.
        """
        theta_unc = np.asarray(theta_unc, dtype=float)
        u_unc = np.asarray(u_unc, dtype=float)
        if theta_unc.size != self.theta_dim or u_unc.size != self.u_dim:
            raise ValueError("parameter vector lengths do not match the layout")
        x = np.concatenate([theta_unc, u_unc])
        return self._eval(x)

    def logpdf_and_grad(self, x):
        """Flat-vector form used by the sampler."""
        return self._eval(np.asarray(x, dtype=float))

    def _reject(self):
        return -np.inf, np.zeros(self.layout.total_dim)

    def _eval(self, x):
        model = self.model
        I, K = model.n_items, model.n_factors
        N = self.data.n_rows
        sp = self.prior_config.structural
        logjac = 0.0
        value = 0.0

        tau_pad = np.zeros((I, max(self._cmax - 1, 1)))
        group_fwd = []
        for rows, x_idx, pr in self._tau_groups:
            X = x[x_idx]
            E = np.exp(X[:, 1:])
            tau = np.empty_like(X)
            tau[:, 0] = X[:, 0]
            if X.shape[1] > 1:
                tau[:, 1:] = X[:, :1] + np.cumsum(E, axis=1)
            tau_pad[rows, :X.shape[1]] = tau
            group_fwd.append((X, E, tau))
            if not self._seq:
                logjac += float(X[:, 1:].sum())
        if not np.all(np.isfinite(tau_pad)):
            return self._reject()

        lam = np.zeros((I, K))
        lam[self._fixed_mask] = model.identification.reference_loading
        if self._sl_lam is not None:
            lam_free = x[self._sl_lam]
            lam[self._free_idx[:, 0], self._free_idx[:, 1]] = lam_free

        x_sd = x[self._sl_sd]
        s = np.exp(x_sd)
        logjac += float(x_sd.sum())

        if K > 1:
            x_r = x[self._sl_r]
            L_R, lj = transforms.corr_cholesky_constrain(x_r)
            if not math.isfinite(lj):
                return self._reject()
            logjac += lj
            R = L_R @ L_R.T
        else:
            x_r = None
            L_R = np.ones((1, 1))
            R = np.ones((1, 1))
        phi = R * np.outer(s, s)

        if self._sl_t is not None:
            x_t = x[self._sl_t]
            t_sd = np.exp(x_t)
            theta_var = t_sd ** 2
            logjac += float(x_t.sum())
        else:
            t_sd = None
            theta_var = np.full(I, model.identification.residual_value)

        sigma = lam @ phi @ lam.T
        sigma = 0.5 * (sigma + sigma.T)
        sigma[np.diag_indices_from(sigma)] += theta_var
        if not np.all(np.isfinite(sigma)):
            return self._reject()
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            return self._reject()

        x_u = x[self._sl_u]
        uu = expit(x_u)
        with np.errstate(divide="ignore"):
            lj_u = np.log(uu) + np.log1p(-uu)
        if not np.all(np.isfinite(lj_u)):
            return self._reject()
        logjac += float(lj_u.sum())
        u_mat = uu.reshape(N, I)

        loglik, tau_bar_pad, L_bar, u_bar = ghk_loglik_and_grad(
            self.data.responses, self._ncat, tau_pad, self._mu0, L, u_mat)
        if not math.isfinite(loglik):
            return self._reject()
        value += loglik

        # threshold priors plus the pullback of the likelihood cotangent
        grad = np.zeros(self.layout.total_dim)
        for (rows, x_idx, pr), (X, E, tau) in zip(self._tau_groups, group_fwd):
            cm1 = X.shape[1]
            B = tau_bar_pad[rows, :cm1]
            if self._seq:
                Z = (X - pr.mu_star) / pr.sd_star
                value += (-0.5 * float((Z * Z).sum())
                          - X.shape[0] * float(np.log(pr.sd_star).sum() + 0.5 * cm1 * _LOG_2PI))
                tb = B
            else:
                lp, gt = prior_lib._induced_batch_lpdf_grad(
                    tau, pr.alpha, pr.anchor, pr.cdf_variant)
                if not math.isfinite(lp):
                    return self._reject()
                value += lp
                tb = B + gt
            g = np.empty_like(X)
            g[:, 0] = tb.sum(axis=1)
            if cm1 > 1:
                g[:, 1:] = E * np.cumsum(tb[:, :0:-1], axis=1)[:, ::-1]
            if self._seq:
                g -= (X - pr.mu_star) / pr.sd_star ** 2
            else:
                g[:, 1:] += 1.0
            grad[x_idx] = g

        if self._sl_lam is not None:
            value += prior_lib.normal_lpdf(lam_free, sp.loading_loc, sp.loading_scale)
        value += float(prior_lib.half_cauchy_lpdf(s, sp.variance_scale).sum())
        if K > 1:
            with np.errstate(divide="ignore"):
                value += float(self._lkj_coefs @ np.log(np.diag(L_R)[1:]))
        if t_sd is not None:
            value += float(prior_lib.half_cauchy_lpdf(t_sd, sp.variance_scale).sum())

        # reverse pass through the covariance assembly
        sigma_bar = cholesky_backward(L, L_bar)
        lam_bar = 2.0 * sigma_bar @ lam @ phi
        phi_bar = lam.T @ sigma_bar @ lam
        theta_bar = np.diag(sigma_bar).copy()

        if self._sl_lam is not None:
            g = lam_bar[self._free_idx[:, 0], self._free_idx[:, 1]]
            g = g + prior_lib.normal_lpdf_grad(lam_free, sp.loading_loc, sp.loading_scale)
            grad[self._sl_lam] = g

        s_bar = 2.0 * (phi_bar * R) @ s
        s_bar += prior_lib.half_cauchy_lpdf_grad(s, sp.variance_scale)
        grad[self._sl_sd] = s_bar * s + 1.0

        if K > 1:
            R_bar = phi_bar * np.outer(s, s)
            LR_bar = np.tril(2.0 * R_bar @ L_R)
            rows = np.arange(1, K)
            LR_bar[rows, rows] += self._lkj_coefs / np.diag(L_R)[1:]
            grad[self._sl_r] = transforms.corr_cholesky_vjp(
                x_r, LR_bar, include_logjac_grad=True)

        if t_sd is not None:
            tb = theta_bar * 2.0 * t_sd
            tb += prior_lib.half_cauchy_lpdf_grad(t_sd, sp.variance_scale)
            grad[self._sl_t] = tb * t_sd + 1.0

        g_u = u_bar.ravel() * (uu * (1.0 - uu)) + (1.0 - 2.0 * uu)
        grad[self._sl_u] = g_u

        value += logjac
        if not math.isfinite(value):
            return self._reject()
        return float(value), grad


def log_posterior_and_gradient(theta_unc, u_unc, data, prior_config, model):
    """One-shot form of :meth:`Posterior.log_posterior_and_gradient`.

    Builds the posterior object and evaluates it once; reuse a
    :class:`Posterior` instance when evaluating repeatedly.
    """
    post = Posterior(model, data, prior_config)
    return post.log_posterior_and_gradient(theta_unc, u_unc)
