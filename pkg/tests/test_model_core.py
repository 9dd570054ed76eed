"""Likelihood core: GHK recursion, covariance algebra, posterior gradients."""

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from ordifa._ghk import ghk_loglik_and_grad
from ordifa.model_core import (AugmentedState, DatasetMatrix,
                               IdentificationRule, ItemSpec, LatentStructure,
                               ModelParams, ModelSpec, Posterior,
                               ThresholdVector, augmented_log_likelihood,
                               build_layout, category_prob, cholesky_backward,
                               cholesky_lower, ghk_tmvn,
                               log_posterior_and_gradient, marginal_cov)
from ordifa.priors import PriorConfig


def two_factor_model(n_categories=3, residual="fixed"):
    items = tuple(
        ItemSpec(item_id=f"item_{i + 1}", factor_indices=(i // 2,),
                 n_categories=n_categories, is_reference=(i % 2 == 0))
        for i in range(4))
    ident = IdentificationRule(residual=residual, residual_value=1.0)
    return ModelSpec(n_factors=2, items=items, identification=ident)


def simulate_for(model, n_rows, seed):
    rng = np.random.default_rng(seed)
    lam = np.array([[1.0, 0.0], [0.8, 0.0], [0.0, 1.0], [0.0, 1.2]])
    phi = np.array([[1.0, 0.3], [0.3, 1.0]])
    eta = rng.multivariate_normal(np.zeros(2), phi, size=n_rows)
    ystar = eta @ lam.T + rng.standard_normal((n_rows, 4))
    C = int(model.n_categories[0])
    cuts = np.linspace(-1.0, 1.0, C - 1)
    codes = 1 + np.searchsorted(cuts, ystar.T).T
    return DatasetMatrix.build(codes, model.n_categories)


# --- covariance algebra ------------------------------------------------------

def test_marginal_cov_formula():
    lam = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]])
    phi = np.array([[1.0, 0.2], [0.2, 2.0]])
    theta = np.array([1.0, 0.5, 2.0])
    sigma = marginal_cov(lam, phi, theta)
    np.testing.assert_allclose(sigma, lam @ phi @ lam.T + np.diag(theta))
    with pytest.raises(ValueError, match="diagonal"):
        marginal_cov(lam, phi, np.array([[1.0, 0.1, 0], [0.1, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError, match="symmetric"):
        marginal_cov(lam, np.array([[1.0, 0.3], [0.1, 1.0]]), theta)


def test_cholesky_lower_matches_numpy_and_names_pivot():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    sigma = A @ A.T + 4 * np.eye(4)
    np.testing.assert_allclose(cholesky_lower(sigma), np.linalg.cholesky(sigma))
    bad = np.eye(3)
    bad[2, 2] = -1.0
    with pytest.raises(ValueError, match="pivot 3"):
        cholesky_lower(bad)


def test_cholesky_backward_matches_symmetric_numerical_gradient():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    sigma = A @ A.T + 4 * np.eye(4)
    W = rng.standard_normal((4, 4))

    def f(S):
        return float(np.sum(W * np.linalg.cholesky(S)))

    L = np.linalg.cholesky(sigma)
    G = cholesky_backward(L, W)
    np.testing.assert_allclose(G, G.T, atol=1e-14)
    eps = 1e-6
    for i in range(4):
        for j in range(i + 1):
            dS = np.zeros((4, 4))
            dS[i, j] = dS[j, i] = eps
            fd = (f(sigma + dS) - f(sigma - dS)) / (2 * eps)
            expected = G[i, j] if i == j else G[i, j] + G[j, i]
            np.testing.assert_allclose(expected, fd, rtol=1e-5, atol=1e-8)


# --- category probabilities and the GHK recursion ---------------------------

def test_category_prob_matches_cdf_differences():
    tau = np.array([-1.0, 0.2, 1.5])
    p = category_prob(tau, mu=0.3, sigma=1.4)
    z = (tau - 0.3) / 1.4
    expected = np.diff(np.concatenate([[0.0], ndtr(z), [1.0]]))
    np.testing.assert_allclose(p, expected)
    np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)
    with pytest.raises(ValueError, match="increasing"):
        category_prob(np.array([0.5, -0.5]))


def test_ghk_single_item_is_exact_for_any_u():
    tau = np.array([-0.7, 0.4])
    for u in (0.1, 0.5, 0.93):
        for code, expected in zip(
                (1, 2, 3), category_prob(tau, mu=0.2, sigma=1.3)):
            _, d = ghk_tmvn([code], [0.2], [[1.3]], [tau], [u])
            np.testing.assert_allclose(d[0], expected, rtol=1e-12)


def test_ghk_average_recovers_rectangle_probability():
    # for two items the u-averaged product of conditional probabilities is
    # the bivariate normal rectangle mass, computable exactly from the CDF
    rho = 0.6
    sigma = np.array([[1.0, rho], [rho, 1.0]])
    L = np.linalg.cholesky(sigma)
    taus = [np.array([-0.8, 0.3]), np.array([-0.2, 0.9])]
    mvn = stats.multivariate_normal(mean=np.zeros(2), cov=sigma)

    def rectangle(lo, hi):
        return (mvn.cdf([hi[0], hi[1]]) - mvn.cdf([lo[0], hi[1]])
                - mvn.cdf([hi[0], lo[1]]) + mvn.cdf([lo[0], lo[1]]))

    rng = np.random.default_rng(11)
    n_mc = 4000
    for y in ((1, 1), (2, 2), (3, 2), (1, 3)):
        bounds = []
        for k in range(2):
            t = taus[k]
            lo = -30.0 if y[k] == 1 else t[y[k] - 2]
            hi = 30.0 if y[k] == 3 else t[y[k] - 1]
            bounds.append((lo, hi))
        exact = rectangle((bounds[0][0], bounds[1][0]), (bounds[0][1], bounds[1][1]))
        us = rng.uniform(1e-9, 1 - 1e-9, size=(n_mc, 2))
        est = np.mean([np.prod(ghk_tmvn(y, np.zeros(2), L, taus, u)[1])
                       for u in us])
        se = np.std([np.prod(ghk_tmvn(y, np.zeros(2), L, taus, u)[1])
                     for u in us[:500]]) / np.sqrt(n_mc)
        np.testing.assert_allclose(est, exact, atol=max(4 * se, 5e-4))


def test_ghk_validates_inputs():
    tau = [np.array([0.0, 1.0])]
    with pytest.raises(ValueError, match="inside"):
        ghk_tmvn([1], [0.0], [[1.0]], tau, [0.0])
    with pytest.raises(ValueError, match="code"):
        ghk_tmvn([4], [0.0], [[1.0]], tau, [0.5])
    with pytest.raises(ValueError, match="increasing"):
        ghk_tmvn([1], [0.0], [[1.0]], [np.array([1.0, 0.0])], [0.5])


def test_kernel_total_matches_python_recursion():
    rng = np.random.default_rng(13)
    n, I = 12, 3
    taus = [np.array([-1.0, 0.0]), np.array([-0.5, 0.7]), np.array([0.1, 1.2])]
    ncat = np.array([3, 3, 3], dtype=np.int64)
    lam = np.array([[1.0, 0.0], [0.7, 0.0], [0.0, 1.1]])
    phi = np.array([[1.0, 0.2], [0.2, 1.0]])
    sigma = marginal_cov(lam, phi, np.ones(I))
    L = np.linalg.cholesky(sigma)
    y = rng.integers(1, 4, size=(n, I)).astype(np.int64)
    u = rng.uniform(0.05, 0.95, size=(n, I))
    tau_pad = np.stack(taus)
    total, _, _, _ = ghk_loglik_and_grad(y, ncat, tau_pad, np.zeros(I), L, u)
    expected = 0.0
    for r in range(n):
        _, d = ghk_tmvn(y[r], np.zeros(I), L, taus, u[r])
        expected += np.log(d).sum()
    np.testing.assert_allclose(total, expected, rtol=1e-10)


def test_kernel_gradients_match_numerical():
    rng = np.random.default_rng(17)
    n, I = 6, 2
    ncat = np.array([3, 4], dtype=np.int64)
    taus = [np.array([-0.9, 0.2, 0.0]), np.array([-1.1, 0.0, 0.8])]
    tau_pad = np.stack([np.array([-0.9, 0.2, 0.0]), np.array([-1.1, 0.0, 0.8])])
    L = np.array([[1.2, 0.0], [0.4, 1.0]])
    y = np.column_stack([rng.integers(1, 4, n), rng.integers(1, 5, n)]).astype(np.int64)
    u = rng.uniform(0.1, 0.9, size=(n, I))
    mu = np.zeros(I)
    eps = 1e-7

    def value(tau_p, Lm, um):
        t, _, _, _ = ghk_loglik_and_grad(y, ncat, tau_p, mu, Lm, um)
        return t

    _, tau_bar, L_bar, u_bar = ghk_loglik_and_grad(y, ncat, tau_pad, mu, L, u)
    for i in range(I):
        for c in range(ncat[i] - 1):
            d = np.zeros_like(tau_pad)
            d[i, c] = eps
            fd = (value(tau_pad + d, L, u) - value(tau_pad - d, L, u)) / (2 * eps)
            np.testing.assert_allclose(tau_bar[i, c], fd, rtol=1e-5, atol=1e-6)
    for i in range(I):
        for j in range(i + 1):
            d = np.zeros_like(L)
            d[i, j] = eps
            fd = (value(tau_pad, L + d, u) - value(tau_pad, L - d, u)) / (2 * eps)
            np.testing.assert_allclose(L_bar[i, j], fd, rtol=1e-5, atol=1e-6)
    flat = rng.integers(0, n * I, 5)
    for k in flat:
        d = np.zeros_like(u)
        d[k // I, k % I] = eps
        fd = (value(tau_pad, L, u + d) - value(tau_pad, L, u - d)) / (2 * eps)
        np.testing.assert_allclose(u_bar[k // I, k % I], fd, rtol=1e-5, atol=1e-6)


def test_augmented_log_likelihood_consistency():
    structure = LatentStructure(
        loadings=np.array([[1.0], [0.9]]), factor_cov=np.array([[1.0]]),
        residual_var=np.ones(2))
    params = ModelParams(structure=structure,
                         thresholds=(np.array([-0.5, 0.5]), np.array([0.0, 1.0])))
    data = DatasetMatrix.build(np.array([[1, 2], [3, 1], [2, 2]]), [3, 3])
    u = np.full((3, 2), 0.37)
    sigma = marginal_cov(structure.loadings, structure.factor_cov,
                         structure.residual_var)
    L = np.linalg.cholesky(sigma)
    expected = 0.0
    for r in range(3):
        _, d = ghk_tmvn(data.responses[r], np.zeros(2), L,
                        [np.asarray(t) for t in params.thresholds], u[r])
        expected += np.log(d).sum()
    np.testing.assert_allclose(augmented_log_likelihood(params, u, data), expected)
    state = AugmentedState(u=u)
    np.testing.assert_allclose(augmented_log_likelihood(params, state, data), expected)


# --- domain types ------------------------------------------------------------

def test_dataset_matrix_counts_and_validation():
    data = DatasetMatrix.build(np.array([[1, 4], [2, 4], [2, 2]]), 4)
    np.testing.assert_array_equal(data.counts[0], [1, 2, 0, 0])
    np.testing.assert_array_equal(data.counts[1], [0, 1, 0, 2])
    assert data.n_rows == 3 and data.n_items == 2
    with pytest.raises(ValueError, match="row 2, column 1"):
        DatasetMatrix.build(np.array([[1, 1], [5, 1]]), 4)
    with pytest.raises(ValueError, match="row 1, column 2"):
        DatasetMatrix.build(np.array([[1, 0], [2, 1]]), 4)


def test_threshold_vector_and_structure_validation():
    with pytest.raises(ValueError, match="increasing"):
        ThresholdVector(np.array([0.0, 0.0]))
    assert len(ThresholdVector(np.array([0.0, 1.0]))) == 2
    with pytest.raises(ValueError, match="positive"):
        LatentStructure(loadings=np.ones((2, 1)), factor_cov=np.eye(1),
                        residual_var=np.array([1.0, -1.0]))


def test_model_spec_reference_accounting():
    with pytest.raises(ValueError, match="reference"):
        ModelSpec(n_factors=1, items=(
            ItemSpec(item_id="a", factor_indices=(0,), n_categories=3),
            ItemSpec(item_id="b", factor_indices=(0,), n_categories=3)))
    with pytest.raises(ValueError, match="no items"):
        ModelSpec(n_factors=2, items=(
            ItemSpec(item_id="a", factor_indices=(0,), n_categories=3,
                     is_reference=True),))
    model = two_factor_model()
    free, fixed = model.loading_masks()
    assert fixed[0, 0] and fixed[2, 1]
    assert free[1, 0] and free[3, 1]
    assert free.sum() == 2 and fixed.sum() == 2


def test_build_layout_block_order_and_tracking():
    model = two_factor_model(n_categories=4)
    layout = build_layout(model, PriorConfig.sequential(), n_rows=5)
    names = [b.name for b in layout.blocks]
    assert names == ["tau_item_1", "tau_item_2", "tau_item_3", "tau_item_4",
                     "lambda", "factor_sd", "factor_corr", "u"]
    assert layout.block("tau_item_1").kind == "unconstrained"
    assert layout.block("tau_item_1").report_kind == "ordered_vector"
    assert not layout.block("u").tracked
    assert layout.block("u").dim == 20
    reported = layout.report_names()
    assert "tau[item_2,3]" in reported and "lambda[item_2,1]" in reported
    assert "factor_corr[2,1]" in reported and not any("u" == n for n in reported)

    induced = build_layout(model, PriorConfig.induced(), n_rows=5)
    assert induced.block("tau_item_1").kind == "ordered_vector"

    free_resid = two_factor_model(n_categories=4, residual="free")
    layout2 = build_layout(free_resid, PriorConfig.sequential(), n_rows=5)
    assert layout2.block("resid_sd").dim == 4


# --- full posterior gradient -------------------------------------------------

PRIOR_SPECS = (
    PriorConfig.sequential(mu=0.0, dispersion=1.5),
    PriorConfig.sequential(mu=0.0, dispersion=1e5),
    PriorConfig.induced(alpha=1.0),
)


@pytest.mark.parametrize("prior_idx", range(3))
@pytest.mark.parametrize("residual", ("fixed", "free"))
def test_posterior_gradient_matches_central_differences(prior_idx, residual):
    model = two_factor_model(n_categories=3, residual=residual)
    data = simulate_for(model, n_rows=6, seed=31)
    post = Posterior(model, data, PRIOR_SPECS[prior_idx])
    rng = np.random.default_rng(41 + prior_idx)
    x = rng.uniform(-0.6, 0.6, post.total_dim)
    value, grad = post.logpdf_and_grad(x)
    assert np.isfinite(value)
    eps = 1e-5
    idx = rng.choice(post.total_dim, size=min(25, post.total_dim), replace=False)
    for j in idx:
        dx = np.zeros(post.total_dim)
        dx[j] = eps
        vp, _ = post.logpdf_and_grad(x + dx)
        vm, _ = post.logpdf_and_grad(x - dx)
        fd = (vp - vm) / (2 * eps)
        np.testing.assert_allclose(grad[j], fd, rtol=2e-4, atol=5e-6)


def test_posterior_rejects_invalid_states_quietly():
    model = two_factor_model()
    data = simulate_for(model, n_rows=5, seed=7)
    post = Posterior(model, data, PriorConfig.induced(alpha=1.0))
    x = np.zeros(post.total_dim)
    x[post.layout.slice_of("factor_corr")] = 900.0  # saturates the tanh map
    with np.errstate(all="raise"):
        value, grad = post.logpdf_and_grad(x)
    assert value == -np.inf
    np.testing.assert_array_equal(grad, 0.0)


def test_posterior_split_argument_wrapper():
    model = two_factor_model()
    data = simulate_for(model, n_rows=4, seed=9)
    prior = PriorConfig.sequential()
    post = Posterior(model, data, prior)
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.3, 0.3, post.total_dim)
    theta, u = x[:post.theta_dim], x[post.theta_dim:]
    v1, g1 = post.log_posterior_and_gradient(theta, u)
    v2, g2 = log_posterior_and_gradient(theta, u, data, prior, model)
    v3, g3 = post.logpdf_and_grad(x)
    assert v1 == v3 and v1 == v2
    np.testing.assert_array_equal(g1, g3)
    np.testing.assert_array_equal(g1, g2)
    with pytest.raises(ValueError, match="length"):
        post.log_posterior_and_gradient(theta[:-1], u)


def test_posterior_validates_data_against_model():
    model = two_factor_model(n_categories=3)
    wrong = DatasetMatrix.build(np.ones((4, 4), dtype=int), 5)
    with pytest.raises(ValueError, match="category counts"):
        Posterior(model, wrong, PriorConfig.sequential())
