"""Hamiltonian Monte Carlo over the unconstrained parameter vector.

Two transition kernels share one adaptation harness:

- ``dynamic`` (default): tree-doubling trajectories with multinomial
  sampling of the proposal from the trajectory and the no-U-turn stopping
  rule.  Trajectory length adapts to the local geometry, which the strongly
  coupled augmented posteriors here need to mix through their ridges.
- ``static``: fixed-length trajectories with a jittered leapfrog count.

Step size is tuned by dual averaging toward a target acceptance rate; a
diagonal metric is estimated over expanding warmup windows.  Energy errors
beyond the divergence threshold (or non-finite states) are rejected and
recorded as divergent transitions; they never abort the run.

Chains run sequentially and are seeded from independent spawns of one seed
sequence, so results are bit-for-bit reproducible for a given seed and
configuration regardless of how many chains are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for one sampling run."""

    n_chains: int = 4
    n_warmup: int = 1000
    n_sampling: int = 1000
    algorithm: str = "dynamic"
    max_treedepth: int = 10
    base_leapfrog: int = 16
    leapfrog_jitter: float = 0.5
    target_accept: float = 0.8
    init_window: int = 75
    term_window: int = 50
    base_window: int = 25
    divergence_threshold: float = 1000.0
    init_radius: float = 2.0
    init: str = "random"
    max_init_retries: int = 100
    initial_step_size: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1 or self.n_warmup < 1 or self.n_sampling < 1:
            raise ValueError("chain and iteration counts must be positive")
        if self.algorithm not in ("dynamic", "static"):
            raise ValueError("algorithm must be 'dynamic' or 'static'")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0 <= self.leapfrog_jitter < 1:
            raise ValueError("leapfrog_jitter must lie in [0, 1)")
        if self.base_leapfrog < 1 or self.max_treedepth < 1:
            raise ValueError("trajectory length settings must be positive")
        if self.init not in ("random", "zero"):
            raise ValueError("init must be 'random' or 'zero'")


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-warmup draws mapped to reported (constrained) values."""

    param_names: tuple
    draws: np.ndarray            # (chains, iterations, parameters)
    divergent: np.ndarray        # (chains, iterations) bool
    step_size: np.ndarray        # (chains,)
    accept_rate: np.ndarray      # (chains,)
    warmup_divergences: np.ndarray  # (chains,)
    seed: int
    n_warmup: int

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_iterations(self):
        return self.draws.shape[1]

    @property
    def divergence_count(self):
        return int(self.divergent.sum())

    def column(self, name):
        """Draws of one parameter as a (chains, iterations) array."""
        try:
            j = self.param_names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.draws[:, :, j]

    def augmented(self, names, values):
        """New draws object with extra derived columns appended.

        values must be (chains, iterations, len(names)).
        """
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_chains, self.n_iterations, len(names)):
            raise ValueError("derived column array has the wrong shape")
        return PosteriorDraws(
            param_names=tuple(self.param_names) + tuple(names),
            draws=np.concatenate([self.draws, values], axis=2),
            divergent=self.divergent, step_size=self.step_size,
            accept_rate=self.accept_rate,
            warmup_divergences=self.warmup_divergences,
            seed=self.seed, n_warmup=self.n_warmup)


def initialize(layout, rng, config):
    """Starting point in unconstrained coordinates.

    Uniform(-r, r) per coordinate by default; the zero vector when the
    config says so (every block kind maps zero to a valid value).
    """
    if config.init == "zero":
        return np.zeros(layout.total_dim)
    return rng.uniform(-config.init_radius, config.init_radius, size=layout.total_dim)


def _warmup_schedule(n_warmup, init_window, term_window, base_window):
    """Iteration indices at which each slow (metric) window closes.

    The usual three-phase layout: a fast opening window, doubling slow
    windows, and a fast closing window.  Short warmups shrink the fast
    phases proportionally; the last slow window absorbs the remainder.
    """
    if n_warmup < init_window + term_window + base_window:
        init_window = max(1, int(0.15 * n_warmup))
        term_window = max(1, int(0.10 * n_warmup))
        base_window = max(1, n_warmup - init_window - term_window)
    closes = []
    start = init_window
    size = base_window
    while start + size < n_warmup - term_window:
        closes.append(start + size)
        start += size
        size *= 2
    closes.append(n_warmup - term_window)
    return init_window, closes


class _DualAveraging:
    """Step-size adaptation toward a target acceptance probability."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(eps0)

    def update(self, accept_prob):
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(m) * self.h_bar / self.gamma
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    @property
    def adapted(self):
        return math.exp(self.log_eps_bar) if self.count else math.exp(self.log_eps)


class _Welford:
    """Running mean and variance of draws inside one metric window."""

    def __init__(self, dim):
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.n = 0

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self):
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + (1.0 - w) * 1e-3

    def reset(self):
        self.n = 0
        self.mean[:] = 0.0
        self.m2[:] = 0.0


def _leapfrog(logp_and_grad, x, p, grad, eps, n_steps, m_inv):
    """Standard leapfrog integration; returns the endpoint state."""
    p = p + 0.5 * eps * grad
    for step in range(n_steps):
        x = x + eps * m_inv * p
        value, grad = logp_and_grad(x)
        if not np.all(np.isfinite(grad)) or not math.isfinite(value):
            return x, p, value, grad, False
        if step < n_steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad
    return x, p, value, grad, True


def _find_reasonable_eps(logp_and_grad, x, value, grad, m_inv, sqrt_m, rng, eps):
    """Coarse step-size search: double or halve until a single leapfrog
    step has acceptance probability on the near side of 1/2."""
    p = rng.standard_normal(x.size) * sqrt_m
    h0 = value - 0.5 * float(np.sum(p * p * m_inv))

    def one_step_delta(e):
        _, p1, v1, _, ok = _leapfrog(logp_and_grad, x, p, grad, e, 1, m_inv)
        if not ok:
            return -np.inf
        return (v1 - 0.5 * float(np.sum(p1 * p1 * m_inv))) - h0

    delta = one_step_delta(eps)
    direction = 1.0 if delta > math.log(0.5) else -1.0
    for _ in range(50):
        if direction > 0 and delta <= math.log(0.5):
            break
        if direction < 0 and delta >= math.log(0.5):
            break
        eps *= 2.0 ** direction
        if not 1e-10 < eps < 1e10:
            break
        delta = one_step_delta(eps)
    return min(max(eps, 1e-10), 1e10)


class _StaticKernel:
    """Fixed-length trajectories with a jittered leapfrog count."""

    def __init__(self, logp_and_grad, config):
        self.f = logp_and_grad
        self.threshold = config.divergence_threshold
        self.lo = max(1, int(math.ceil(config.base_leapfrog * (1.0 - config.leapfrog_jitter))))
        self.hi = max(self.lo, int(math.floor(config.base_leapfrog * (1.0 + config.leapfrog_jitter))))

    def transition(self, x, value, grad, eps, m_inv, sqrt_m, rng):
        dim = x.size
        p = rng.standard_normal(dim) * sqrt_m
        n_steps = int(rng.integers(self.lo, self.hi + 1))
        h0 = value - 0.5 * float(np.sum(p * p * m_inv))
        x1, p1, v1, g1, ok = _leapfrog(self.f, x, p, grad, eps, n_steps, m_inv)
        if ok:
            h1 = v1 - 0.5 * float(np.sum(p1 * p1 * m_inv))
            diverged = (not math.isfinite(h1)) or (h0 - h1) > self.threshold
            delta = h1 - h0
            accept = 0.0 if not math.isfinite(delta) else math.exp(min(delta, 0.0))
        else:
            diverged = True
            accept = 0.0
        if not diverged and rng.uniform() < accept:
            return x1, v1, g1, accept, diverged
        return x, value, grad, accept, diverged


class _TreeState:
    """One subtree of a doubling trajectory."""

    __slots__ = ("x_minus", "p_minus", "g_minus", "x_plus", "p_plus", "g_plus",
                 "x_prop", "v_prop", "g_prop", "log_w", "sum_accept", "n_leap",
                 "diverged", "turned")


class _DynamicKernel:
    """Tree-doubling trajectories with multinomial proposal sampling.

    Trajectory stops when either end would retrace its steps (no-U-turn,
    checked with metric-scaled velocities) or when any leaf diverges; the
    proposal is drawn from the trajectory with weights exp(H - H0).
    """

    def __init__(self, logp_and_grad, config):
        self.f = logp_and_grad
        self.threshold = config.divergence_threshold
        self.max_depth = config.max_treedepth

    def _uturn(self, state, m_inv):
        dx = state.x_plus - state.x_minus
        return (float(np.dot(dx, m_inv * state.p_minus)) < 0.0
                or float(np.dot(dx, m_inv * state.p_plus)) < 0.0)

    def _leaf(self, x, p, grad, direction, eps, m_inv, h0):
        x1, p1, v1, g1, ok = _leapfrog(self.f, x, p, grad, direction * eps, 1, m_inv)
        s = _TreeState()
        s.x_minus = s.x_plus = x1
        s.p_minus = s.p_plus = p1
        s.g_minus = s.g_plus = g1
        s.x_prop, s.v_prop, s.g_prop = x1, v1, g1
        s.n_leap = 1
        s.turned = False
        if ok:
            h1 = v1 - 0.5 * float(np.sum(p1 * p1 * m_inv))
            delta = h1 - h0
            s.diverged = (not math.isfinite(h1)) or (-delta) > self.threshold
            s.log_w = delta if math.isfinite(delta) else -np.inf
            s.sum_accept = math.exp(min(delta, 0.0)) if math.isfinite(delta) else 0.0
        else:
            s.diverged = True
            s.log_w = -np.inf
            s.sum_accept = 0.0
        return s

    def _build(self, x, p, grad, direction, depth, eps, m_inv, h0, rng):
        if depth == 0:
            return self._leaf(x, p, grad, direction, eps, m_inv, h0)
        first = self._build(x, p, grad, direction, depth - 1, eps, m_inv, h0, rng)
        if first.diverged or first.turned:
            return first
        if direction > 0:
            second = self._build(first.x_plus, first.p_plus, first.g_plus,
                                 direction, depth - 1, eps, m_inv, h0, rng)
        else:
            second = self._build(first.x_minus, first.p_minus, first.g_minus,
                                 direction, depth - 1, eps, m_inv, h0, rng)
        merged = _TreeState()
        if direction > 0:
            merged.x_minus, merged.p_minus, merged.g_minus = first.x_minus, first.p_minus, first.g_minus
            merged.x_plus, merged.p_plus, merged.g_plus = second.x_plus, second.p_plus, second.g_plus
        else:
            merged.x_minus, merged.p_minus, merged.g_minus = second.x_minus, second.p_minus, second.g_minus
            merged.x_plus, merged.p_plus, merged.g_plus = first.x_plus, first.p_plus, first.g_plus
        merged.log_w = np.logaddexp(first.log_w, second.log_w)
        merged.sum_accept = first.sum_accept + second.sum_accept
        merged.n_leap = first.n_leap + second.n_leap
        merged.diverged = second.diverged
        merged.turned = second.turned or self._uturn(merged, m_inv)
        # multinomial draw between the two halves
        if (not merged.diverged and not merged.turned
                and math.log(rng.uniform()) < second.log_w - merged.log_w):
            merged.x_prop, merged.v_prop, merged.g_prop = second.x_prop, second.v_prop, second.g_prop
        else:
            merged.x_prop, merged.v_prop, merged.g_prop = first.x_prop, first.v_prop, first.g_prop
        return merged

    def transition(self, x, value, grad, eps, m_inv, sqrt_m, rng):
        dim = x.size
        p = rng.standard_normal(dim) * sqrt_m
        h0 = value - 0.5 * float(np.sum(p * p * m_inv))
        current = _TreeState()
        current.x_minus = current.x_plus = x
        current.p_minus = current.p_plus = p
        current.g_minus = current.g_plus = grad
        current.x_prop, current.v_prop, current.g_prop = x, value, grad
        current.log_w = 0.0
        current.sum_accept = 0.0
        current.n_leap = 0
        current.diverged = False
        current.turned = False
        for depth in range(self.max_depth):
            direction = 1 if rng.uniform() < 0.5 else -1
            if direction > 0:
                sub = self._build(current.x_plus, current.p_plus, current.g_plus,
                                  1, depth, eps, m_inv, h0, rng)
            else:
                sub = self._build(current.x_minus, current.p_minus, current.g_minus,
                                  -1, depth, eps, m_inv, h0, rng)
            current.sum_accept += sub.sum_accept
            current.n_leap += sub.n_leap
            if sub.diverged:
                current.diverged = True
                break
            if sub.turned:
                break
            # biased progressive sampling favors the newer subtree
            if math.log(rng.uniform()) < sub.log_w - current.log_w:
                current.x_prop, current.v_prop, current.g_prop = sub.x_prop, sub.v_prop, sub.g_prop
            current.log_w = np.logaddexp(current.log_w, sub.log_w)
            if direction > 0:
                current.x_plus, current.p_plus, current.g_plus = sub.x_plus, sub.p_plus, sub.g_plus
            else:
                current.x_minus, current.p_minus, current.g_minus = sub.x_minus, sub.p_minus, sub.g_minus
            if self._uturn(current, m_inv):
                break
        accept_stat = current.sum_accept / max(current.n_leap, 1)
        return (current.x_prop, current.v_prop, current.g_prop,
                accept_stat, current.diverged)


def _run_chain(logp_and_grad, layout, config, rng, report_dim):
    dim = layout.total_dim
    x = initialize(layout, rng, config)
    value, grad = logp_and_grad(x)
    retries = 0
    while not (math.isfinite(value) and np.all(np.isfinite(grad))):
        retries += 1
        if retries > config.max_init_retries or config.init == "zero":
            raise RuntimeError(
                f"no valid starting point after {retries} initialization attempts")
        x = initialize(layout, rng, config)
        value, grad = logp_and_grad(x)

    if config.algorithm == "dynamic":
        kernel = _DynamicKernel(logp_and_grad, config)
    else:
        kernel = _StaticKernel(logp_and_grad, config)

    m_inv = np.ones(dim)
    sqrt_m = np.ones(dim)
    eps = _find_reasonable_eps(
        logp_and_grad, x, value, grad, m_inv, sqrt_m, rng, config.initial_step_size)
    da = _DualAveraging(eps, config.target_accept)
    init_window, slow_closes = _warmup_schedule(
        config.n_warmup, config.init_window, config.term_window, config.base_window)
    welford = _Welford(dim)

    draws = np.empty((config.n_sampling, report_dim))
    divergent = np.zeros(config.n_sampling, dtype=bool)
    warmup_div = 0
    accept_sum = 0.0
    slow_idx = 0

    for it in range(config.n_warmup + config.n_sampling):
        x, value, grad, accept_prob, diverged = kernel.transition(
            x, value, grad, eps, m_inv, sqrt_m, rng)
        if it < config.n_warmup:
            warmup_div += int(diverged)
            eps = da.update(accept_prob)
            if init_window <= it < config.n_warmup - config.term_window:
                welford.push(x)
            if slow_idx < len(slow_closes) and it + 1 == slow_closes[slow_idx]:
                m_inv = welford.regularized_variance()
                sqrt_m = 1.0 / np.sqrt(m_inv)
                welford.reset()
                eps = _find_reasonable_eps(
                    logp_and_grad, x, value, grad, m_inv, sqrt_m, rng, eps)
                da.restart(eps)
                slow_idx += 1
            if it + 1 == config.n_warmup:
                eps = da.adapted
        else:
            j = it - config.n_warmup
            divergent[j] = diverged
            accept_sum += accept_prob
            draws[j] = layout.report(x)

    return draws, divergent, eps, accept_sum / config.n_sampling, warmup_div


def run_chains(logp_and_grad, layout, config):
    """Run the configured chains and collect reported draws.

    logp_and_grad maps a flat unconstrained vector to (value, gradient);
    non-finite values are treated as rejections, so the callable must never
    raise on numerical failure.
    """
    names = tuple(layout.report_names())
    report_dim = len(names)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    all_draws = np.empty((config.n_chains, config.n_sampling, report_dim))
    all_div = np.zeros((config.n_chains, config.n_sampling), dtype=bool)
    step_sizes = np.empty(config.n_chains)
    accept_rates = np.empty(config.n_chains)
    warmup_divs = np.zeros(config.n_chains, dtype=np.int64)
    for c in range(config.n_chains):
        rng = np.random.default_rng(seeds[c])
        draws, div, eps, acc, wdiv = _run_chain(
            logp_and_grad, layout, config, rng, report_dim)
        all_draws[c] = draws
        all_div[c] = div
        step_sizes[c] = eps
        accept_rates[c] = acc
        warmup_divs[c] = wdiv
    return PosteriorDraws(
        param_names=names, draws=all_draws, divergent=all_div,
        step_size=step_sizes, accept_rate=accept_rates,
        warmup_divergences=warmup_divs, seed=config.seed,
        n_warmup=config.n_warmup)
