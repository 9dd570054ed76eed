"""Convergence diagnostics and posterior summaries.

Split-chain potential scale reduction (R-hat) and effective sample size via
the initial-monotone-sequence autocorrelation estimator, computed over
split chains so within-chain drift shows up as apparent non-convergence.
Constant sequences yield NaN with a warning instead of crashing, since a
stuck chain is a result the harness needs to record, not a program error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamSummary:
    """Posterior summary of one scalar parameter."""

    parameter: str
    mean: float
    sd: float
    q2_5: float
    q50: float
    q97_5: float
    rhat: float
    ess: float

    @property
    def ci_width(self):
        return self.q97_5 - self.q2_5

    def covers(self, true_value):
        return coverage_flag((self.q2_5, self.q97_5), true_value)


def _all_constant(parts):
    # identity test, not a variance threshold: a stuck chain repeats one
    # value exactly, while rounding in the mean can leave a spurious
    # nonzero variance for values with no short binary representation
    return bool(np.all(parts == parts.ravel()[0]))


def _split(chains):
    """Halve each chain; odd lengths drop the middle draw."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n = chains.shape[1]
    half = n // 2
    if half < 1:
        raise ValueError("need at least 2 draws per chain to split")
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def split_rhat(chains):
    """Potential scale reduction over split chains.

    chains is (n_chains, n_iterations).  Returns NaN (with a warning) when
    every draw is identical, since the ratio is undefined there.
    """
    parts = _split(chains)
    m, n = parts.shape
    if n < 2:
        raise ValueError("need at least 4 draws per chain")
    means = parts.mean(axis=1)
    variances = parts.var(axis=1, ddof=1)
    W = variances.mean()
    B = n * means.var(ddof=1)
    if W <= 0.0 or _all_constant(parts):
        warnings.warn("split_rhat: constant draws, returning NaN", RuntimeWarning)
        return float("nan")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocovariance(x):
    """Biased (1/n) autocovariance of one sequence via FFT."""
    n = x.size
    xc = x - x.mean()
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real
    return acov / n


def ess(chains):
    """Effective sample size via the initial monotone sequence estimator.

    Computed over split chains and capped at the total number of draws.
    Constant sequences yield NaN with a warning.
    """
    parts = _split(chains)
    m, n = parts.shape
    total = float(m * n)
    variances = parts.var(axis=1, ddof=1)
    W = variances.mean()
    if W <= 0.0 or _all_constant(parts):
        warnings.warn("ess: constant draws, returning NaN", RuntimeWarning)
        return float("nan")
    means = parts.mean(axis=1)
    B_over_n = means.var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B_over_n
    acov = np.mean([_autocovariance(parts[j]) for j in range(m)], axis=0)
    # rho_t = 1 - (W - mean autocovariance at lag t) / var_plus
    rho = 1.0 - (W - acov) / var_plus
    rho[0] = 1.0
    # Geyer pairs P_k = rho_{2k} + rho_{2k+1}: truncate at the first
    # non-positive pair, force the kept pairs non-increasing, and use
    # tau = -1 + 2 * sum of pairs
    pair_sums = []
    for k in range(n // 2):
        p = rho[2 * k] + rho[2 * k + 1]
        if p <= 0.0:
            break
        pair_sums.append(p)
    if not pair_sums:
        return total
    running = np.inf
    tau = -1.0
    for p in pair_sums:
        running = min(running, p)
        tau += 2.0 * running
    if tau <= 0.0:
        return total
    return float(min(total, total / tau))


def summarize(chains, name="parameter"):
    """Full summary of one parameter's (n_chains, n_iterations) draws."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    flat = chains.ravel()
    q2_5, q50, q97_5 = np.percentile(flat, [2.5, 50.0, 97.5])
    return ParamSummary(
        parameter=name,
        mean=float(flat.mean()),
        sd=float(flat.std(ddof=1)),
        q2_5=float(q2_5), q50=float(q50), q97_5=float(q97_5),
        rhat=split_rhat(chains),
        ess=ess(chains))


def summarize_draws(draws):
    """Summaries for every column of a draws object, in column order."""
    return [summarize(draws.column(name), name) for name in draws.param_names]


def coverage_flag(interval, true_value):
    """True when the closed interval [lo, hi] contains the value."""
    lo, hi = float(interval[0]), float(interval[1])
    if hi < lo:
        raise ValueError("interval endpoints are reversed")
    return bool(lo <= true_value <= hi)
