"""Compiled kernel for the truncated-multivariate-normal recursion.

The public entry points live in :mod:`ordifa.model_core`; this module holds
the numba-compiled batch evaluation of the recursion and its reverse-mode
gradient, which dominate the cost of every posterior evaluation.

The scalar normal CDF uses the complementary error function and the quantile
uses Wichura's AS241 rational approximations; both are accurate to double
precision.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# d values below this are treated as an impossible observation (-inf log
# density) rather than clamped, so gradients are never silently biased.
D_FLOOR = 1e-300


@njit(cache=True, error_model="numpy")
def _norm_cdf(z):
    return 0.5 * math.erfc(-z / _SQRT2)


@njit(cache=True, error_model="numpy")
def _norm_pdf(z):
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


@njit(cache=True, error_model="numpy")
def _norm_ppf(p):
    # AS241 (PPND16): |relative error| < 1e-15 over (0, 1).
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
              + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
              + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
              + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
              + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
              + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
              + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    if r <= 0.0:
        return -math.inf if q < 0.0 else math.inf
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
              + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
              + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
              + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
              + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
              + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
              + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
              + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
              + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
              + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
              + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
              + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
              + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(cache=True, error_model="numpy")
def ghk_loglik_and_grad(y, ncat, tau, mu, L, u):
    """Sum of log interval probabilities over all rows, with gradients.

    Parameters
    ----------
    y : (N, I) int64, codes 1..ncat[i]
    ncat : (I,) int64 category counts per item
    tau : (I, Cmax-1) float64, row i holds the ncat[i]-1 thresholds
    mu : (I,) float64 latent-response means
    L : (I, I) float64 lower Cholesky factor of the marginal covariance
    u : (N, I) float64 nuisance values in (0, 1)

    Returns
    -------
    (total, tau_bar, L_bar, u_bar); total is -inf when any interval
    probability underflows, in which case the gradients are unusable.
    """
    N, I = y.shape
    total = 0.0
    tau_bar = np.zeros_like(tau)
    L_bar = np.zeros_like(L)
    u_bar = np.zeros_like(u)
    z = np.empty(I)
    zs_lo = np.empty(I)
    zs_hi = np.empty(I)
    dd = np.empty(I)
    z_bar = np.empty(I)
    for n in range(N):
        for k in range(I):
            m = mu[k]
            for j in range(k):
                m += L[k, j] * z[j]
            s = L[k, k]
            c = y[n, k]
            C = ncat[k]
            if c > 1:
                zl = (tau[k, c - 2] - m) / s
                ul = _norm_cdf(zl)
            else:
                zl = 0.0
                ul = 0.0
            if c < C:
                zh = (tau[k, c - 1] - m) / s
                uh = _norm_cdf(zh)
            else:
                zh = 0.0
                uh = 1.0
            d = uh - ul
            if d < D_FLOOR:
                return -math.inf, tau_bar, L_bar, u_bar
            nu = ul + d * u[n, k]
            # float rounding can land nu on exactly 0 or 1 when an interval
            # endpoint saturates; clamp to the nearest representable interior
            # point so the latent score stays finite
            if nu < 1e-320:
                nu = 1e-320
            elif nu > 0.9999999999999999:
                nu = 0.9999999999999999
            z[k] = _norm_ppf(nu)
            zs_lo[k] = zl
            zs_hi[k] = zh
            dd[k] = d
            total += math.log(d)
        for k in range(I):
            z_bar[k] = 0.0
        for k in range(I - 1, -1, -1):
            c = y[n, k]
            C = ncat[k]
            s = L[k, k]
            d = dd[k]
            d_bar = 1.0 / d
            nu_bar = z_bar[k] / _norm_pdf(z[k])
            uh_bar = d_bar + nu_bar * u[n, k]
            ul_bar = -d_bar + nu_bar * (1.0 - u[n, k])
            u_bar[n, k] = nu_bar * d
            m_bar = 0.0
            s_bar = 0.0
            if c > 1:
                zl_bar = ul_bar * _norm_pdf(zs_lo[k])
                tau_bar[k, c - 2] += zl_bar / s
                m_bar -= zl_bar / s
                s_bar -= zl_bar * zs_lo[k] / s
            if c < C:
                zh_bar = uh_bar * _norm_pdf(zs_hi[k])
                tau_bar[k, c - 1] += zh_bar / s
                m_bar -= zh_bar / s
                s_bar -= zh_bar * zs_hi[k] / s
            L_bar[k, k] += s_bar
            for j in range(k):
                L_bar[k, j] += m_bar * z[j]
                z_bar[j] += m_bar * L[k, j]
    return total, tau_bar, L_bar, u_bar
