"""Bijections between constrained parameters and the unconstrained space.

Every sampled parameter block is mapped to an unconstrained coordinate
system; each block kind carries the standard log-Jacobian adjustment of its
map.  Block kinds:

- ``unconstrained``: identity.
- ``ordered_vector``: first element free, gaps are exponentials of the
  remaining coordinates, so the output is strictly increasing.
- ``unit_interval``: elementwise logistic map onto (0, 1).
- ``positive``: elementwise exponential.
- ``corr_cholesky``: canonical-partial-correlation construction of the lower
  Cholesky factor of a correlation matrix from tanh-mapped coordinates.

The ``report_kind`` of a block controls how draws are mapped for storage and
summaries; it defaults to the block kind.  Threshold blocks sampled in
sum-of-exponentials coordinates report through ``ordered_vector`` so stored
draws are always actual thresholds, and ``corr_cholesky`` blocks report the
off-diagonal correlations of the assembled correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("unconstrained", "ordered_vector", "unit_interval", "positive", "corr_cholesky")


@dataclass(frozen=True)
class TransformBlock:
    """One named parameter block of a :class:`TransformLayout`."""

    name: str
    kind: str
    dim: int
    offset: int = 0
    shape: tuple = ()
    tracked: bool = True
    report_kind: str = ""
    element_names: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError(f"block {self.name!r} has non-positive dimension")
        if not self.report_kind:
            object.__setattr__(self, "report_kind", self.kind)
        if not self.element_names:
            if self.dim == 1:
                names = (self.name,)
            else:
                names = tuple(f"{self.name}[{j + 1}]" for j in range(self.dim))
            object.__setattr__(self, "element_names", names)
        elif len(self.element_names) != self.dim:
            raise ValueError(f"block {self.name!r}: element_names length mismatch")


@dataclass(frozen=True)
class TransformLayout:
    """Ordered, contiguous blocks describing one flat parameter vector."""

    blocks: tuple

    @classmethod
    def build(cls, specs):
        """Assign contiguous offsets to blocks given in order."""
        blocks = []
        offset = 0
        for b in specs:
            blocks.append(TransformBlock(
                name=b.name, kind=b.kind, dim=b.dim, offset=offset,
                shape=b.shape, tracked=b.tracked, report_kind=b.report_kind,
                element_names=b.element_names))
            offset += b.dim
        layout = cls(blocks=tuple(blocks))
        names = [b.name for b in layout.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names in layout")
        return layout

    @property
    def total_dim(self):
        return sum(b.dim for b in self.blocks)

    def block(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def slice_of(self, name):
        b = self.block(name)
        return slice(b.offset, b.offset + b.dim)

    def report_names(self):
        """Element names of every tracked block, in layout order."""
        names = []
        for b in self.blocks:
            if b.tracked:
                names.extend(b.element_names)
        return names

    def report(self, flat):
        """Map a flat unconstrained vector to tracked reported values."""
        flat = np.asarray(flat, dtype=float)
        out = []
        for b in self.blocks:
            if not b.tracked:
                continue
            x = flat[b.offset:b.offset + b.dim]
            if b.report_kind == "corr_cholesky":
                out.append(_corr_from_unconstrained(x, b))
            else:
                value, _ = _constrain_block(x, b.report_kind)
                out.append(value)
        if not out:
            return np.empty(0)
        return np.concatenate(out)


def _corr_dim_to_k(dim):
    k = int(round((1.0 + np.sqrt(1.0 + 8.0 * dim)) / 2.0))
    if k * (k - 1) // 2 != dim:
        raise ValueError(f"dimension {dim} is not a triangular number")
    return k


def corr_cholesky_constrain(x):
    """Unconstrained vector -> (lower Cholesky factor L, log-Jacobian).

    Entries are taken row-major over the strict lower triangle.  Each row of
    L has unit norm, so L @ L.T is a correlation matrix.
    """
    x = np.asarray(x, dtype=float)
    K = _corr_dim_to_k(x.size)
    z = np.tanh(x)
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    logjac = 0.0
    idx = 0
    # z saturates at +/-1 for huge |x|; the -inf log-Jacobian then rejects
    # the proposal upstream, so divide-by-zero noise is suppressed here
    with np.errstate(divide="ignore"):
        for i in range(1, K):
            rem = 1.0
            for j in range(i):
                zij = z[idx]
                L[i, j] = zij * np.sqrt(rem)
                logjac += np.log1p(-zij * zij) + 0.5 * np.log(rem)
                rem *= 1.0 - zij * zij
                idx += 1
            L[i, i] = np.sqrt(rem)
    return L, logjac


def corr_cholesky_unconstrain(L):
    """Inverse of :func:`corr_cholesky_constrain`."""
    L = np.asarray(L, dtype=float)
    K = L.shape[0]
    if not np.allclose(L, np.tril(L)):
        raise ValueError("corr_cholesky: matrix is not lower triangular")
    if not np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-8):
        raise ValueError("corr_cholesky: rows do not have unit norm")
    if np.any(np.diag(L) <= 0):
        raise ValueError("corr_cholesky: diagonal must be positive")
    x = []
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            zij = L[i, j] / np.sqrt(rem)
            x.append(np.arctanh(np.clip(zij, -1 + 1e-15, 1 - 1e-15)))
            rem *= 1.0 - zij * zij
    return np.asarray(x)


def corr_cholesky_vjp(x, L_bar, include_logjac_grad=True):
    """Reverse-mode map of a cotangent on L back to the unconstrained x.

    When ``include_logjac_grad`` is set the gradient of the block's
    log-Jacobian with respect to x is added, which is what a log-density
    evaluated in unconstrained coordinates needs.
    """
    x = np.asarray(x, dtype=float)
    K = _corr_dim_to_k(x.size)
    z = np.tanh(x)
    x_bar = np.zeros_like(x)
    row_start = [0]
    for i in range(1, K - 1):
        row_start.append(row_start[-1] + i)
    for i in range(K - 1, 0, -1):
        start = row_start[i - 1]
        rem_seq = [1.0]
        for j in range(i):
            zij = z[start + j]
            rem_seq.append(rem_seq[-1] * (1.0 - zij * zij))
        rem_bar = L_bar[i, i] * 0.5 / np.sqrt(rem_seq[i])
        for j in range(i - 1, -1, -1):
            zij = z[start + j]
            sq = np.sqrt(rem_seq[j])
            Lij = zij * sq
            lb = L_bar[i, j] - 2.0 * Lij * rem_bar
            z_bar = lb * sq
            r_bar = rem_bar + lb * zij * 0.5 / sq
            if include_logjac_grad:
                z_bar += -2.0 * zij / (1.0 - zij * zij)
                r_bar += 0.5 / rem_seq[j]
            x_bar[start + j] += z_bar * (1.0 - zij * zij)
            rem_bar = r_bar
    return x_bar


def _corr_from_unconstrained(x, block):
    L, _ = corr_cholesky_constrain(x)
    R = L @ L.T
    K = L.shape[0]
    vals = [R[i, j] for i in range(1, K) for j in range(i)]
    return np.asarray(vals)


def _constrain_block(x, kind):
    if kind == "unconstrained":
        return x.copy(), 0.0
    if kind == "ordered_vector":
        out = np.empty_like(x)
        out[0] = x[0]
        if x.size > 1:
            out[1:] = x[0] + np.cumsum(np.exp(x[1:]))
        return out, float(np.sum(x[1:]))
    if kind == "unit_interval":
        value = 1.0 / (1.0 + np.exp(-x))
        logjac = float(np.sum(-np.logaddexp(0.0, -x) - np.logaddexp(0.0, x)))
        return value, logjac
    if kind == "positive":
        return np.exp(x), float(np.sum(x))
    if kind == "corr_cholesky":
        return corr_cholesky_constrain(x)
    raise ValueError(f"unknown block kind {kind!r}")


def _unconstrain_block(value, kind, name):
    if kind == "unconstrained":
        return np.asarray(value, dtype=float).ravel().copy()
    if kind == "ordered_vector":
        v = np.asarray(value, dtype=float).ravel()
        if v.size > 1 and np.any(np.diff(v) <= 0):
            raise ValueError(f"block {name!r}: ordered_vector values must be strictly increasing")
        out = np.empty_like(v)
        out[0] = v[0]
        if v.size > 1:
            out[1:] = np.log(np.diff(v))
        return out
    if kind == "unit_interval":
        v = np.asarray(value, dtype=float).ravel()
        if np.any((v <= 0) | (v >= 1)):
            raise ValueError(f"block {name!r}: unit_interval values must lie in (0, 1)")
        return np.log(v) - np.log1p(-v)
    if kind == "positive":
        v = np.asarray(value, dtype=float).ravel()
        if np.any(v <= 0):
            raise ValueError(f"block {name!r}: positive values required")
        return np.log(v)
    if kind == "corr_cholesky":
        try:
            return corr_cholesky_unconstrain(np.asarray(value, dtype=float))
        except ValueError as e:
            raise ValueError(f"block {name!r}: {e}") from e
    raise ValueError(f"unknown block kind {kind!r}")


def to_constrained(flat, layout):
    """Map a flat unconstrained vector to named constrained parameters.

    Returns ``(params, logjac)`` where params maps block name to the
    constrained value (reshaped when the block declares a shape) and logjac
    is the total log-Jacobian of the map.
    """
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1 or flat.size != layout.total_dim:
        raise ValueError(f"expected flat vector of length {layout.total_dim}, got shape {flat.shape}")
    params = {}
    logjac = 0.0
    for b in layout.blocks:
        x = flat[b.offset:b.offset + b.dim]
        value, lj = _constrain_block(x, b.kind)
        logjac += lj
        if b.shape and b.kind != "corr_cholesky":
            value = value.reshape(b.shape)
        params[b.name] = value
    return params, logjac


def to_unconstrained(params, layout):
    """Exact inverse of :func:`to_constrained` for valid parameters."""
    out = np.empty(layout.total_dim)
    for b in layout.blocks:
        if b.name not in params:
            raise ValueError(f"block {b.name!r}: missing from parameters")
        out[b.offset:b.offset + b.dim] = _unconstrain_block(params[b.name], b.kind, b.name)
    return out


def block_vjp(x, kind, value_bar):
    """Pull a cotangent on the constrained value back to unconstrained x.

    Does not include the log-Jacobian gradient; see
    :func:`block_logjac_grad`.  For ``corr_cholesky`` use
    :func:`corr_cholesky_vjp` directly so both pieces share one pass.
    """
    x = np.asarray(x, dtype=float)
    if kind == "unconstrained":
        return np.asarray(value_bar, dtype=float).ravel().copy()
    if kind == "ordered_vector":
        vb = np.asarray(value_bar, dtype=float).ravel()
        suffix = np.cumsum(vb[::-1])[::-1]
        out = np.empty_like(x)
        out[0] = suffix[0]
        if x.size > 1:
            out[1:] = np.exp(x[1:]) * suffix[1:]
        return out
    if kind == "unit_interval":
        vb = np.asarray(value_bar, dtype=float).ravel()
        s = 1.0 / (1.0 + np.exp(-x))
        return vb * s * (1.0 - s)
    if kind == "positive":
        vb = np.asarray(value_bar, dtype=float).ravel()
        return vb * np.exp(x)
    raise ValueError(f"unknown or unsupported block kind {kind!r}")


def block_logjac_grad(x, kind):
    """Gradient of a block's log-Jacobian with respect to x."""
    x = np.asarray(x, dtype=float)
    if kind == "unconstrained":
        return np.zeros_like(x)
    if kind == "ordered_vector":
        g = np.ones_like(x)
        g[0] = 0.0
        return g
    if kind == "unit_interval":
        s = 1.0 / (1.0 + np.exp(-x))
        return 1.0 - 2.0 * s
    if kind == "positive":
        return np.ones_like(x)
    raise ValueError(f"unknown or unsupported block kind {kind!r}")
