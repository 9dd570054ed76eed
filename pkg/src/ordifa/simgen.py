"""Synthetic ordinal factor data for the simulation studies.

Population structure: two correlated factors (correlation 0.23), simple
structure with unit loadings, unit factor and residual variances, and
per-item thresholds chosen to realize a named category-probability shape.
The sparse variant pushes an item's first threshold to -15, which empties
its first response category with probability essentially 1: the latent
response would need to fall 15 marginal SDs below the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .model_core import (DatasetMatrix, IdentificationRule, ItemSpec,
                         LatentStructure, ModelSpec, ThresholdVector)

SPARSE_FIRST_THRESHOLD = -15.0
_SHAPES = ("symmetric", "asymmetric", "sparse")
# exact C=4 asymmetric thresholds, implying category probabilities
# [0.05, 0.14, 0.24, 0.57] at the marginal latent SD of sqrt(2)
_ASYMMETRIC_C4 = (-2.32, -1.25, -0.25)


def condition_thresholds(shape, n_categories):
    """Threshold vector realizing a named category-probability shape.

    All shapes are stated on the marginal latent scale with variance 2
    (unit loading, unit factor variance, unit residual variance).
    symmetric: equal-probability cutpoints, symmetric around zero.
    asymmetric: monotone-increasing probabilities; C=4 uses the exact
    published pattern, other C interpolate the same standardized range.
    sparse: asymmetric with the first threshold at -15.
    """
    if n_categories < 2:
        raise ValueError("n_categories must be at least 2")
    if shape not in _SHAPES:
        raise ValueError(f"unknown threshold shape {shape!r}")
    C = int(n_categories)
    scale = np.sqrt(2.0)
    if shape == "symmetric":
        cum = np.arange(1, C) / C
        return ThresholdVector(scale * ndtri(cum))
    if C == 4:
        tau = np.array(_ASYMMETRIC_C4)
    else:
        z = np.linspace(ndtri(0.05), ndtri(0.43), C - 1)
        tau = scale * z
    if shape == "sparse":
        tau = tau.copy()
        tau[0] = SPARSE_FIRST_THRESHOLD
    return ThresholdVector(tau)


@dataclass(frozen=True)
class SimCondition:
    """One Monte Carlo cell: data shape, size, and sparseness pattern."""

    shape: str
    n_categories: int = 4
    n_rows: int = 150
    n_sparse_items: int = 0
    reference_indicator: str = "non-sparse"
    seed: int = 0
    n_factors: int = 2
    items_per_factor: int = 6
    name: str = ""

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown threshold shape {self.shape!r}")
        if self.reference_indicator not in ("sparse", "non-sparse"):
            raise ValueError("reference_indicator must be 'sparse' or 'non-sparse'")
        if self.n_sparse_items > self.n_items:
            raise ValueError("n_sparse_items exceeds the number of items")
        if self.shape == "sparse" and self.n_sparse_items < 1:
            raise ValueError("sparse shape requires n_sparse_items > 0")
        if self.shape != "sparse" and self.n_sparse_items > 0:
            raise ValueError("n_sparse_items > 0 requires the sparse shape")
        if self.reference_indicator == "sparse" and self.n_sparse_items < 1:
            raise ValueError("a sparse reference indicator requires sparse items")
        if not self.name:
            label = (f"{self.shape}-C{self.n_categories}-N{self.n_rows}"
                     f"-sp{self.n_sparse_items}-ref_{self.reference_indicator}")
            object.__setattr__(self, "name", label)

    @property
    def n_items(self):
        return self.n_factors * self.items_per_factor

    def sparse_flags(self):
        """Per-item sparse markers under this condition's placement rule.

        Sparse items sit at the tail of each factor's item block so the
        reference indicator (the first item of the block) keeps all its
        categories; flipping reference_indicator to 'sparse' moves one
        sparse item to the front of each block instead.
        """
        flags = np.zeros(self.n_items, dtype=bool)
        per = self.items_per_factor
        base, extra = divmod(self.n_sparse_items, self.n_factors)
        for k in range(self.n_factors):
            count = base + (1 if k < extra else 0)
            if count == 0:
                continue
            block = range(k * per, (k + 1) * per)
            if self.reference_indicator == "sparse":
                flags[block.start] = True
                tail = count - 1
            else:
                tail = count
            for j in range(tail):
                flags[block.stop - 1 - j] = True
        return flags


@dataclass(frozen=True)
class PopulationParams:
    """Generating values for one simulated dataset."""

    loadings: np.ndarray
    factor_cov: np.ndarray
    residual_var: np.ndarray
    thresholds: tuple
    sparse_items: tuple

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "factor_cov",
                           np.atleast_2d(np.asarray(self.factor_cov, dtype=float)))
        object.__setattr__(self, "residual_var",
                           np.atleast_1d(np.asarray(self.residual_var, dtype=float)))
        ths = tuple(t if isinstance(t, ThresholdVector) else ThresholdVector(t)
                    for t in self.thresholds)
        object.__setattr__(self, "thresholds", ths)
        sparse = tuple(bool(s) for s in self.sparse_items)
        if len(ths) != lam.shape[0] or len(sparse) != lam.shape[0]:
            raise ValueError("per-item fields must all have one entry per item")
        for i, (t, s) in enumerate(zip(ths, sparse)):
            if s and t.tau[0] != SPARSE_FIRST_THRESHOLD:
                raise ValueError(f"item {i + 1} marked sparse but its first "
                                 f"threshold is not {SPARSE_FIRST_THRESHOLD}")
        object.__setattr__(self, "sparse_items", sparse)

    @classmethod
    def from_condition(cls, cond):
        """Unit-loading simple structure with factor correlation 0.23."""
        I, K = cond.n_items, cond.n_factors
        lam = np.zeros((I, K))
        for i in range(I):
            lam[i, i // cond.items_per_factor] = 1.0
        phi = np.full((K, K), 0.23)
        np.fill_diagonal(phi, 1.0)
        flags = cond.sparse_flags()
        base = condition_thresholds(
            "asymmetric" if cond.shape == "sparse" else cond.shape,
            cond.n_categories)
        sparse_tau = (condition_thresholds("sparse", cond.n_categories)
                      if cond.shape == "sparse" else None)
        ths = tuple(sparse_tau if flags[i] else base for i in range(I))
        return cls(loadings=lam, factor_cov=phi, residual_var=np.ones(I),
                   thresholds=ths, sparse_items=tuple(flags))

    @property
    def n_items(self):
        return self.loadings.shape[0]

    @property
    def n_factors(self):
        return self.loadings.shape[1]

    @property
    def n_categories(self):
        return np.array([len(t) + 1 for t in self.thresholds], dtype=np.int64)

    def item_ids(self):
        return [f"item_{i + 1}" for i in range(self.n_items)]

    def model_spec(self, residual="fixed", residual_value=1.0):
        """ModelSpec matching this population's structure.

        The first item loading on each factor is its reference indicator;
        the studies fix residual variances, which pins each item's latent
        scale (free residuals would leave per-item scale undetermined with
        ordinal data).
        """
        ids = self.item_ids()
        seen = set()
        items = []
        for i in range(self.n_items):
            k = int(np.argmax(np.abs(self.loadings[i]) > 0))
            is_ref = k not in seen
            seen.add(k)
            items.append(ItemSpec(item_id=ids[i], factor_indices=(k,),
                                  n_categories=int(self.n_categories[i]),
                                  is_reference=is_ref))
        ident = IdentificationRule(residual=residual, residual_value=residual_value)
        return ModelSpec(n_factors=self.n_factors, items=tuple(items),
                         identification=ident)

    def structure(self):
        return LatentStructure(loadings=self.loadings, factor_cov=self.factor_cov,
                               residual_var=self.residual_var)

    def truth_values(self):
        """Reported-parameter name -> generating value, for coverage."""
        ids = self.item_ids()
        truth = {}
        for i, t in enumerate(self.thresholds):
            for c, v in enumerate(np.asarray(t)):
                truth[f"tau[{ids[i]},{c + 1}]"] = float(v)
        spec = self.model_spec()
        free, _ = spec.loading_masks()
        for i, k in np.argwhere(free):
            truth[f"lambda[{ids[i]},{k + 1}]"] = float(self.loadings[i, k])
        sd = np.sqrt(np.diag(self.factor_cov))
        for k in range(self.n_factors):
            truth[f"factor_sd[{k + 1}]"] = float(sd[k])
            truth[f"phi_var[{k + 1}]"] = float(self.factor_cov[k, k])
        R = self.factor_cov / np.outer(sd, sd)
        for i in range(1, self.n_factors):
            for j in range(i):
                truth[f"factor_corr[{i + 1},{j + 1}]"] = float(R[i, j])
                truth[f"phi_cov[{i + 1},{j + 1}]"] = float(self.factor_cov[i, j])
        return truth

    def empty_category_names(self):
        """Reported names of first thresholds belonging to sparse items."""
        ids = self.item_ids()
        return [f"tau[{ids[i]},1]" for i, s in enumerate(self.sparse_items) if s]

    def to_dict(self):
        return {
            "loadings": self.loadings.tolist(),
            "factor_cov": self.factor_cov.tolist(),
            "residual_var": self.residual_var.tolist(),
            "thresholds": [np.asarray(t).tolist() for t in self.thresholds],
            "sparse_items": list(self.sparse_items),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(loadings=np.asarray(d["loadings"], dtype=float),
                   factor_cov=np.asarray(d["factor_cov"], dtype=float),
                   residual_var=np.asarray(d["residual_var"], dtype=float),
                   thresholds=tuple(np.asarray(t, dtype=float) for t in d["thresholds"]),
                   sparse_items=tuple(bool(s) for s in d["sparse_items"]))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generate_dataset(params, n_rows, seed):
    """Simulate ordinal responses from the population model.

    eta ~ MVN(0, Phi), eps ~ MVN(0, diag(Theta)), y* = eta Lam' + eps, and
    the observed code counts the thresholds below y*.  Bit-reproducible
    for a given seed (or Generator).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    I, K = params.n_items, params.n_factors
    chol = np.linalg.cholesky(params.factor_cov)
    eta = rng.standard_normal((n_rows, K)) @ chol.T
    eps = rng.standard_normal((n_rows, I)) * np.sqrt(params.residual_var)
    ystar = eta @ params.loadings.T + eps
    codes = np.ones((n_rows, I), dtype=np.int64)
    for i, t in enumerate(params.thresholds):
        codes[:, i] += np.searchsorted(np.asarray(t), ystar[:, i], side="left")
    return DatasetMatrix.build(codes, params.n_categories)
