"""Co-user behavior evidence and the alternative residual controls.

The behavior graph weights item pairs by normalized co-user overlap
|U_i n U_j| / sqrt(|U_i| |U_j|), built strictly from train interactions,
with each row pruned to its top neighbors. Per-pair evidence sums the
candidate item's pruned row over the user's train history with
square-root history normalization, then z-scores each user's full item
row so the residual carries sign.

Two controls share the scoring interface: an unnormalized co-occurrence
count (min-max scaled per user) and a closed-form ridge item regression
with zeroed diagonal (z-scored like the main path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import ConfigError
from .sparse import SparseGraph
from .topk import top_k_indices

DEFAULT_EPSILON = 1e-6
EASE_ITEM_LIMIT = 20_000
# normalized rows are cached densely below this user*item volume and
# streamed on demand above it; both paths produce identical scores
DENSE_CACHE_LIMIT = 1 << 24


def _train_incidence(ds: Dataset) -> sp.csr_matrix:
    rows, cols = [], []
    for u, hist in enumerate(ds.train_history):
        rows.extend([u] * hist.size)
        cols.extend(hist.tolist())
    data = np.ones(len(rows), dtype=np.float64)
    return sp.csr_matrix(
        (data, (rows, cols)), shape=(ds.num_users, ds.num_items)
    )


def build_behavior_graph(ds: Dataset, k_b: int) -> SparseGraph:
    """Directed top-k_b co-user similarity graph over items.

    Self edges are excluded; ties at the boundary keep the smaller item
    index. Items with no train users get empty rows.
    """
    if k_b < 1:
        raise ConfigError(f"behavior top-k must be >= 1, got {k_b}")
    x = _train_incidence(ds)
    cooc = (x.T @ x).tocsr()
    cooc.setdiag(0.0)
    cooc.eliminate_zeros()
    deg = np.array([h.size for h in ds.train_item_users], dtype=np.float64)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
    scaled = sp.diags(inv_sqrt) @ cooc @ sp.diags(inv_sqrt)
    scaled = scaled.tocsr()
    scaled.sort_indices()

    def rows():
        for i in range(ds.num_items):
            lo, hi = scaled.indptr[i], scaled.indptr[i + 1]
            cols = scaled.indices[lo:hi]
            vals = scaled.data[lo:hi]
            if cols.size > k_b:
                keep = top_k_indices(vals, k_b)
                cols, vals = cols[keep], vals[keep]
                order = np.argsort(cols)
                cols, vals = cols[order], vals[order]
            yield cols, vals

    return SparseGraph.from_rows(ds.num_items, ds.num_items, rows())


@dataclass
class BehaviorModel:
    """Pruned behavior graph plus cached per-user normalization stats."""

    graph: SparseGraph
    k_b: int
    mu: np.ndarray      # (num_users,)
    sigma: np.ndarray   # (num_users,) population std of the raw row
    epsilon: float

    @classmethod
    def build(
        cls,
        ds: Dataset,
        k_b: int,
        epsilon: float = DEFAULT_EPSILON,
        graph: SparseGraph | None = None,
    ) -> "BehaviorModel":
        if graph is None:
            graph = build_behavior_graph(ds, k_b)
        model = cls(
            graph=graph,
            k_b=k_b,
            mu=np.zeros(ds.num_users),
            sigma=np.zeros(ds.num_users),
            epsilon=epsilon,
        )
        model._attach(ds)
        dense = None
        if ds.num_users * ds.num_items <= DENSE_CACHE_LIMIT:
            dense = np.empty((ds.num_users, ds.num_items))
        for u in range(ds.num_users):
            raw = model.raw_row(u)
            model.mu[u] = raw.mean()
            model.sigma[u] = raw.std()
            if dense is not None:
                dense[u] = (raw - model.mu[u]) / (model.sigma[u] + epsilon)
        model._dense = dense
        return model

    def _attach(self, ds: Dataset) -> None:
        self._ds = ds
        self._dense = None
        # evidence reads the candidate item's pruned row, so the sum over
        # a history is a column gather: precompute the transpose once
        self._graph_t = self.graph.to_scipy().T.tocsr()

    def raw_row(self, u: int) -> np.ndarray:
        """Sum-sqrt aggregated evidence for every item, before z-scoring."""
        hist = self._ds.train_history[u]
        if hist.size == 0:
            return np.zeros(self._ds.num_items)
        row = np.asarray(self._graph_t[hist].sum(axis=0)).ravel()
        return row / np.sqrt(hist.size)

    def raw_evidence(self, u: int, i: int) -> float:
        """Single-pair evidence via direct row lookup (no full-row pass)."""
        hist = self._ds.train_history[u]
        if hist.size == 0:
            return 0.0
        cols, vals = self.graph.row(i)
        if cols.size == 0:
            return 0.0
        pos = np.searchsorted(hist, cols)
        hit = (pos < hist.size) & (hist[np.minimum(pos, hist.size - 1)] == cols)
        return float(vals[hit].astype(np.float64).sum() / np.sqrt(hist.size))

    def row(self, u: int) -> np.ndarray:
        """Z-scored behavior row; constant rows map to zeros.

        Callers must not mutate the returned array.
        """
        if self._dense is not None:
            return self._dense[u]
        raw = self.raw_row(u)
        return (raw - self.mu[u]) / (self.sigma[u] + self.epsilon)

    def score(self, u: int, items: np.ndarray) -> np.ndarray:
        return self.row(u)[items]


def normalize_user_row(bm: BehaviorModel, ds: Dataset, u: int) -> np.ndarray:
    """Functional alias for the z-scored per-user behavior row."""
    del ds  # stats are cached on the model at build time
    return bm.row(u)


def raw_evidence(bm: BehaviorModel, ds: Dataset, u: int, i: int) -> float:
    del ds
    return bm.raw_evidence(u, i)


@dataclass
class RawCoocResidual:
    """Unnormalized shared-user counts, min-max scaled per user row."""

    incidence: sp.csr_matrix

    @classmethod
    def build(cls, ds: Dataset) -> "RawCoocResidual":
        model = cls(incidence=_train_incidence(ds))
        model._ds = ds
        model._cache = {}
        return model

    def raw_row(self, u: int) -> np.ndarray:
        hist = self._ds.train_history[u]
        if hist.size == 0:
            return np.zeros(self._ds.num_items)
        indicator = np.zeros(self._ds.num_items)
        indicator[hist] = 1.0
        per_user = self.incidence @ indicator           # co-history sizes
        return np.asarray(self.incidence.T @ per_user).ravel()

    def row(self, u: int) -> np.ndarray:
        cached = self._cache.get(u)
        if cached is not None:
            return cached
        raw = self.raw_row(u)
        lo, hi = raw.min(), raw.max()
        if hi <= lo:
            out = np.zeros_like(raw)
        else:
            out = (raw - lo) / (hi - lo)
        if self._ds.num_users * self._ds.num_items <= DENSE_CACHE_LIMIT:
            self._cache[u] = out
        return out

    def score(self, u: int, items: np.ndarray) -> np.ndarray:
        return self.row(u)[items]


def ease_weights(ds: Dataset, l2: float) -> np.ndarray:
    """Closed-form item-item regression weights with zeroed diagonal."""
    if ds.num_items > EASE_ITEM_LIMIT:
        raise ConfigError(
            f"item count {ds.num_items} exceeds the dense-solve guard "
            f"({EASE_ITEM_LIMIT}); use the raw co-occurrence control instead"
        )
    x = _train_incidence(ds)
    gram = (x.T @ x).toarray()
    gram[np.diag_indices_from(gram)] += l2
    p = np.linalg.inv(gram)
    w = -p / np.diag(p)[None, :]
    np.fill_diagonal(w, 0.0)
    return w


@dataclass
class EaseResidual:
    """Ridge-regression residual, z-scored per user like the main path."""

    weights: np.ndarray
    epsilon: float

    @classmethod
    def build(cls, ds: Dataset, l2: float = 100.0, epsilon: float = DEFAULT_EPSILON) -> "EaseResidual":
        model = cls(weights=ease_weights(ds, l2), epsilon=epsilon)
        model._ds = ds
        model._cache = {}
        return model

    def raw_row(self, u: int) -> np.ndarray:
        hist = self._ds.train_history[u]
        if hist.size == 0:
            return np.zeros(self._ds.num_items)
        return self.weights[hist].sum(axis=0)

    def row(self, u: int) -> np.ndarray:
        cached = self._cache.get(u)
        if cached is not None:
            return cached
        raw = self.raw_row(u)
        mu = raw.mean()
        sigma = raw.std()
        out = (raw - mu) / (sigma + self.epsilon)
        if self._ds.num_users * self._ds.num_items <= DENSE_CACHE_LIMIT:
            self._cache[u] = out
        return out

    def score(self, u: int, items: np.ndarray) -> np.ndarray:
        return self.row(u)[items]


def raw_cooc_residual(ds: Dataset, u: int, i: int) -> float:
    """Single-pair raw co-occurrence score after per-user scaling."""
    return float(RawCoocResidual.build(ds).row(u)[i])


def make_residual(variant: str, ds: Dataset, k_b: int, ease_l2: float = 100.0,
                  epsilon: float = DEFAULT_EPSILON):
    """Residual scorer factory; returns None for the no-behavior variant."""
    if variant == "ben":
        return BehaviorModel.build(ds, k_b=k_b, epsilon=epsilon)
    if variant == "raw_cooc":
        return RawCoocResidual.build(ds)
    if variant == "ease":
        return EaseResidual.build(ds, l2=ease_l2, epsilon=epsilon)
    if variant == "none":
        return None
    raise ConfigError(f"unknown behavior variant {variant!r}")
