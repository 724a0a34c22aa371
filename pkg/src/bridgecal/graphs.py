"""Static graph construction: normalized bipartite, content kNN, item mix.

The bipartite graph is square over user nodes followed by item nodes and
carries symmetric 1/sqrt(deg_u * deg_i) weights over train edges only.
The content kNN graph is directed (row-wise top-k cosine neighbors), and
the mixed item graph is the row-normalized weighted union of the visual
and textual kNN graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import Dataset, FeatureMatrix
from .errors import ConfigError, DimensionError
from .sparse import SparseGraph
from .topk import top_k_indices

VISUAL_MIX_WEIGHT = 0.1
TEXT_MIX_WEIGHT = 0.9


def build_normalized_bipartite(ds: Dataset) -> SparseGraph:
    """Symmetric-normalized user-item adjacency over train interactions.

    The result is square of size num_users + num_items with the user
    block first. Zero-degree nodes keep empty rows.
    """
    num_users, num_items = ds.num_users, ds.num_items
    n = num_users + num_items
    deg_u = np.array([h.size for h in ds.train_history], dtype=np.float64)
    deg_i = np.array([h.size for h in ds.train_item_users], dtype=np.float64)
    inv_u = np.where(deg_u > 0, 1.0 / np.sqrt(np.maximum(deg_u, 1.0)), 0.0)
    inv_i = np.where(deg_i > 0, 1.0 / np.sqrt(np.maximum(deg_i, 1.0)), 0.0)

    def rows():
        for u in range(num_users):
            cols = ds.train_history[u] + num_users
            vals = inv_u[u] * inv_i[ds.train_history[u]]
            yield cols, vals
        for i in range(num_items):
            cols = ds.train_item_users[i]
            vals = inv_i[i] * inv_u[ds.train_item_users[i]]
            yield cols, vals

    return SparseGraph.from_rows(n, n, rows())


def build_content_knn(feat: FeatureMatrix, k: int, chunk: int = 512) -> SparseGraph:
    """Directed top-k cosine neighbor graph over item feature rows.

    Ties break toward the smaller item index; zero and negative
    similarities are never stored, so rows may hold fewer than k edges.
    """
    if k < 1:
        raise ConfigError(f"knn k must be >= 1, got {k}")
    n = feat.rows
    if n < k + 1:
        raise ConfigError(f"knn needs at least k+1={k + 1} rows, got {n}")
    x = feat.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    xn = x / safe[:, None]
    xn[norms == 0] = 0.0

    row_cols: list[np.ndarray] = []
    row_vals: list[np.ndarray] = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sims = xn[start:stop] @ xn.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        for r in range(stop - start):
            top = top_k_indices(sims[r], k)
            vals = sims[r][top]
            keep = vals > 0.0
            cols = top[keep]
            order = np.argsort(cols)
            row_cols.append(cols[order])
            row_vals.append(vals[keep][order])

    return SparseGraph.from_rows(n, n, zip(row_cols, row_vals))


def build_multimodal_item_graph(
    av: SparseGraph,
    at: SparseGraph,
    visual_weight: float = VISUAL_MIX_WEIGHT,
    text_weight: float = TEXT_MIX_WEIGHT,
) -> SparseGraph:
    """Row-normalized weighted union of the two content kNN graphs.

    Rows whose mixed weights sum to zero stay empty. Ablations that drop
    one modality pass an empty graph for it, which reduces the result to
    the row-normalized remaining graph.
    """
    if (av.rows, av.cols) != (at.rows, at.cols):
        raise DimensionError(
            f"item graph shapes differ: {(av.rows, av.cols)} vs {(at.rows, at.cols)}"
        )
    mixed = visual_weight * av.to_scipy() + text_weight * at.to_scipy()
    mixed = sp.csr_matrix(mixed)
    mixed.sum_duplicates()
    mixed.sort_indices()
    row_sums = np.asarray(mixed.sum(axis=1)).ravel()
    scale = np.where(row_sums > 0, 1.0 / np.where(row_sums > 0, row_sums, 1.0), 0.0)
    normalized = sp.diags(scale) @ mixed
    return SparseGraph.from_scipy(normalized)


@dataclass(frozen=True)
class GraphBundle:
    """The static graphs consumed by the encoder."""

    bipartite: SparseGraph
    item_graph: SparseGraph | None


class GraphOps:
    """scipy operators derived from a GraphBundle, built once per run."""

    def __init__(self, bundle: GraphBundle):
        self.bundle = bundle
        self.adj = bundle.bipartite.to_scipy()
        if bundle.item_graph is not None:
            self.item = bundle.item_graph.to_scipy()
            self.item_t = self.item.T.tocsr()
            # rows with no neighbors pass through the smoothing unchanged,
            # so the effective operator is item + diag(empty row mask)
            self.item_empty = np.diff(self.item.indptr) == 0
        else:
            self.item = None
            self.item_t = None
            self.item_empty = None

    @classmethod
    def ensure(cls, graphs) -> "GraphOps":
        if isinstance(graphs, GraphOps):
            return graphs
        return cls(graphs)
