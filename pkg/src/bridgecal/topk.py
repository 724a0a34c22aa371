"""Deterministic top-k selection and full-sort ordering.

All ranking in the package shares one tie rule: equal scores are broken
by the smaller index. Scores are assumed finite unless explicitly masked
with -inf, which sorts last.
"""

import numpy as np


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ordered by (score desc, index asc).

    Returns all indices in that order when k >= len(scores).
    """
    n = scores.shape[0]
    if k >= n:
        return full_sort_order(scores)
    # argpartition alone picks an arbitrary subset among boundary ties,
    # so ties at the k-th value are resolved by smallest index explicitly.
    part = np.argpartition(-scores, k - 1)[:k]
    kth = scores[part].min()
    above = np.flatnonzero(scores > kth)
    need = k - above.size
    at_kth = np.flatnonzero(scores == kth)[:need]
    idx = np.concatenate([above, at_kth])
    order = np.lexsort((idx, -scores[idx]))
    return idx[order]


def full_sort_order(scores: np.ndarray) -> np.ndarray:
    """All indices ordered by (score desc, index asc)."""
    n = scores.shape[0]
    return np.lexsort((np.arange(n), -scores))
