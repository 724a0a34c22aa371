"""Candidate-scoped residual calibration.

The residual may only touch a per-user shortlist of items ranked by the
base score. The train-time shortlist is computed from detached
embeddings and does not exclude train items (it is a scope mask only);
the inference shortlist excludes the user's train history first. Scores
outside the shortlist are returned bit-identical to the base score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset
from .encoder import ModelParams
from .errors import ConfigError
from .spectral import FusedEmbeddings
from .topk import top_k_indices


@dataclass(frozen=True)
class CandidateSet:
    """Sorted candidate item indices for one user."""

    user: int
    items: np.ndarray  # sorted ascending, distinct
    source: str        # "train" or "inference"

    def contains(self, item: int) -> bool:
        pos = int(np.searchsorted(self.items, item))
        return pos < self.items.size and self.items[pos] == item

    def member_mask(self, items: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.items, items)
        pos_clipped = np.minimum(pos, max(self.items.size - 1, 0))
        if self.items.size == 0:
            return np.zeros(items.shape, dtype=bool)
        return self.items[pos_clipped] == items


def candidate_items(
    base_scores: np.ndarray,
    k_c: int,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """Top-k_c item indices by base score, ties to the smaller index.

    `exclude` marks items removed before ranking (inference masks the
    user's train history). Returns sorted ascending indices.
    """
    if k_c < 1:
        raise ConfigError(f"candidate size must be >= 1, got {k_c}")
    if exclude is not None and exclude.any():
        scores = base_scores.copy()
        scores[exclude] = -np.inf
        top = top_k_indices(scores, min(k_c, int((~exclude).sum())))
        top = top[np.isfinite(scores[top])]
    else:
        top = top_k_indices(base_scores, min(k_c, base_scores.shape[0]))
    return np.sort(top)


def candidate_set(
    e: FusedEmbeddings,
    u: int,
    k_c: int,
    exclude_train: bool,
    ds: Dataset,
) -> CandidateSet:
    """Per-user candidate scope from fused embeddings."""
    base = e.vectors[u] @ e.items.T
    exclude = None
    if exclude_train:
        exclude = np.zeros(ds.num_items, dtype=bool)
        exclude[ds.train_history[u]] = True
    items = candidate_items(base, k_c, exclude)
    return CandidateSet(user=u, items=items, source="inference" if exclude_train else "train")


def train_score(s_base, in_scope, b, lambda_b):
    """Base score plus the masked signed residual, train form."""
    return s_base + np.where(in_scope, lambda_b * b, 0.0)


def inference_score(s_base, in_scope, b, lambda_b):
    """Identical arithmetic to the train form; the scope differs upstream."""
    return s_base + np.where(in_scope, lambda_b * b, 0.0)


def global_correction_score(s_base, b, lambda_b):
    """Residual applied everywhere, the no-scope control."""
    return s_base + lambda_b * b


def conservative_coeff(
    params: ModelParams,
    s_base,
    b,
    u,
    i,
):
    """Bounded per-pair multiplier in (0, 1); never flips the residual sign."""
    if params.coeff is None:
        raise ConfigError("conservative coefficient requested but coeff params absent")
    c = params.coeff
    pre = (
        c.user_bias.astype(np.float64)[u]
        + c.item_bias.astype(np.float64)[i]
        + float(c.score_coef) * np.tanh(s_base)
        + float(c.behavior_coef) * np.tanh(b)
    )
    return expit(pre)


def calibrate_row(
    base_row: np.ndarray,
    cand: np.ndarray,
    b_row: np.ndarray | None,
    lambda_b: float,
    scope: str = "candidate",
    eta_row: np.ndarray | None = None,
) -> np.ndarray:
    """Apply the residual to one user's full score row.

    Only candidate entries are touched (all entries for the global
    control), so out-of-scope scores stay bit-identical to the base row.
    """
    scores = base_row.copy()
    if b_row is None or lambda_b == 0.0:
        return scores
    residual = lambda_b * b_row
    if eta_row is not None:
        residual = residual * eta_row
    if scope == "global":
        scores += residual
    else:
        scores[cand] += residual[cand]
    return scores
