"""Full-sort evaluation, popularity strata, and model diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Split
from .errors import ConfigError
from .scoring import ScoringModel
from .spectral import band_matrices, fuse
from .topk import full_sort_order

STRATA = ("head", "mid", "tail", "cold")
# cumulative fractions of the popularity-sorted item list
_STRATA_BOUNDS = (0.2, 0.5, 0.8)
EXPOSURE_K = 20


@dataclass
class MetricsReport:
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    strata_recall20: dict[str, float] = field(default_factory=dict)
    head_exposure: float | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_kv_text(self) -> str:
        lines = []
        for k in sorted(self.recall):
            lines.append(f"recall@{k}={self.recall[k]:.10g}")
        for k in sorted(self.ndcg):
            lines.append(f"ndcg@{k}={self.ndcg[k]:.10g}")
        for name in STRATA:
            if name in self.strata_recall20:
                lines.append(f"recall20_{name}={self.strata_recall20[name]:.10g}")
        if self.head_exposure is not None:
            lines.append(f"head_exposure={self.head_exposure:.10g}")
        for name in sorted(self.diagnostics):
            lines.append(f"{name}={self.diagnostics[name]:.10g}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        out: dict = {
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }
        if self.strata_recall20:
            out["strata_recall20"] = dict(self.strata_recall20)
        if self.head_exposure is not None:
            out["head_exposure"] = self.head_exposure
        if self.diagnostics:
            out["diagnostics"] = dict(self.diagnostics)
        return out


def write_report(report: MetricsReport, kv_path, json_path) -> None:
    Path(kv_path).write_text(report.to_kv_text(), encoding="utf-8")
    Path(json_path).write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def recall_at(ranked: np.ndarray, targets: set[int], k: int) -> float:
    """Fraction of targets present in the top-k of the ranking."""
    if not targets:
        raise ConfigError("recall needs a nonempty target set")
    hits = sum(1 for item in ranked[:k] if int(item) in targets)
    return hits / len(targets)


def ndcg_at(ranked: np.ndarray, targets: set[int], k: int) -> float:
    """Binary-relevance NDCG with the ideal prefix as normalizer."""
    if not targets:
        raise ConfigError("ndcg needs a nonempty target set")
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if int(item) in targets:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(targets)) + 1))
    return dcg / ideal


def _target_map(ds: Dataset, split: Split) -> dict[int, set[int]]:
    users, items = ds.split_pairs(split)
    targets: dict[int, set[int]] = {}
    for u, i in zip(users, items):
        targets.setdefault(int(u), set()).add(int(i))
    return targets


def _mask_for(ds: Dataset, u: int, split: Split, mask_valid_at_test: bool) -> np.ndarray:
    mask = np.zeros(ds.num_items, dtype=bool)
    mask[ds.train_history[u]] = True
    if split == Split.TEST and mask_valid_at_test:
        vu, vi = ds.split_pairs(Split.VALID)
        mask[vi[vu == u]] = True
    return mask


def full_sort_rank(
    model: ScoringModel,
    ds: Dataset,
    u: int,
    split: Split,
    mask_valid_at_test: bool = False,
) -> np.ndarray:
    """Descending calibrated ranking over all items with seen items masked."""
    scores = model.user_scores(u).scored.copy()
    scores[_mask_for(ds, u, split, mask_valid_at_test)] = -np.inf
    return full_sort_order(scores)


def evaluate(
    model: ScoringModel,
    split: Split,
    ks: tuple[int, ...] = (10, 20),
    mask_valid_at_test: bool = False,
) -> MetricsReport:
    """Mean Recall@k and NDCG@k over users with at least one target."""
    ds = model.ds
    targets = _target_map(ds, split)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    count = 0
    for u in sorted(targets):
        ranked = full_sort_rank(model, ds, u, split, mask_valid_at_test)
        for k in ks:
            recall_sums[k] += recall_at(ranked, targets[u], k)
            ndcg_sums[k] += ndcg_at(ranked, targets[u], k)
        count += 1
    if count == 0:
        raise ConfigError(f"no users with targets in split {split.name}")
    return MetricsReport(
        recall={k: recall_sums[k] / count for k in ks},
        ndcg={k: ndcg_sums[k] / count for k in ks},
    )


def stratify_items(ds: Dataset) -> np.ndarray:
    """Label items 0..3 (head/mid/tail/cold) by train-count quantile.

    Items sort by descending train interaction count with index
    tie-break; cumulative cuts fall at 20/50/80 percent.
    """
    counts = np.array([users.size for users in ds.train_item_users], dtype=np.int64)
    order = np.lexsort((np.arange(ds.num_items), -counts))
    labels = np.empty(ds.num_items, dtype=np.int8)
    n = ds.num_items
    cuts = [int(np.floor(f * n)) for f in _STRATA_BOUNDS]
    labels[order[: cuts[0]]] = 0
    labels[order[cuts[0]: cuts[1]]] = 1
    labels[order[cuts[1]: cuts[2]]] = 2
    labels[order[cuts[2]:]] = 3
    return labels


def stratified_report(
    model: ScoringModel,
    split: Split = Split.TEST,
    mask_valid_at_test: bool = False,
) -> MetricsReport:
    """Recall/NDCG plus per-stratum recall, exposure, and diagnostics."""
    ds = model.ds
    labels = stratify_items(ds)
    targets = _target_map(ds, split)
    ks = (10, 20)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    strata_sums = {name: 0.0 for name in STRATA}
    strata_counts = {name: 0 for name in STRATA}
    head_slots = 0
    total_users = 0
    corr_sum = 0.0
    corr_count = 0
    eta_sum = 0.0
    eta_count = 0
    for u in sorted(targets):
        snapshot = model.user_scores(u)
        scores = snapshot.scored.copy()
        scores[_mask_for(ds, u, split, mask_valid_at_test)] = -np.inf
        ranked = full_sort_order(scores)
        for k in ks:
            recall_sums[k] += recall_at(ranked, targets[u], k)
            ndcg_sums[k] += ndcg_at(ranked, targets[u], k)
        top20 = ranked[:EXPOSURE_K]
        head_slots += int((labels[top20] == 0).sum())
        total_users += 1
        for si, name in enumerate(STRATA):
            stratum_targets = {i for i in targets[u] if labels[i] == si}
            if stratum_targets:
                strata_sums[name] += recall_at(ranked, stratum_targets, EXPOSURE_K)
                strata_counts[name] += 1
        if snapshot.behavior is not None:
            corr = model.lambda_b * snapshot.behavior[snapshot.candidates]
            corr_sum += float(np.abs(corr).sum())
            corr_count += snapshot.candidates.size
        if snapshot.eta is not None:
            eta_sum += float(snapshot.eta[snapshot.candidates].sum())
            eta_count += snapshot.candidates.size
    if total_users == 0:
        raise ConfigError(f"no users with targets in split {split.name}")

    diagnostics = _band_norm_diagnostics(model)
    if corr_count:
        diagnostics["behavior_correction_abs_mean"] = corr_sum / corr_count
    if eta_count:
        diagnostics["pair_coefficient_mean"] = eta_sum / eta_count
    return MetricsReport(
        recall={k: recall_sums[k] / total_users for k in ks},
        ndcg={k: ndcg_sums[k] / total_users for k in ks},
        strata_recall20={
            name: (strata_sums[name] / strata_counts[name]) if strata_counts[name] else 0.0
            for name in STRATA
        },
        head_exposure=head_slots / (EXPOSURE_K * total_users),
        diagnostics=diagnostics,
    )


def _band_norm_diagnostics(model: ScoringModel) -> dict[str, float]:
    """Mean norms of the lowest/highest band item states and their cosine."""
    bands_h = band_matrices(model.z, model.bands)
    low = bands_h[0][model.ds.num_users:]
    high = bands_h[-1][model.ds.num_users:]
    low_norms = np.linalg.norm(low, axis=1)
    high_norms = np.linalg.norm(high, axis=1)
    out = {
        "low_item_norm_mean": float(low_norms.mean()),
        "high_item_norm_mean": float(high_norms.mean()),
    }
    valid = (low_norms > 0) & (high_norms > 0)
    if valid.any():
        cos = np.einsum("nd,nd->n", low[valid], high[valid])
        cos /= low_norms[valid] * high_norms[valid]
        out["low_high_item_cosine"] = float(cos.mean())
        out["low_high_item_cosine_degenerate"] = 0.0
    else:
        out["low_high_item_cosine"] = 0.0
        out["low_high_item_cosine_degenerate"] = 1.0
    return out


def band_diagnostics(
    model: ScoringModel,
    split: Split = Split.TEST,
) -> dict[str, float]:
    """Per-band cross-view item cosine and band-only ranking recall."""
    z = model.z
    if not {"v", "t"}.issubset(set(z.channels)):
        raise ConfigError("band diagnostics need both content channels")
    ds = model.ds
    bands = model.bands
    out: dict[str, float] = {}
    _, fcache = fuse(z, bands, model.params, want_cache=True)
    targets = _target_map(ds, split)
    for m in range(bands.num_bands):
        cross = _cross_view_cosine(z, bands, m)
        out[f"band{m + 1}_cross_view_cosine"] = cross
        e_band = fcache.omega[m] * fcache.alpha[:, m:m + 1] * fcache.band_h[m]
        recall_sum = 0.0
        for u in sorted(targets):
            scores = e_band[u] @ e_band[ds.num_users:].T
            scores[ds.train_history[u]] = -np.inf
            ranked = full_sort_order(scores)
            recall_sum += recall_at(ranked, targets[u], EXPOSURE_K)
        out[f"band{m + 1}_recall20"] = recall_sum / len(targets)
    return out


def _cross_view_cosine(z, bands, m: int) -> float:
    if bands.mode == "equal":
        v_slice = z.items("v") / bands.num_bands
        t_slice = z.items("t") / bands.num_bands
    else:
        bv = bands.bases["v"][m]
        bt = bands.bases["t"][m]
        v_slice = (z.items("v") @ bv) @ bv.T
        t_slice = (z.items("t") @ bt) @ bt.T
    v_norms = np.linalg.norm(v_slice, axis=1)
    t_norms = np.linalg.norm(t_slice, axis=1)
    valid = (v_norms > 0) & (t_norms > 0)
    if not valid.any():
        return 0.0
    cos = np.einsum("nd,nd->n", v_slice[valid], t_slice[valid])
    cos /= v_norms[valid] * t_norms[valid]
    return float(cos.mean())
