"""Assembled model state for inference and evaluation.

A ScoringModel caches the fused embeddings for a parameter snapshot and
exposes per-user score rows: the raw base scores, the candidate scope
(train history excluded, ranked by base score), and the calibrated row
where only candidate entries receive the behavior residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrator import calibrate_row, candidate_items, conservative_coeff
from .data import Dataset
from .encoder import ChannelEmbeddings, ModelParams, encode
from .graphs import GraphOps
from .spectral import BandSet, FusedEmbeddings, fit_bands, fuse


@dataclass(frozen=True)
class UserScores:
    """One user's scoring snapshot used by rankers and diagnostics."""

    base: np.ndarray              # (num_items,)
    scored: np.ndarray            # (num_items,) calibrated
    candidates: np.ndarray        # sorted candidate item indices
    behavior: np.ndarray | None   # residual row or None
    eta: np.ndarray | None        # conservative coefficients or None


@dataclass
class ScoringModel:
    params: ModelParams
    ds: Dataset
    bands: BandSet
    z: ChannelEmbeddings
    fused: FusedEmbeddings
    residual: object | None
    lambda_b: float
    k_c_eval: int
    scope: str
    coeff_mode: str

    @classmethod
    def build(
        cls,
        params: ModelParams,
        ds: Dataset,
        ops: GraphOps,
        bands: BandSet | None,
        residual,
        lambda_b: float,
        k_c_eval: int,
        scope: str = "candidate",
        coeff_mode: str = "fixed",
        num_layers: int = 2,
        band_mode: str = "svd",
        m_bands: int = 3,
        band_seed: int = 0,
    ) -> "ScoringModel":
        """Encode once and cache embeddings.

        When bands is None they are refit from the current embeddings,
        matching the epoch-boundary refresh used during training.
        """
        z = encode(params, ds, ops, layers=num_layers)
        if bands is None:
            bands = fit_bands(z, band_mode, m_bands, seed=band_seed)
        fused = fuse(z, bands, params)
        return cls(
            params=params,
            ds=ds,
            bands=bands,
            z=z,
            fused=fused,
            residual=residual,
            lambda_b=lambda_b,
            k_c_eval=k_c_eval,
            scope=scope,
            coeff_mode=coeff_mode,
        )

    def base_row(self, u: int) -> np.ndarray:
        return self.fused.vectors[u] @ self.fused.items.T

    def user_scores(self, u: int) -> UserScores:
        """Calibrated scores for every item.

        The candidate scope excludes the user's train history before
        ranking by base score. Entries outside the scope are returned
        bit-identical to the base scores.
        """
        base = self.base_row(u)
        exclude = np.zeros(self.ds.num_items, dtype=bool)
        exclude[self.ds.train_history[u]] = True
        cand = candidate_items(base, self.k_c_eval, exclude)
        if self.residual is None or self.lambda_b == 0.0:
            return UserScores(
                base=base, scored=base.copy(), candidates=cand, behavior=None, eta=None
            )
        b_row = self.residual.row(u)
        eta_row = None
        if self.coeff_mode == "conservative":
            eta_row = conservative_coeff(
                self.params, base, b_row, u, np.arange(self.ds.num_items)
            )
        eval_scope = "global" if self.scope == "global" else "candidate"
        scored = calibrate_row(base, cand, b_row, self.lambda_b, eval_scope, eta_row)
        return UserScores(base=base, scored=scored, candidates=cand, behavior=b_row, eta=eta_row)
