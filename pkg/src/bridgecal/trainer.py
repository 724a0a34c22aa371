"""Pairwise ranking trainer with manual reverse-mode gradients.

Every step runs a full-graph forward pass (channel inputs, bipartite
propagation, item smoothing, frozen-basis band fusion), scores the
sampled triples, and backpropagates the five-term objective by hand:

* ranking loss on calibrated scores and an auxiliary ranking loss on
  base scores (both numerically stable softplus forms),
* a gate-expansion penalty on the band amplifications,
* a band-geometry regularizer (cross-band decorrelation plus an
  in-batch contrastive term on the higher-frequency bands),
* an optional mean-coefficient constraint in conservative mode.

Candidate membership and behavior values are recomputed per batch from
the current embeddings but treated as constants by the backward pass;
band bases are refit from detached embeddings at epoch boundaries.
Parameters are float32 storage with float64 update arithmetic, so runs
are bit-reproducible and checkpoints reload exactly.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .calibrator import candidate_items
from .data import Dataset, Split
from .encoder import (
    CHANNEL_ORDER,
    AdamState,
    CoeffParams,
    ModelParams,
    encode,
    init_params,
    propagate_layer_sum,
)
from .errors import ConfigError, FormatError, NumericError
from .graphs import GraphOps
from .spectral import BandSet, FuseCache, fit_bands, fuse

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BRCK"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_NEGATIVE_ROUNDS = 100


@dataclass
class TrainConfig:
    """Trainer hyperparameters; defaults are the full-scale reference setting."""

    lr: float = 1e-4
    l2_reg: float = 1e-3
    lambda_base: float = 0.2
    lambda_ib: float = 1.0
    lambda_freq: float = 0.001
    lambda_eta: float = 0.0
    tau_eta: float = 0.5
    alpha_ib: float = 1.0
    mu_ib: float = 1.0
    phi_plus: float = 0.2
    tau_disc: float = 0.2
    norm_eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 2048
    seed: int = 2020
    m_bands: int = 3
    band_mode: str = "svd"
    k_c_train: int = 200
    k_c_eval: int = 200
    lambda_b: float = 0.4
    scope: str = "candidate"   # candidate | global | none (no train-time mask)
    coeff: str = "fixed"       # fixed | conservative
    embed_dim: int = 64
    num_layers: int = 2
    channels: tuple[str, ...] = CHANNEL_ORDER


@dataclass
class TripleBatch:
    """Sampled (user, positive, negative) triples plus detached context."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    pos_in_scope: np.ndarray | None = None
    neg_in_scope: np.ndarray | None = None
    pos_b: np.ndarray | None = None
    neg_b: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.users.shape[0])


def sample_batch(
    ds: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    history_sets: list[set[int]] | None = None,
) -> TripleBatch:
    """Uniform positives over train interactions, rejection-sampled negatives.

    A position whose user has interacted with every item is dropped after
    MAX_NEGATIVE_ROUNDS redraws (logged once).
    """
    if history_sets is None:
        history_sets = [set(h.tolist()) for h in ds.train_history]
    train_u, train_i = ds.split_pairs(Split.TRAIN)
    n_train = train_u.shape[0]
    idx = rng.integers(0, n_train, size=batch_size)
    users = train_u[idx].astype(np.int64)
    pos = train_i[idx].astype(np.int64)
    neg = rng.integers(0, ds.num_items, size=batch_size).astype(np.int64)
    bad = np.fromiter(
        (int(neg[t]) in history_sets[int(users[t])] for t in range(batch_size)),
        dtype=bool,
        count=batch_size,
    )
    rounds = 0
    while bad.any() and rounds < MAX_NEGATIVE_ROUNDS:
        redraw = np.flatnonzero(bad)
        neg[redraw] = rng.integers(0, ds.num_items, size=redraw.size)
        for t in redraw:
            bad[t] = int(neg[t]) in history_sets[int(users[t])]
        rounds += 1
    if bad.any():
        logger.warning(
            "dropped %d triples whose users have exhausted the item set",
            int(bad.sum()),
        )
        keep = ~bad
        users, pos, neg = users[keep], pos[keep], neg[keep]
    return TripleBatch(users=users, pos=pos, neg=neg)


# ---------------------------------------------------------------------------
# forward cache and detached batch context
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Everything the manual backward pass needs from one forward run."""

    z: dict[str, np.ndarray]   # channel -> (n, dim)
    fuse: FuseCache
    e: np.ndarray              # (n, fused_dim)


def forward_full(
    params: ModelParams,
    bands: BandSet,
    ops: GraphOps,
    ds: Dataset,
    cfg: TrainConfig,
) -> ForwardCache:
    z = encode(params, ds, ops, layers=cfg.num_layers)
    fused, cache = fuse(z, bands, params, want_cache=True)
    return ForwardCache(z=z.stacked, fuse=cache, e=fused.vectors)


def make_context(
    e: np.ndarray,
    batch: TripleBatch,
    ds: Dataset,
    residual,
    cfg: TrainConfig,
) -> TripleBatch:
    """Fill detached scope flags and behavior values onto the batch.

    The train-time scope never excludes train items. The global and
    no-mask variants score every sampled pair as in scope.
    """
    b = batch.size
    pos_scope = np.zeros(b, dtype=bool)
    neg_scope = np.zeros(b, dtype=bool)
    pos_b = np.zeros(b, dtype=np.float64)
    neg_b = np.zeros(b, dtype=np.float64)
    if residual is not None and cfg.lambda_b != 0.0:
        uniq = np.unique(batch.users)
        member = np.zeros(ds.num_items, dtype=bool)
        if cfg.scope == "candidate":
            base_all = e[uniq] @ e[ds.num_users:].T
        for k, u in enumerate(uniq):
            sel = batch.users == u
            if cfg.scope == "candidate":
                cand = candidate_items(base_all[k], cfg.k_c_train)
                member[cand] = True
                pos_scope[sel] = member[batch.pos[sel]]
                neg_scope[sel] = member[batch.neg[sel]]
                member[cand] = False
            else:
                pos_scope[sel] = True
                neg_scope[sel] = True
            row = residual.row(int(u))
            pos_b[sel] = row[batch.pos[sel]]
            neg_b[sel] = row[batch.neg[sel]]
    return replace(
        batch,
        pos_in_scope=pos_scope,
        neg_in_scope=neg_scope,
        pos_b=pos_b,
        neg_b=neg_b,
    )


# ---------------------------------------------------------------------------
# loss parts (shared by the training path and the contract tests)
# ---------------------------------------------------------------------------


def loss_rank(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mean pairwise softplus ranking loss, stable for large |delta|."""
    delta = pos_scores - neg_scores
    return float(np.mean(np.logaddexp(0.0, -delta)))


def loss_base(pos_base: np.ndarray, neg_base: np.ndarray) -> float:
    return loss_rank(pos_base, neg_base)


def loss_ib(alpha: np.ndarray, cfg: TrainConfig) -> float:
    """Gate-expansion penalty over per-node band amplifications."""
    delta = np.maximum(alpha - 1.0, 0.0)
    nrm = np.linalg.norm(delta, axis=1)
    hinge = np.maximum(delta - cfg.phi_plus, 0.0).sum(axis=1)
    return float(np.mean(cfg.alpha_ib * nrm**2 + cfg.mu_ib * nrm * hinge))


def _normalize_bands(h: np.ndarray, eps: float):
    norms = np.linalg.norm(h, axis=-1)
    scale = norms + eps
    return h / scale[..., None], norms, scale


def loss_freq(
    hu: np.ndarray,
    hi: np.ndarray,
    cfg: TrainConfig,
) -> tuple[float, float]:
    """(decorrelation, discrimination) on (batch, band, dim) slices."""
    b, m = hu.shape[0], hu.shape[1]
    if m < 2 or b == 0:
        return 0.0, 0.0
    hun, _, _ = _normalize_bands(hu, cfg.norm_eps)
    hin, _, _ = _normalize_bands(hi, cfg.norm_eps)
    cu = np.einsum("bmd,bld->bml", hun, hun)
    ci = np.einsum("bmd,bld->bml", hin, hin)
    eye = np.eye(m, dtype=bool)
    cu[:, eye] = 0.0
    ci[:, eye] = 0.0
    dec = float((cu**2 + ci**2).sum() / (b * m * (m - 1)))
    disc_sum = 0.0
    for band in range(1, m):
        scores = (hun[:, band, :] @ hin[:, band, :].T) / cfg.tau_disc
        lse = logsumexp(scores, axis=1)
        disc_sum += float((lse - np.diag(scores)).sum())
    disc = disc_sum / (b * (m - 1))
    return dec, disc


def loss_eta(etas: np.ndarray, tau_eta: float) -> float:
    return float((etas.mean() - tau_eta) ** 2)


def total_loss(parts: dict[str, float], cfg: TrainConfig) -> float:
    """Weighted sum of the loss parts plus the touched-row penalty."""
    return (
        parts["rank"]
        + cfg.lambda_base * parts["base"]
        + cfg.lambda_ib * parts["ib"]
        + cfg.lambda_freq * parts["freq"]
        + cfg.lambda_eta * parts["eta"]
        + parts["reg"]
    )


# ---------------------------------------------------------------------------
# loss + manual backward
# ---------------------------------------------------------------------------


def loss_and_grads(
    params: ModelParams,
    cache: ForwardCache,
    batch: TripleBatch,
    bands: BandSet,
    ops: GraphOps,
    ds: Dataset,
    cfg: TrainConfig,
    want_grads: bool = True,
):
    """Evaluate the objective on one batch; optionally return exact grads.

    The batch must carry its detached context (scope flags and behavior
    values); those are constants to the backward pass, as is the top-k
    membership they encode.
    """
    if batch.pos_in_scope is None:
        raise ConfigError("batch context missing; call make_context first")
    num_users = ds.num_users
    e = cache.e
    fcache = cache.fuse
    m_bands = bands.num_bands
    bsz = batch.size
    conservative = cfg.coeff == "conservative"
    if conservative and params.coeff is None:
        raise ConfigError("conservative mode requires coeff params")
    if bsz == 0:
        parts = {k: 0.0 for k in ("rank", "base", "ib", "freq", "eta", "reg")}
        grads = None
        if want_grads:
            grads = {n: np.zeros(t.shape, dtype=np.float64) for n, t in params.named_tensors()}
        return 0.0, parts, grads

    un = batch.users
    pn = num_users + batch.pos
    nn = num_users + batch.neg

    s_pos_base = np.einsum("bd,bd->b", e[un], e[pn])
    s_neg_base = np.einsum("bd,bd->b", e[un], e[nn])
    fpos = batch.pos_in_scope.astype(np.float64)
    fneg = batch.neg_in_scope.astype(np.float64)

    if conservative:
        c = params.coeff
        t_sp = np.tanh(s_pos_base)
        t_sn = np.tanh(s_neg_base)
        t_bp = np.tanh(batch.pos_b)
        t_bn = np.tanh(batch.neg_b)
        a_s = float(c.score_coef)
        a_b = float(c.behavior_coef)
        bu = c.user_bias.astype(np.float64)[batch.users]
        w_pos = bu + c.item_bias.astype(np.float64)[batch.pos] + a_s * t_sp + a_b * t_bp
        w_neg = bu + c.item_bias.astype(np.float64)[batch.neg] + a_s * t_sn + a_b * t_bn
        eta_pos = expit(w_pos)
        eta_neg = expit(w_neg)
        sp_coef = fpos * cfg.lambda_b * batch.pos_b
        sn_coef = fneg * cfg.lambda_b * batch.neg_b
        s_pos = s_pos_base + sp_coef * eta_pos
        s_neg = s_neg_base + sn_coef * eta_neg
    else:
        s_pos = s_pos_base + fpos * cfg.lambda_b * batch.pos_b
        s_neg = s_neg_base + fneg * cfg.lambda_b * batch.neg_b

    parts: dict[str, float] = {}
    parts["rank"] = loss_rank(s_pos, s_neg)
    parts["base"] = loss_base(s_pos_base, s_neg_base)

    nodes = np.unique(np.concatenate([un, pn, nn]))
    alpha_nodes = fcache.alpha[nodes]
    parts["ib"] = loss_ib(alpha_nodes, cfg)

    hu = np.stack([fcache.band_h[m][un] for m in range(m_bands)], axis=1)
    hi = np.stack([fcache.band_h[m][pn] for m in range(m_bands)], axis=1)
    dec, disc = loss_freq(hu, hi, cfg)
    parts["freq"] = dec + disc

    if conservative:
        etas = np.concatenate([eta_pos, eta_neg])
        parts["eta"] = loss_eta(etas, cfg.tau_eta)
    else:
        # fixed-strength calibration defines no pair coefficient
        parts["eta"] = 0.0

    touched_sq = 0.0
    for c_name in params.channels:
        tbl = params.user_tables[c_name].astype(np.float64)
        touched_sq += float((tbl[batch.users] ** 2).sum())
    item_tbl = params.item_id_table.astype(np.float64)
    touched_sq += float((item_tbl[batch.pos] ** 2).sum())
    touched_sq += float((item_tbl[batch.neg] ** 2).sum())
    parts["reg"] = cfg.l2_reg * touched_sq / bsz

    total = total_loss(parts, cfg)
    if not want_grads:
        return total, parts, None

    # ---- backward ----
    n, fused_dim = e.shape
    grads = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.named_tensors()}
    d_e = np.zeros((n, fused_dim))
    d_alpha = np.zeros((n, m_bands))
    d_band = [np.zeros((n, fused_dim)) for _ in range(m_bands)]

    # ranking losses: d/d_delta of mean softplus(-delta) is -sigmoid(-delta)/B
    g_rank = -expit(-(s_pos - s_neg)) / bsz
    g_base = -expit(-(s_pos_base - s_neg_base)) * (cfg.lambda_base / bsz)
    ds_pos_base = g_rank + g_base
    ds_neg_base = -g_rank - g_base

    if conservative:
        d_eta_pos = g_rank * sp_coef
        d_eta_neg = -g_rank * sn_coef
        if cfg.lambda_eta != 0.0:
            d_eta_mean = cfg.lambda_eta * 2.0 * (etas.mean() - cfg.tau_eta) / etas.size
            d_eta_pos = d_eta_pos + d_eta_mean
            d_eta_neg = d_eta_neg + d_eta_mean
        dw_pos = d_eta_pos * eta_pos * (1.0 - eta_pos)
        dw_neg = d_eta_neg * eta_neg * (1.0 - eta_neg)
        np.add.at(grads["coeff.user_bias"], batch.users, dw_pos + dw_neg)
        np.add.at(grads["coeff.item_bias"], batch.pos, dw_pos)
        np.add.at(grads["coeff.item_bias"], batch.neg, dw_neg)
        grads["coeff.score_coef"] += (dw_pos * t_sp).sum() + (dw_neg * t_sn).sum()
        grads["coeff.behavior_coef"] += (dw_pos * t_bp).sum() + (dw_neg * t_bn).sum()
        ds_pos_base = ds_pos_base + dw_pos * a_s * (1.0 - t_sp**2)
        ds_neg_base = ds_neg_base + dw_neg * a_s * (1.0 - t_sn**2)

    np.add.at(d_e, un, ds_pos_base[:, None] * e[pn])
    np.add.at(d_e, pn, ds_pos_base[:, None] * e[un])
    np.add.at(d_e, un, ds_neg_base[:, None] * e[nn])
    np.add.at(d_e, nn, ds_neg_base[:, None] * e[un])

    # gate-expansion penalty
    if cfg.lambda_ib != 0.0:
        delta_ib = np.maximum(alpha_nodes - 1.0, 0.0)
        nrm = np.linalg.norm(delta_ib, axis=1)
        safe = np.where(nrm > 0, nrm, 1.0)
        hinge = np.maximum(delta_ib - cfg.phi_plus, 0.0)
        hinge_sum = hinge.sum(axis=1)
        d_delta = cfg.lambda_ib / nodes.size * (
            2.0 * cfg.alpha_ib * delta_ib
            + cfg.mu_ib
            * (
                (delta_ib / safe[:, None]) * hinge_sum[:, None]
                + nrm[:, None] * (delta_ib > cfg.phi_plus)
            )
        )
        d_alpha[nodes] += d_delta * (alpha_nodes > 1.0)

    # band-geometry regularizer
    if cfg.lambda_freq != 0.0 and m_bands > 1 and bsz > 0:
        hun, u_norms, u_scale = _normalize_bands(hu, cfg.norm_eps)
        hin, i_norms, i_scale = _normalize_bands(hi, cfg.norm_eps)
        cu = np.einsum("bmd,bld->bml", hun, hun)
        ci = np.einsum("bmd,bld->bml", hin, hin)
        eye = np.eye(m_bands, dtype=bool)
        cu[:, eye] = 0.0
        ci[:, eye] = 0.0
        sc_dec = cfg.lambda_freq / (bsz * m_bands * (m_bands - 1))
        d_hun = 4.0 * sc_dec * np.einsum("bml,bld->bmd", cu, hun)
        d_hin = 4.0 * sc_dec * np.einsum("bml,bld->bmd", ci, hin)
        sc_disc = cfg.lambda_freq / (bsz * (m_bands - 1))
        for band in range(1, m_bands):
            scores = (hun[:, band, :] @ hin[:, band, :].T) / cfg.tau_disc
            probs = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
            d_scores = sc_disc * (probs - np.eye(bsz))
            d_hun[:, band, :] += (d_scores @ hin[:, band, :]) / cfg.tau_disc
            d_hin[:, band, :] += (d_scores.T @ hun[:, band, :]) / cfg.tau_disc

        def denormalize(d_hat, h_raw, norms, scale):
            dot = np.einsum("bmd,bmd->bm", d_hat, h_raw)
            safe_n = np.where(norms > 0, norms, 1.0)
            correction = np.where(norms > 0, dot / (scale**2 * safe_n), 0.0)
            return d_hat / scale[..., None] - h_raw * correction[..., None]

        d_hu_raw = denormalize(d_hun, hu, u_norms, u_scale)
        d_hi_raw = denormalize(d_hin, hi, i_norms, i_scale)
        for band in range(m_bands):
            np.add.at(d_band[band], un, d_hu_raw[:, band, :])
            np.add.at(d_band[band], pn, d_hi_raw[:, band, :])

    # fused embedding -> bands, gates, band weights
    rows = nodes
    d_e_rows = d_e[rows]
    d_omega = np.zeros(m_bands)
    alpha_rows = fcache.alpha[rows]
    for band in range(m_bands):
        h_rows = fcache.band_h[band][rows]
        dot = np.einsum("kd,kd->k", d_e_rows, h_rows)
        d_band[band][rows] += fcache.omega[band] * alpha_rows[:, band:band + 1] * d_e_rows
        d_alpha[rows, band] += fcache.omega[band] * dot
        d_omega[band] = float((alpha_rows[:, band] * dot).sum())

    phi_rows = fcache.phi[rows]
    d_alpha_rows = d_alpha[rows]
    grads["gate_scale"] += (d_alpha_rows * phi_rows).sum()
    d_gate_pre = d_alpha_rows * float(params.gate_scale) * phi_rows * (1.0 - phi_rows)
    grads["gate_weight"] += fcache.zfull[rows].T @ d_gate_pre
    grads["gate_bias"] += d_gate_pre.sum(axis=0)
    d_zfull_rows = d_gate_pre @ params.gate_weight.astype(np.float64).T
    omega = fcache.omega
    grads["band_logits"] += d_omega * omega * (1.0 - omega)

    # band reconstructions and gate input -> channel embeddings
    dim = params.dim
    d_z = {c_name: np.zeros((n, dim)) for c_name in params.channels}
    for band in range(m_bands):
        d_rows = d_band[band][rows]
        for ci, c_name in enumerate(params.channels):
            blk = d_rows[:, ci * dim:(ci + 1) * dim]
            if bands.mode == "equal":
                d_z[c_name][rows] += blk / m_bands
            else:
                v = bands.bases[c_name][band]
                d_z[c_name][rows] += (blk @ v) @ v.T
    for ci, c_name in enumerate(params.channels):
        d_z[c_name][rows] += d_zfull_rows[:, ci * dim:(ci + 1) * dim]

    # graph backward: transpose of item smoothing, then the symmetric
    # layer-sum operator (identical form to the forward propagation)
    for c_name in params.channels:
        dz = d_z[c_name]
        if ops.item is not None:
            d_items = ops.item_t @ dz[num_users:]
            empty = ops.item_empty
            if empty.any():
                d_items[empty] += dz[num_users:][empty]
            dy = np.concatenate([dz[:num_users], d_items], axis=0)
        else:
            dy = dz
        dh0 = propagate_layer_sum(dy, ops.adj, cfg.num_layers)
        grads[f"user_table.{c_name}"] += dh0[:num_users]
        if c_name == "id":
            grads["item_id_table"] += dh0[num_users:]
        else:
            feats = ds.features[c_name].data.astype(np.float64)
            grads[f"proj_weight.{c_name}"] += feats.T @ dh0[num_users:]
            grads[f"proj_bias.{c_name}"] += dh0[num_users:].sum(axis=0)

    # touched-row shrinkage
    if cfg.l2_reg != 0.0:
        coef = 2.0 * cfg.l2_reg / bsz
        for c_name in params.channels:
            tbl = params.user_tables[c_name].astype(np.float64)
            np.add.at(grads[f"user_table.{c_name}"], batch.users, coef * tbl[batch.users])
        item_tbl64 = params.item_id_table.astype(np.float64)
        np.add.at(grads["item_id_table"], batch.pos, coef * item_tbl64[batch.pos])
        np.add.at(grads["item_id_table"], batch.neg, coef * item_tbl64[batch.neg])

    return total, parts, grads


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
    """Bias-corrected Adam update; float64 math, float32 storage."""
    state = params.adam
    if state is None:
        raise ConfigError("params carry no optimizer state")
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for name, tensor in params.named_tensors():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
        m = ADAM_BETA1 * state.first[name].astype(np.float64) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.second[name].astype(np.float64) + (1.0 - ADAM_BETA2) * g * g
        state.first[name][...] = m.astype(tensor.dtype)
        state.second[name][...] = v.astype(tensor.dtype)
        theta = tensor.astype(np.float64) - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        tensor[...] = theta.astype(tensor.dtype)


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    params: ModelParams
    best_epoch: int
    best_valid_recall20: float
    history: list[dict] = field(default_factory=list)


def fit(
    ds: Dataset,
    graphs,
    residual,
    cfg: TrainConfig,
    step_callback=None,
    epoch_callback=None,
) -> FitResult:
    """Train for cfg.epochs and keep the best validation-recall checkpoint.

    Band bases refresh from detached embeddings at every epoch boundary;
    the refreshed bases score that epoch's validation pass, so a saved
    checkpoint reproduces its recorded metric exactly when re-fit.
    """
    from .metrics import evaluate  # local import keeps module layering acyclic
    from .scoring import ScoringModel

    ops = GraphOps.ensure(graphs)
    params = init_params(
        ds,
        channels=cfg.channels,
        dim=cfg.embed_dim,
        num_bands=cfg.m_bands,
        conservative=cfg.coeff == "conservative",
        seed=cfg.seed,
    )
    rng = np.random.default_rng(cfg.seed)
    history_sets = [set(h.tolist()) for h in ds.train_history]
    n_train = int(np.sum(ds.splits == int(Split.TRAIN)))
    steps = max(1, math.ceil(n_train / cfg.batch_size))

    def refit_bands() -> BandSet:
        z = encode(params, ds, ops, layers=cfg.num_layers)
        return fit_bands(z, cfg.band_mode, cfg.m_bands, seed=cfg.seed)

    bands = refit_bands()
    history: list[dict] = []
    best_epoch = 0
    best_recall = -1.0
    best_params = params.copy()
    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in ("total", "rank", "base", "ib", "freq", "eta", "reg")}
        for step in range(steps):
            batch = sample_batch(ds, cfg.batch_size, rng, history_sets)
            cache = forward_full(params, bands, ops, ds, cfg)
            batch = make_context(cache.e, batch, ds, residual, cfg)
            loss, parts, grads = loss_and_grads(
                params, cache, batch, bands, ops, ds, cfg, want_grads=True
            )
            if step_callback is not None:
                step_callback(epoch, step, batch, params, loss, parts)
            adam_step(params, grads, cfg.lr)
            sums["total"] += loss
            for k in ("rank", "base", "ib", "freq", "eta", "reg"):
                sums[k] += parts[k]
        bands = refit_bands()
        model = ScoringModel.build(
            params=params,
            ds=ds,
            ops=ops,
            bands=bands,
            residual=residual,
            lambda_b=cfg.lambda_b,
            k_c_eval=cfg.k_c_eval,
            scope=cfg.scope,
            coeff_mode=cfg.coeff,
            num_layers=cfg.num_layers,
        )
        report = evaluate(model, Split.VALID, ks=(10, 20))
        row = {
            "epoch": epoch,
            **{f"loss_{k}": sums[k] / steps for k in sums},
            "valid_recall20": report.recall[20],
            "valid_ndcg20": report.ndcg[20],
        }
        history.append(row)
        if epoch_callback is not None:
            epoch_callback(row)
        if report.recall[20] > best_recall:
            best_recall = report.recall[20]
            best_epoch = epoch
            best_params = params.copy()
    return FitResult(
        params=best_params,
        best_epoch=best_epoch,
        best_valid_recall20=max(best_recall, 0.0) if cfg.epochs else 0.0,
        history=history,
    )


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def _iter_checkpoint_tensors(params: ModelParams):
    yield from params.named_tensors()
    if params.adam is not None:
        yield "adam.step", np.asarray(float(params.adam.step), dtype=np.float32)
        for name in params.adam.first:
            yield f"adam.first.{name}", params.adam.first[name]
        for name in params.adam.second:
            yield f"adam.second.{name}", params.adam.second[name]


def save_checkpoint(path, params: ModelParams, config_echo: str) -> None:
    """Write a BRCK checkpoint: named f32 tensors plus the config text."""
    path = Path(path)
    tensors = list(_iter_checkpoint_tensors(params))
    blob = config_echo.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(tensor.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, str]:
    """Reload a BRCK checkpoint bit-exactly."""
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        s = struct.Struct(fmt)
        if off + s.size > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = s.unpack_from(raw, off)
        off += s.size
        return vals

    magic, version = take("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = take("<Q")
    config_echo = raw[off:off + blob_len].decode("utf-8")
    off += blob_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        shape = tuple(take("<Q")[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).copy()
        off += 4 * size
        tensors[name] = data.reshape(shape)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return _params_from_tensors(tensors), config_echo


def _params_from_tensors(tensors: dict[str, np.ndarray]) -> ModelParams:
    channels = tuple(c for c in CHANNEL_ORDER if f"user_table.{c}" in tensors)
    if not channels or "item_id_table" not in tensors:
        raise FormatError("checkpoint is missing embedding tables")
    dim = tensors["item_id_table"].shape[1]
    coeff = None
    if "coeff.user_bias" in tensors:
        coeff = CoeffParams(
            user_bias=tensors["coeff.user_bias"],
            item_bias=tensors["coeff.item_bias"],
            score_coef=tensors["coeff.score_coef"].reshape(()),
            behavior_coef=tensors["coeff.behavior_coef"].reshape(()),
        )
    params = ModelParams(
        channels=channels,
        dim=int(dim),
        user_tables={c: tensors[f"user_table.{c}"] for c in channels},
        item_id_table=tensors["item_id_table"],
        proj_weight={
            c: tensors[f"proj_weight.{c}"] for c in channels if c != "id"
        },
        proj_bias={c: tensors[f"proj_bias.{c}"] for c in channels if c != "id"},
        gate_weight=tensors["gate_weight"],
        gate_bias=tensors["gate_bias"],
        gate_scale=tensors["gate_scale"].reshape(()),
        band_logits=tensors["band_logits"],
        coeff=coeff,
    )
    if "adam.step" in tensors:
        first = {}
        second = {}
        for name, _ in params.named_tensors():
            first[name] = tensors[f"adam.first.{name}"]
            second[name] = tensors[f"adam.second.{name}"]
        params.adam = AdamState(
            step=int(tensors["adam.step"].reshape(())),
            first=first,
            second=second,
        )
    return params
