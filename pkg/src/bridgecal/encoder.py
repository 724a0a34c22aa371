"""Per-channel graph encoder.

Each channel (id, visual, textual) starts from a user preference table
stacked over an item block (the id embedding table, or a linear
projection of the channel features). Two rounds of normalized bipartite
message passing are summed with the input state, and the item block is
then smoothed once through the cached item graph.

Parameters are stored float32; all encoder math runs in float64 so that
training, finite-difference checks, and checkpoint evaluation agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import Dataset
from .errors import ConfigError, DimensionError
from .graphs import GraphOps

CHANNEL_ORDER = ("id", "v", "t")
DEFAULT_DIM = 64
DEFAULT_LAYERS = 2


@dataclass
class CoeffParams:
    """Per-pair conservative-coefficient parameters."""

    user_bias: np.ndarray      # (num_users,)
    item_bias: np.ndarray      # (num_items,)
    score_coef: np.ndarray     # scalar ()
    behavior_coef: np.ndarray  # scalar ()


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per named tensor."""

    step: int
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: "ModelParams") -> "AdamState":
        first = {n: np.zeros_like(t) for n, t in params.named_tensors()}
        second = {n: np.zeros_like(t) for n, t in params.named_tensors()}
        return cls(step=0, first=first, second=second)

    def copy(self) -> "AdamState":
        return AdamState(
            step=self.step,
            first={n: t.copy() for n, t in self.first.items()},
            second={n: t.copy() for n, t in self.second.items()},
        )


@dataclass
class ModelParams:
    """All trainable tensors plus optional optimizer state."""

    channels: tuple[str, ...]
    dim: int
    user_tables: dict[str, np.ndarray]   # channel -> (num_users, dim)
    item_id_table: np.ndarray            # (num_items, dim)
    proj_weight: dict[str, np.ndarray]   # content channel -> (feat_dim, dim)
    proj_bias: dict[str, np.ndarray]     # content channel -> (dim,)
    gate_weight: np.ndarray              # (len(channels)*dim, num_bands)
    gate_bias: np.ndarray                # (num_bands,)
    gate_scale: np.ndarray               # scalar (), residual gate strength
    band_logits: np.ndarray              # (num_bands,)
    coeff: CoeffParams | None = None
    adam: AdamState | None = None

    @property
    def num_bands(self) -> int:
        return int(self.band_logits.shape[0])

    @property
    def fused_dim(self) -> int:
        return len(self.channels) * self.dim

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for c in self.channels:
            yield f"user_table.{c}", self.user_tables[c]
        yield "item_id_table", self.item_id_table
        for c in self.channels:
            if c == "id":
                continue
            yield f"proj_weight.{c}", self.proj_weight[c]
            yield f"proj_bias.{c}", self.proj_bias[c]
        yield "gate_weight", self.gate_weight
        yield "gate_bias", self.gate_bias
        yield "gate_scale", self.gate_scale
        yield "band_logits", self.band_logits
        if self.coeff is not None:
            yield "coeff.user_bias", self.coeff.user_bias
            yield "coeff.item_bias", self.coeff.item_bias
            yield "coeff.score_coef", self.coeff.score_coef
            yield "coeff.behavior_coef", self.coeff.behavior_coef

    def parameter_count(self) -> int:
        return sum(int(t.size) for _, t in self.named_tensors())

    def copy(self) -> "ModelParams":
        out = self.astype(self.item_id_table.dtype)
        out.adam = self.adam.copy() if self.adam is not None else None
        return out

    def astype(self, dtype) -> "ModelParams":
        coeff = None
        if self.coeff is not None:
            coeff = CoeffParams(
                user_bias=self.coeff.user_bias.astype(dtype),
                item_bias=self.coeff.item_bias.astype(dtype),
                score_coef=self.coeff.score_coef.astype(dtype),
                behavior_coef=self.coeff.behavior_coef.astype(dtype),
            )
        return ModelParams(
            channels=self.channels,
            dim=self.dim,
            user_tables={c: t.astype(dtype) for c, t in self.user_tables.items()},
            item_id_table=self.item_id_table.astype(dtype),
            proj_weight={c: t.astype(dtype) for c, t in self.proj_weight.items()},
            proj_bias={c: t.astype(dtype) for c, t in self.proj_bias.items()},
            gate_weight=self.gate_weight.astype(dtype),
            gate_bias=self.gate_bias.astype(dtype),
            gate_scale=self.gate_scale.astype(dtype),
            band_logits=self.band_logits.astype(dtype),
            coeff=coeff,
            adam=None,
        )


def init_params(
    ds: Dataset,
    channels: tuple[str, ...] = CHANNEL_ORDER,
    dim: int = DEFAULT_DIM,
    num_bands: int = 3,
    conservative: bool = False,
    seed: int = 2020,
    dtype=np.float32,
) -> ModelParams:
    """Seeded initialization.

    Embedding tables and projections draw from uniform(-1/sqrt(dim),
    1/sqrt(dim)); the gate starts neutral (zero weights and logits, gate
    scale 0.5) so early training matches an ungated encoder.

    Initialization is channel-symmetric: the user table draw is shared
    by all channels and content projections of equal width share one
    draw. Content channels fed identical features therefore stay exact
    twins through training, which keeps cross-view diagnostics honest;
    distinct features break the symmetry at the first step.
    """
    for c in channels:
        if c not in CHANNEL_ORDER:
            raise ConfigError(f"unknown channel {c!r}")
        if c != "id" and c not in ds.features:
            raise ConfigError(f"channel {c!r} requested but no features loaded")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    shared_user = rng.uniform(-bound, bound, size=(ds.num_users, dim)).astype(dtype)
    user_tables = {c: shared_user.copy() for c in channels}
    item_id_table = rng.uniform(-bound, bound, size=(ds.num_items, dim)).astype(dtype)
    proj_weight, proj_bias = {}, {}
    proj_by_width: dict[int, np.ndarray] = {}
    for c in channels:
        if c == "id":
            continue
        fdim = ds.features[c].cols
        if fdim not in proj_by_width:
            proj_by_width[fdim] = rng.uniform(
                -bound, bound, size=(fdim, dim)
            ).astype(dtype)
        proj_weight[c] = proj_by_width[fdim].copy()
        proj_bias[c] = np.zeros(dim, dtype=dtype)
    coeff = None
    if conservative:
        coeff = CoeffParams(
            user_bias=np.zeros(ds.num_users, dtype=dtype),
            item_bias=np.zeros(ds.num_items, dtype=dtype),
            score_coef=np.zeros((), dtype=dtype),
            behavior_coef=np.zeros((), dtype=dtype),
        )
    params = ModelParams(
        channels=tuple(channels),
        dim=dim,
        user_tables=user_tables,
        item_id_table=item_id_table,
        proj_weight=proj_weight,
        proj_bias=proj_bias,
        gate_weight=np.zeros((len(channels) * dim, num_bands), dtype=dtype),
        gate_bias=np.zeros(num_bands, dtype=dtype),
        gate_scale=np.asarray(0.5, dtype=dtype),
        band_logits=np.zeros(num_bands, dtype=dtype),
        coeff=coeff,
    )
    params.adam = AdamState.init(params)
    return params


@dataclass(frozen=True)
class ChannelEmbeddings:
    """Per-channel node states stacked as (num_users + num_items, dim)."""

    num_users: int
    channels: tuple[str, ...]
    stacked: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return int(next(iter(self.stacked.values())).shape[1])

    def users(self, channel: str) -> np.ndarray:
        return self.stacked[channel][: self.num_users]

    def items(self, channel: str) -> np.ndarray:
        return self.stacked[channel][self.num_users:]

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.stacked[c] for c in self.channels], axis=1)


def channel_input(params: ModelParams, ds: Dataset, channel: str) -> np.ndarray:
    """Layer-0 node state: user table over the channel's item block."""
    users = params.user_tables[channel].astype(np.float64)
    if channel == "id":
        items = params.item_id_table.astype(np.float64)
    else:
        feats = ds.features[channel].data.astype(np.float64)
        w = params.proj_weight[channel].astype(np.float64)
        b = params.proj_bias[channel].astype(np.float64)
        items = feats @ w + b
    return np.concatenate([users, items], axis=0)


def propagate_layer_sum(h0: np.ndarray, adj, layers: int) -> np.ndarray:
    """Sum of the input state and `layers` rounds of graph propagation."""
    if layers < 0:
        raise ConfigError("layers must be >= 0")
    out = h0.copy()
    cur = h0
    for _ in range(layers):
        cur = adj @ cur
        out += cur
    return out


def smooth_items(z_items: np.ndarray, item_graph) -> np.ndarray:
    """One item-graph pass; rows with no neighbors pass through unchanged."""
    smoothed = item_graph @ z_items
    row_deg = np.diff(item_graph.indptr)
    empty = row_deg == 0
    if empty.any():
        smoothed[empty] = z_items[empty]
    return smoothed


def encode(
    params: ModelParams,
    ds: Dataset,
    graphs,
    layers: int = DEFAULT_LAYERS,
) -> ChannelEmbeddings:
    """Full deterministic forward pass producing per-channel embeddings."""
    ops = GraphOps.ensure(graphs)
    n = ds.num_users + ds.num_items
    if ops.adj.shape != (n, n):
        raise DimensionError(
            f"bipartite graph is {ops.adj.shape}, expected {(n, n)}"
        )
    stacked = {}
    for c in params.channels:
        h0 = channel_input(params, ds, c)
        z = propagate_layer_sum(h0, ops.adj, layers)
        if ops.item is not None:
            z[ds.num_users:] = smooth_items(z[ds.num_users:], ops.item)
        stacked[c] = z
    return ChannelEmbeddings(num_users=ds.num_users, channels=params.channels, stacked=stacked)
