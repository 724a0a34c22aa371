"""Frequency-band decomposition and gated band fusion.

Each 64-dim channel matrix (users and items stacked) is decomposed into
contiguous bands of right singular directions ordered by descending
singular value. Band bases are fitted on detached representations and
frozen between refits, so the fused forward pass stays piecewise linear
in the channel embeddings.

Alternative decompositions (equal-capacity split, Gram eigenvectors,
DCT, seeded random orthogonal) share the same fusion path and parameter
count and exist for controlled comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .encoder import ChannelEmbeddings, ModelParams
from .errors import ConfigError, NumericError

BAND_MODES = ("svd", "equal", "gram", "dct", "random")


def band_widths(dim: int, m: int) -> tuple[int, ...]:
    """Split dim into m contiguous widths, earlier bands one wider on remainder."""
    if m < 1:
        raise ConfigError(f"band count must be >= 1, got {m}")
    if m > dim:
        raise ConfigError(f"band count {m} exceeds channel dimension {dim}")
    base, rem = divmod(dim, m)
    return tuple(base + 1 if i < rem else base for i in range(m))


@dataclass(frozen=True)
class BandSet:
    """Frozen per-channel band projectors.

    bases maps channel -> list of (dim, width_m) orthonormal blocks in
    descending spectral order; it is None in equal-capacity mode, where
    every band slice is the full matrix divided by the band count.
    """

    mode: str
    widths: tuple[int, ...]
    bases: dict[str, list[np.ndarray]] | None

    @property
    def num_bands(self) -> int:
        return len(self.widths)


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    """Make each basis vector's largest-magnitude entry positive."""
    out = vt.copy()
    for r in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[r])))
        if out[r, j] < 0:
            out[r] = -out[r]
    return out


def _partition(v: np.ndarray, widths: tuple[int, ...]) -> list[np.ndarray]:
    blocks, start = [], 0
    for w in widths:
        blocks.append(np.ascontiguousarray(v[:, start:start + w]))
        start += w
    return blocks


def _dct_basis(dim: int) -> np.ndarray:
    j = np.arange(dim)[:, None]
    k = np.arange(dim)[None, :]
    basis = np.cos(np.pi * (2 * j + 1) * k / (2 * dim))
    basis *= np.sqrt(2.0 / dim)
    basis[:, 0] = np.sqrt(1.0 / dim)
    return basis


def fit_bands(z: ChannelEmbeddings, mode: str, m: int, seed: int = 0) -> BandSet:
    """Fit frozen band bases from detached channel embeddings."""
    if mode not in BAND_MODES:
        raise ConfigError(f"unknown band mode {mode!r}, expected one of {BAND_MODES}")
    dim = z.dim
    widths = band_widths(dim, m)
    if mode == "equal":
        return BandSet(mode=mode, widths=widths, bases=None)

    bases: dict[str, list[np.ndarray]] = {}
    shared: list[np.ndarray] | None = None
    for c in z.channels:
        zc = z.stacked[c].astype(np.float64)
        if mode == "svd":
            try:
                # full matrices needed when rows < dim so the partition
                # still spans the whole space
                _, _, vt = np.linalg.svd(zc, full_matrices=zc.shape[0] < dim)
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"SVD failed to converge on channel {c!r}") from exc
            v = _fix_signs(vt).T
        elif mode == "gram":
            gram = zc.T @ zc
            try:
                _, vecs = np.linalg.eigh(gram)
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"eigendecomposition failed on channel {c!r}") from exc
            v = _fix_signs(vecs[:, ::-1].T).T
        elif mode == "dct":
            if shared is None:
                shared = _partition(_dct_basis(dim), widths)
            bases[c] = shared
            continue
        else:  # random orthogonal
            if shared is None:
                rng = np.random.default_rng(seed)
                a = rng.standard_normal((dim, dim))
                q, r = np.linalg.qr(a)
                signs = np.sign(np.diag(r))
                signs[signs == 0] = 1.0
                shared = _partition(q * signs[None, :], widths)
            bases[c] = shared
            continue
        bases[c] = _partition(v, widths)
    return BandSet(mode=mode, widths=widths, bases=bases)


def band_matrices(z: ChannelEmbeddings, bands: BandSet) -> list[np.ndarray]:
    """Per-band full reconstructions, each (nodes, channels*dim)."""
    out = []
    for m in range(bands.num_bands):
        parts = []
        for c in z.channels:
            zc = z.stacked[c]
            if bands.mode == "equal":
                parts.append(zc / bands.num_bands)
            else:
                v = bands.bases[c][m]
                parts.append((zc @ v) @ v.T)
        out.append(np.concatenate(parts, axis=1))
    return out


def band_slices(z: ChannelEmbeddings, bands: BandSet, node: int) -> list[np.ndarray]:
    """Per-band concatenated slices for a single node."""
    out = []
    for m in range(bands.num_bands):
        parts = []
        for c in z.channels:
            zn = z.stacked[c][node]
            if bands.mode == "equal":
                parts.append(zn / bands.num_bands)
            else:
                v = bands.bases[c][m]
                parts.append((zn @ v) @ v.T)
        out.append(np.concatenate(parts))
    return out


@dataclass(frozen=True)
class FusedEmbeddings:
    """Final node embeddings after gated band fusion."""

    num_users: int
    vectors: np.ndarray  # (num_users + num_items, fused_dim)

    @property
    def users(self) -> np.ndarray:
        return self.vectors[: self.num_users]

    @property
    def items(self) -> np.ndarray:
        return self.vectors[self.num_users:]


@dataclass(frozen=True)
class FuseCache:
    """Intermediates retained for the manual backward pass."""

    zfull: np.ndarray          # (n, fused_dim)
    phi: np.ndarray            # (n, bands) gate activations
    alpha: np.ndarray          # (n, bands) band amplifications
    omega: np.ndarray          # (bands,) band weights
    band_h: list[np.ndarray]   # per band (n, fused_dim)


def fuse(
    z: ChannelEmbeddings,
    bands: BandSet,
    params: ModelParams,
    want_cache: bool = False,
):
    """Gate and mix band slices into final embeddings.

    Per node: alpha_m = 1 + gate_scale * sigmoid(gate(z_n))_m and
    omega_m = sigmoid(band_logit_m); the fused vector is the
    omega * alpha weighted sum of band slices.
    """
    zfull = z.concatenated()
    w = params.gate_weight.astype(np.float64)
    b = params.gate_bias.astype(np.float64)
    if w.shape[0] != zfull.shape[1] or w.shape[1] != bands.num_bands:
        raise ConfigError(
            f"gate weight shape {w.shape} incompatible with fused dim "
            f"{zfull.shape[1]} and {bands.num_bands} bands"
        )
    phi = expit(zfull @ w + b)
    alpha = 1.0 + float(params.gate_scale) * phi
    omega = expit(params.band_logits.astype(np.float64))
    band_h = band_matrices(z, bands)
    e = np.zeros_like(zfull)
    for m in range(bands.num_bands):
        e += omega[m] * alpha[:, m:m + 1] * band_h[m]
    fused = FusedEmbeddings(num_users=z.num_users, vectors=e)
    if want_cache:
        return fused, FuseCache(zfull=zfull, phi=phi, alpha=alpha, omega=omega, band_h=band_h)
    return fused


def base_score(e: FusedEmbeddings, u: int, i: int) -> float:
    """Inner product of a user vector and an item vector."""
    return float(e.vectors[u] @ e.vectors[e.num_users + i])
