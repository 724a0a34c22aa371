"""Interaction and feature-matrix ingestion.

Input formats:

* Interactions: UTF-8 TSV, one record per line::

      raw_user_id <TAB> raw_item_id <TAB> split_label

  with split_label 0 (train), 1 (validation), or 2 (test). A single
  leading header line is tolerated when it starts with a non-digit and
  does not parse as a record.

* Features: ``BRFM`` binary with a little-endian header (magic ``BRFM``,
  u32 version, u64 rows, u64 cols) followed by rows*cols float32 values
  in row-major order.

Raw ids are remapped to contiguous 0-based indices in first-appearance
order; the remap tables stay on the Dataset so rankings can be exported
against the original ids.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DataError, DimensionError, FormatError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"BRFM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQQ")


class Split(IntEnum):
    TRAIN = 0
    VALID = 1
    TEST = 2


class Interaction(NamedTuple):
    user: int
    item: int
    split: Split


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense per-item feature block, row i holds item i's vector."""

    data: np.ndarray  # (rows, cols) float32

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class Dataset:
    """Immutable id-mapped interaction data with per-split bookkeeping."""

    num_users: int
    num_items: int
    users: np.ndarray   # (n,) int64 interaction user column
    items: np.ndarray   # (n,) int64 interaction item column
    splits: np.ndarray  # (n,) int8 split labels
    features: dict[str, FeatureMatrix]
    train_history: list[np.ndarray]     # per user, sorted unique train items
    train_item_users: list[np.ndarray]  # per item, sorted unique train users
    user_ids: list[str] = field(repr=False)
    item_ids: list[str] = field(repr=False)

    @property
    def num_interactions(self) -> int:
        return int(self.users.shape[0])

    def split_counts(self) -> dict[Split, int]:
        return {s: int(np.sum(self.splits == int(s))) for s in Split}

    def split_pairs(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == int(split)
        return self.users[mask], self.items[mask]

    def iter_interactions(self) -> Iterator[Interaction]:
        for u, i, s in zip(self.users, self.items, self.splits):
            yield Interaction(int(u), int(i), Split(int(s)))

    def with_features(self, features: dict[str, FeatureMatrix]) -> "Dataset":
        for name, fm in features.items():
            if fm.rows != self.num_items:
                raise DimensionError(
                    f"feature channel {name!r} has {fm.rows} rows, "
                    f"expected {self.num_items}"
                )
        merged = dict(self.features)
        merged.update(features)
        return Dataset(
            num_users=self.num_users,
            num_items=self.num_items,
            users=self.users,
            items=self.items,
            splits=self.splits,
            features=merged,
            train_history=self.train_history,
            train_item_users=self.train_item_users,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )


def build_dataset(
    users,
    items,
    splits,
    user_ids: list[str] | None = None,
    item_ids: list[str] | None = None,
    num_users: int | None = None,
    num_items: int | None = None,
) -> Dataset:
    """Assemble a Dataset from already-mapped index arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    splits = np.asarray(splits, dtype=np.int8)
    if user_ids is None:
        count = num_users if num_users is not None else int(users.max()) + 1
        user_ids = [str(u) for u in range(count)]
    if item_ids is None:
        count = num_items if num_items is not None else int(items.max()) + 1
        item_ids = [str(i) for i in range(count)]
    return _build_dataset(users, items, splits, list(user_ids), list(item_ids))


def _build_dataset(
    users: np.ndarray,
    items: np.ndarray,
    splits: np.ndarray,
    user_ids: list[str],
    item_ids: list[str],
) -> Dataset:
    num_users = len(user_ids)
    num_items = len(item_ids)
    train_mask = splits == int(Split.TRAIN)
    tr_u = users[train_mask]
    tr_i = items[train_mask]
    history: list[list[int]] = [[] for _ in range(num_users)]
    item_users: list[list[int]] = [[] for _ in range(num_items)]
    for u, i in zip(tr_u, tr_i):
        history[int(u)].append(int(i))
        item_users[int(i)].append(int(u))
    train_history = [np.unique(np.asarray(h, dtype=np.int64)) for h in history]
    train_item_users = [np.unique(np.asarray(h, dtype=np.int64)) for h in item_users]
    return Dataset(
        num_users=num_users,
        num_items=num_items,
        users=users,
        items=items,
        splits=splits,
        features={},
        train_history=train_history,
        train_item_users=train_item_users,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def load_interactions(path) -> Dataset:
    """Parse a split-marked interaction TSV into an id-mapped Dataset.

    Duplicate (user, item, split) triples are dropped with a warning;
    cross-split duplicates are kept and reported by
    :func:`validate_split_integrity`.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    user_ids: list[str] = []
    item_ids: list[str] = []
    users: list[int] = []
    items: list[int] = []
    splits: list[int] = []
    seen: set[tuple[int, int, int]] = set()
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            ok = len(parts) == 3 and parts[2].strip() in {"0", "1", "2"}
            if not ok:
                if lineno == 1 and line and not line[0].isdigit():
                    continue  # header line
                if len(parts) != 3:
                    raise FormatError(
                        f"{path}:{lineno}: expected 3 tab-separated fields, "
                        f"got {len(parts)}"
                    )
                raise FormatError(
                    f"{path}:{lineno}: split label {parts[2]!r} not in {{0,1,2}}"
                )
            raw_u, raw_i, raw_s = parts[0], parts[1], parts[2].strip()
            u = user_index.setdefault(raw_u, len(user_ids))
            if u == len(user_ids):
                user_ids.append(raw_u)
            i = item_index.setdefault(raw_i, len(item_ids))
            if i == len(item_ids):
                item_ids.append(raw_i)
            s = int(raw_s)
            key = (u, i, s)
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            users.append(u)
            items.append(i)
            splits.append(s)
    if duplicates:
        logger.warning("%s: dropped %d duplicate interaction rows", path, duplicates)
    if not users:
        raise FormatError(f"{path}: no interaction records found")
    return _build_dataset(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(splits, dtype=np.int8),
        user_ids,
        item_ids,
    )


def load_features(path, expected_rows: int) -> FeatureMatrix:
    """Read a BRFM feature file and verify its row count and finiteness."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated BRFM header")
    magic, version, rows, cols = _FEATURE_HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported BRFM version {version}")
    need = _FEATURE_HEADER.size + 4 * rows * cols
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    if rows != expected_rows:
        raise DimensionError(f"{path}: has {rows} rows, expected {expected_rows}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, cols)
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(f"{path}: non-finite feature value in row {bad}")
    return FeatureMatrix(data=data.copy())


def write_features(fm: FeatureMatrix, path) -> None:
    """Write a BRFM file; load followed by write reproduces bytes exactly."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.rows, fm.cols))
        fh.write(fm.data.astype("<f4", copy=False).tobytes())


@dataclass(frozen=True)
class IntegrityReport:
    split_counts: dict[Split, int]
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [
            f"train={self.split_counts[Split.TRAIN]}",
            f"valid={self.split_counts[Split.VALID]}",
            f"test={self.split_counts[Split.TEST]}",
            f"violations={len(self.violations)}",
        ]
        lines.extend(self.violations)
        return "\n".join(lines) + "\n"


def validate_split_integrity(ds: Dataset) -> IntegrityReport:
    """Check split invariants; violations are reported, never raised."""
    violations: list[str] = []
    # cold-start users: valid/test activity without any train interaction
    has_train = np.zeros(ds.num_users, dtype=bool)
    for u in range(ds.num_users):
        has_train[u] = ds.train_history[u].size > 0
    eval_mask = ds.splits != int(Split.TRAIN)
    for u in np.unique(ds.users[eval_mask]):
        if not has_train[int(u)]:
            violations.append(f"cold-start user {ds.user_ids[int(u)]!r} (index {int(u)})")
    # cross-split duplicates: the same (u, i) pair in more than one split
    pair_splits: dict[tuple[int, int], int] = {}
    for u, i, s in zip(ds.users, ds.items, ds.splits):
        key = (int(u), int(i))
        prev = pair_splits.get(key)
        if prev is None:
            pair_splits[key] = int(s)
        elif prev != int(s):
            violations.append(
                f"pair (user {key[0]}, item {key[1]}) appears in splits {prev} and {int(s)}"
            )
    # train_history consistency with the raw train rows
    tr_u, tr_i = ds.split_pairs(Split.TRAIN)
    for u in range(ds.num_users):
        expect = np.unique(tr_i[tr_u == u])
        if not np.array_equal(expect, ds.train_history[u]):
            violations.append(f"train history mismatch for user index {u}")
    return IntegrityReport(split_counts=ds.split_counts(), violations=violations)
