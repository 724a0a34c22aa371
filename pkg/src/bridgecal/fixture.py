"""Planted-structure synthetic datasets in the package's file formats.

Users and items are assigned to clusters round-robin. Each user draws a
fixed number of distinct items, from the own cluster with probability
1 - noise and uniformly otherwise, then splits them 80/10/10 into
train/valid/test (train first, so no user is cold in valid or test).
Features are the cluster one-hot plus seeded Gaussian noise, drawn
independently for the visual and textual channels.

Regeneration with the same seed is byte-identical. Run as a module to
emit a fixture directory plus a ready-to-train config:

    python -m bridgecal.fixture OUT_DIR --users 200 --items 100 \
        --clusters 5 --noise 0.1 --seed 7
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import FeatureMatrix, Split, write_features
from .errors import ConfigError

FEATURE_NOISE = 0.05


def make_planted(
    num_users: int,
    num_items: int,
    num_clusters: int,
    noise: float,
    seed: int,
    out_dir,
    interactions_per_user: int = 10,
) -> dict[str, Path]:
    """Write interactions.tsv, visual.brfm, and text.brfm under out_dir."""
    if num_items % num_clusters != 0:
        raise ConfigError("num_items must be divisible by num_clusters")
    if interactions_per_user < 3:
        raise ConfigError("need at least 3 interactions per user for an 80/10/10 split")
    if interactions_per_user > num_items:
        raise ConfigError("interactions_per_user exceeds the item count")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    item_cluster = np.arange(num_items) % num_clusters
    user_cluster = np.arange(num_users) % num_clusters
    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(num_clusters)]

    lines: list[str] = []
    n = interactions_per_user
    # 80/10/10 with at least one valid and one test interaction per user
    n_valid = max(1, int(np.floor(0.1 * n)))
    n_test = max(1, int(np.floor(0.1 * n)))
    n_train = n - n_valid - n_test
    for u in range(num_users):
        own = cluster_items[user_cluster[u]]
        chosen: list[int] = []
        seen: set[int] = set()
        attempts = 0
        while len(chosen) < n and attempts < 50 * n:
            attempts += 1
            if rng.random() < 1.0 - noise:
                item = int(own[rng.integers(0, own.size)])
            else:
                item = int(rng.integers(0, num_items))
            if item not in seen:
                seen.add(item)
                chosen.append(item)
        for fallback in np.concatenate([own, np.arange(num_items)]):
            if len(chosen) >= n:
                break
            if int(fallback) not in seen:
                seen.add(int(fallback))
                chosen.append(int(fallback))
        for pos, item in enumerate(chosen):
            split = Split.TRAIN if pos < n_train else (
                Split.VALID if pos < n_train + n_valid else Split.TEST
            )
            lines.append(f"u{u}\ti{item}\t{int(split)}")
    interactions = out_dir / "interactions.tsv"
    interactions.write_text("\n".join(lines) + "\n", encoding="utf-8")

    paths = {"interactions": interactions}
    for channel, name in (("v", "visual"), ("t", "text")):
        data = np.zeros((num_items, num_clusters), dtype=np.float64)
        data[np.arange(num_items), item_cluster] = 1.0
        data += FEATURE_NOISE * rng.standard_normal((num_items, num_clusters))
        path = out_dir / f"{name}.brfm"
        write_features(FeatureMatrix(data=data.astype(np.float32)), path)
        paths[channel] = path
    return paths


FIXTURE_CONFIG = """\
interactions = {interactions}
visual_features = {visual}
text_features = {text}
artifact_dir = {artifacts}
epochs = 30
batch_size = 64
lr = 0.02
seed = 2020
k_b = 50
k_c_train = 40
k_c_eval = 40
knn_k = 10
lambda_b = 0.2
"""


def _main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a planted synthetic dataset")
    parser.add_argument("out_dir")
    parser.add_argument("--users", type=int, default=200)
    parser.add_argument("--items", type=int, default=100)
    parser.add_argument("--clusters", type=int, default=5)
    parser.add_argument("--noise", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--per-user", type=int, default=20)
    args = parser.parse_args(argv)
    paths = make_planted(
        num_users=args.users,
        num_items=args.items,
        num_clusters=args.clusters,
        noise=args.noise,
        seed=args.seed,
        out_dir=args.out_dir,
        interactions_per_user=args.per_user,
    )
    out_dir = Path(args.out_dir)
    cfg_path = out_dir / "fixture.cfg"
    cfg_path.write_text(
        FIXTURE_CONFIG.format(
            interactions=paths["interactions"],
            visual=paths["v"],
            text=paths["t"],
            artifacts=out_dir / "artifacts",
        ),
        encoding="utf-8",
    )
    print(f"fixture written under {out_dir}")
    print(f"config: {cfg_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
