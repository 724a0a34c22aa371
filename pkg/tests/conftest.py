import numpy as np
import pytest

from bridgecal.data import FeatureMatrix, build_dataset
from bridgecal.fixture import make_planted
from bridgecal.graphs import (
    GraphBundle,
    build_content_knn,
    build_multimodal_item_graph,
    build_normalized_bipartite,
)


def small_dataset(seed=3, num_users=5, num_items=8, feat_dims=(3, 4)):
    """Tiny dataset with 3 train, 1 valid, 1 test interaction per user."""
    rng = np.random.default_rng(seed)
    users, items, splits = [], [], []
    for u in range(num_users):
        hist = rng.choice(num_items, size=4, replace=False)
        for pos, i in enumerate(hist):
            users.append(u)
            items.append(int(i))
            splits.append(0 if pos < 3 else 1)
    for u in range(num_users):
        seen = {i for uu, i in zip(users, items) if uu == u}
        rest = [i for i in range(num_items) if i not in seen]
        users.append(u)
        items.append(int(rng.choice(rest)))
        splits.append(2)
    ds = build_dataset(users, items, splits, num_users=num_users, num_items=num_items)
    feats = {
        "v": FeatureMatrix(rng.standard_normal((num_items, feat_dims[0])).astype(np.float32)),
        "t": FeatureMatrix(rng.standard_normal((num_items, feat_dims[1])).astype(np.float32)),
    }
    return ds.with_features(feats)


def small_bundle(ds, knn_k=2, item_graph=True):
    bipartite = build_normalized_bipartite(ds)
    graph = None
    if item_graph:
        graph = build_multimodal_item_graph(
            build_content_knn(ds.features["v"], knn_k),
            build_content_knn(ds.features["t"], knn_k),
        )
    return GraphBundle(bipartite=bipartite, item_graph=graph)


@pytest.fixture()
def tiny_ds():
    return small_dataset()


@pytest.fixture()
def tiny_bundle(tiny_ds):
    return small_bundle(tiny_ds)


@pytest.fixture(scope="session")
def planted_dir(tmp_path_factory):
    """Planted fixture shared by the slower integration tests."""
    out = tmp_path_factory.mktemp("planted")
    paths = make_planted(
        num_users=200,
        num_items=100,
        num_clusters=5,
        noise=0.1,
        seed=7,
        out_dir=out,
        interactions_per_user=20,
    )
    return out, paths
