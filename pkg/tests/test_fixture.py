import numpy as np
import pytest

from bridgecal.behavior import build_behavior_graph
from bridgecal.data import Split, load_features, load_interactions, validate_split_integrity
from bridgecal.errors import ConfigError
from bridgecal.fixture import make_planted


class TestDeterminism:
    def test_regeneration_byte_identical(self, tmp_path):
        a = make_planted(40, 20, 4, noise=0.1, seed=7, out_dir=tmp_path / "a",
                         interactions_per_user=8)
        b = make_planted(40, 20, 4, noise=0.1, seed=7, out_dir=tmp_path / "b",
                         interactions_per_user=8)
        for key in ("interactions", "v", "t"):
            assert a[key].read_bytes() == b[key].read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = make_planted(40, 20, 4, noise=0.1, seed=7, out_dir=tmp_path / "a")
        b = make_planted(40, 20, 4, noise=0.1, seed=8, out_dir=tmp_path / "b")
        assert a["interactions"].read_bytes() != b["interactions"].read_bytes()


class TestPlantedStructure:
    def test_files_load_cleanly(self, tmp_path):
        paths = make_planted(60, 30, 3, noise=0.1, seed=5, out_dir=tmp_path)
        ds = load_interactions(paths["interactions"])
        assert ds.num_users == 60
        assert ds.num_items == 30
        load_features(paths["v"], expected_rows=30)
        load_features(paths["t"], expected_rows=30)
        report = validate_split_integrity(ds)
        assert report.ok

    def test_split_proportions(self, tmp_path):
        paths = make_planted(50, 25, 5, noise=0.0, seed=2, out_dir=tmp_path,
                             interactions_per_user=10)
        ds = load_interactions(paths["interactions"])
        counts = ds.split_counts()
        assert counts[Split.TRAIN] == 50 * 8
        assert counts[Split.VALID] == 50 * 1
        assert counts[Split.TEST] == 50 * 1

    def test_noise_zero_behavior_disjoint_across_clusters(self, tmp_path):
        num_items, clusters = 30, 3
        paths = make_planted(60, num_items, clusters, noise=0.0, seed=4,
                             out_dir=tmp_path)
        ds = load_interactions(paths["interactions"])
        raw_item = [int(ds.item_ids[i][1:]) for i in range(num_items)]
        graph = build_behavior_graph(ds, k_b=num_items)
        for i in range(num_items):
            cols, _ = graph.row(i)
            for j in cols:
                assert raw_item[i] % clusters == raw_item[int(j)] % clusters

    def test_noise_zero_content_cosine_separation(self, tmp_path):
        num_items, clusters = 30, 3
        paths = make_planted(60, num_items, clusters, noise=0.0, seed=4,
                             out_dir=tmp_path)
        feats = load_features(paths["v"], expected_rows=num_items).data.astype(float)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        unit = feats / norms
        sims = unit @ unit.T
        within, across = [], []
        for i in range(num_items):
            for j in range(i + 1, num_items):
                (within if i % clusters == j % clusters else across).append(sims[i, j])
        assert np.mean(within) > np.mean(across)

    def test_validation_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            make_planted(10, 9, 2, noise=0.0, seed=1, out_dir=tmp_path)
        with pytest.raises(ConfigError):
            make_planted(10, 8, 2, noise=0.0, seed=1, out_dir=tmp_path,
                         interactions_per_user=2)
        with pytest.raises(ConfigError):
            make_planted(10, 8, 2, noise=0.0, seed=1, out_dir=tmp_path,
                         interactions_per_user=9)
