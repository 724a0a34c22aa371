import numpy as np
import pytest
import scipy.sparse as sp

from bridgecal.encoder import (
    channel_input,
    encode,
    init_params,
    propagate_layer_sum,
    smooth_items,
)
from bridgecal.graphs import GraphBundle
from bridgecal.sparse import SparseGraph


def make_params(ds, **kw):
    defaults = dict(channels=("id", "v", "t"), dim=4, num_bands=3, seed=5)
    defaults.update(kw)
    return init_params(ds, **defaults)


class TestChannelInput:
    def test_id_channel_is_table_verbatim(self, tiny_ds):
        params = make_params(tiny_ds)
        h0 = channel_input(params, tiny_ds, "id")
        np.testing.assert_array_equal(
            h0[tiny_ds.num_users:], params.item_id_table.astype(np.float64)
        )
        np.testing.assert_array_equal(
            h0[: tiny_ds.num_users], params.user_tables["id"].astype(np.float64)
        )

    def test_zero_feature_zero_bias_gives_zero_row(self, tiny_ds):
        params = make_params(tiny_ds)
        feats = tiny_ds.features["v"].data.copy()
        feats[2] = 0.0
        tiny_ds.features["v"].data[...] = feats
        h0 = channel_input(params, tiny_ds, "v")
        np.testing.assert_array_equal(h0[tiny_ds.num_users + 2], np.zeros(4))

    def test_projection_linearity(self, tiny_ds):
        params = make_params(tiny_ds)
        feats = tiny_ds.features["t"].data
        h0 = channel_input(params, tiny_ds, "t")
        expect = feats.astype(np.float64) @ params.proj_weight["t"].astype(np.float64)
        np.testing.assert_allclose(h0[tiny_ds.num_users:], expect, atol=1e-12)


class TestPropagateLayerSum:
    def test_empty_graph_returns_input(self):
        h0 = np.arange(12, dtype=np.float64).reshape(4, 3)
        adj = SparseGraph.empty(4, 4).to_scipy()
        np.testing.assert_array_equal(propagate_layer_sum(h0, adj, 2), h0)

    def test_single_edge_hand_expansion(self):
        # one user-item edge of weight 1: out(u) = 2x + y, out(i) = x + 2y
        adj = SparseGraph.from_rows(2, 2, [([1], [1.0]), ([0], [1.0])]).to_scipy()
        x = np.array([1.0, 2.0])
        y = np.array([-3.0, 0.5])
        h0 = np.stack([x, y])
        out = propagate_layer_sum(h0, adj, 2)
        np.testing.assert_allclose(out[0], 2 * x + y, atol=1e-12)
        np.testing.assert_allclose(out[1], x + 2 * y, atol=1e-12)

    def test_zero_layers_identity(self):
        rng = np.random.default_rng(0)
        h0 = rng.standard_normal((5, 3))
        adj = SparseGraph.from_rows(
            5, 5, [([(r + 1) % 5], [0.5]) for r in range(5)]
        ).to_scipy()
        np.testing.assert_array_equal(propagate_layer_sum(h0, adj, 0), h0)

    def test_matches_dense_three_term_sum(self):
        rng = np.random.default_rng(1)
        n = 7
        dense = np.zeros((n, n))
        for _ in range(8):
            a, b = rng.integers(0, n, size=2)
            if a != b:
                w = rng.random()
                dense[a, b] = dense[b, a] = w
        adj = SparseGraph.from_scipy(sp.csr_matrix(dense)).to_scipy()
        h0 = rng.standard_normal((n, 4))
        expect = h0 + dense @ h0 + dense @ (dense @ h0)
        np.testing.assert_allclose(propagate_layer_sum(h0, adj, 2), expect, atol=1e-6)


class TestSmoothItems:
    def test_single_neighbor_copy(self):
        graph = SparseGraph.from_rows(3, 3, [([1], [1.0]), ([], []), ([], [])]).to_scipy()
        z = np.arange(9, dtype=np.float64).reshape(3, 3)
        out = smooth_items(z, graph)
        np.testing.assert_array_equal(out[0], z[1])

    def test_two_neighbor_mean(self):
        graph = SparseGraph.from_rows(
            3, 3, [([1, 2], [0.5, 0.5]), ([], []), ([], [])]
        ).to_scipy()
        z = np.arange(9, dtype=np.float64).reshape(3, 3)
        out = smooth_items(z, graph)
        np.testing.assert_allclose(out[0], (z[1] + z[2]) / 2, atol=1e-12)

    def test_empty_row_passes_through(self):
        graph = SparseGraph.from_rows(2, 2, [([1], [1.0]), ([], [])]).to_scipy()
        z = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = smooth_items(z, graph)
        np.testing.assert_array_equal(out[1], z[1])


class TestEncode:
    def test_shapes(self, tiny_ds, tiny_bundle):
        params = make_params(tiny_ds)
        z = encode(params, tiny_ds, tiny_bundle)
        for c in ("id", "v", "t"):
            assert z.users(c).shape == (tiny_ds.num_users, 4)
            assert z.items(c).shape == (tiny_ds.num_items, 4)
        assert z.concatenated().shape == (13, 12)

    def test_deterministic(self, tiny_ds, tiny_bundle):
        params = make_params(tiny_ds)
        a = encode(params, tiny_ds, tiny_bundle)
        b = encode(params, tiny_ds, tiny_bundle)
        for c in a.channels:
            np.testing.assert_array_equal(a.stacked[c], b.stacked[c])

    def test_empty_graphs_reduce_to_channel_input(self, tiny_ds):
        params = make_params(tiny_ds)
        n = tiny_ds.num_users + tiny_ds.num_items
        bundle = GraphBundle(bipartite=SparseGraph.empty(n, n), item_graph=None)
        z = encode(params, tiny_ds, bundle)
        for c in params.channels:
            np.testing.assert_array_equal(
                z.stacked[c], channel_input(params, tiny_ds, c)
            )

    def test_linearity_in_tables(self, tiny_ds, tiny_bundle):
        params = make_params(tiny_ds)
        scaled = params.astype(np.float64)
        for table in scaled.user_tables.values():
            table *= 2.0
        scaled.item_id_table *= 2.0
        for w in scaled.proj_weight.values():
            w *= 2.0
        base = encode(params.astype(np.float64), tiny_ds, tiny_bundle)
        double = encode(scaled, tiny_ds, tiny_bundle)
        for c in params.channels:
            np.testing.assert_allclose(
                double.stacked[c], 2.0 * base.stacked[c], rtol=1e-5, atol=1e-8
            )

    def test_users_not_item_graph_smoothed(self, tiny_ds, tiny_bundle):
        params = make_params(tiny_ds)
        with_graph = encode(params, tiny_ds, tiny_bundle)
        without = encode(
            params, tiny_ds,
            GraphBundle(bipartite=tiny_bundle.bipartite, item_graph=None),
        )
        for c in params.channels:
            np.testing.assert_array_equal(
                with_graph.users(c), without.users(c)
            )


class TestInitParams:
    def test_seeded_identical(self, tiny_ds):
        a = make_params(tiny_ds)
        b = make_params(tiny_ds)
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            np.testing.assert_array_equal(ta, tb)

    def test_gate_starts_neutral(self, tiny_ds):
        params = make_params(tiny_ds)
        assert float(params.gate_scale) == pytest.approx(0.5)
        np.testing.assert_array_equal(params.gate_weight, 0.0)
        np.testing.assert_array_equal(params.band_logits, 0.0)

    def test_conservative_adds_coeff_tensors(self, tiny_ds):
        fixed = make_params(tiny_ds)
        cons = make_params(tiny_ds, conservative=True)
        names = {n for n, _ in cons.named_tensors()}
        assert "coeff.user_bias" in names
        assert cons.parameter_count() > fixed.parameter_count()
