import numpy as np
import pytest

from msdet import tensor as T
from msdet.geometry import (
    WIDConfig,
    farthest_point_sample,
    knn,
    upsample_features,
    wid_interpolate,
    wid_weights,
)
from msdet.tensor import Tensor


def fps_oracle(coords, n, seed_index):
    """Independent O(n*M) greedy reference with the same tie-break."""
    picked = [seed_index]
    m = coords.shape[0]
    for _ in range(n - 1):
        best, best_d = None, -1.0
        for i in range(m):
            d = min(np.sqrt(((coords[i] - coords[j]) ** 2).sum()) for j in picked)
            if d > best_d:
                best, best_d = i, d
        picked.append(best)
    return picked


def knn_oracle(queries, data, k):
    out = []
    for q in queries:
        d = np.sqrt(((data - q) ** 2).sum(axis=1))
        order = sorted(range(len(data)), key=lambda i: (d[i], i))
        out.append(order[:k])
    return np.array(out)


class TestFPS:
    def test_n_equals_m_is_permutation(self):
        pts = np.random.default_rng(0).normal(size=(12, 3))
        idx = farthest_point_sample(pts, 12, seed_index=3)
        assert sorted(idx) == list(range(12))

    def test_n_one_returns_seed(self):
        pts = np.random.default_rng(1).normal(size=(5, 3))
        assert list(farthest_point_sample(pts, 1, seed_index=2)) == [2]

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(64, 3))
        got = farthest_point_sample(pts, 8, seed_index=5)
        assert list(got) == fps_oracle(pts, 8, 5)

    def test_n_too_large(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((3, 3)), 4)

    def test_duplicates_do_not_break_determinism(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(10, 3))
        pts = np.concatenate([base, base[:4]], axis=0)
        got = farthest_point_sample(pts, 6, seed_index=0)
        assert list(got) == fps_oracle(pts, 6, 0)


class TestKNN:
    def test_query_on_data_point(self):
        pts = np.random.default_rng(4).normal(size=(10, 3))
        idx, dist = knn(pts[7:8], pts, 3)
        assert idx[0, 0] == 7
        assert dist[0, 0] == 0.0

    def test_k_equals_m_sorted(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(6, 3))
        q = rng.normal(size=(1, 3))
        idx, dist = knn(q, pts, 6)
        assert np.all(np.diff(dist[0]) >= 0)
        assert sorted(idx[0]) == list(range(6))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        q = rng.normal(size=(50, 3))
        d = rng.normal(size=(200, 3))
        idx, dist = knn(q, d, 3)
        assert np.array_equal(idx, knn_oracle(q, d, 3))
        assert np.all(np.diff(dist, axis=1) >= 0)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


class TestWID:
    def test_coincident_query_copies_features(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(10, 3))
        feats = rng.normal(size=(10, 4))
        out = wid_interpolate(pts[3:4], pts, feats, WIDConfig())
        assert np.array_equal(out[0], feats[3])

    def test_equidistant_neighbors_mean(self):
        # three sources at distance 1 from the origin along each axis
        src = np.eye(3)
        feats = np.array([[3.0], [6.0], [9.0]])
        for power in (1.0, 2.0, 3.5):
            out = wid_interpolate(np.zeros((1, 3)), src, feats, WIDConfig(power=power))
            np.testing.assert_allclose(out, [[6.0]], atol=1e-12)

    def test_distances_1_2_4_power_2(self):
        src = np.array([[1.0, 0, 0], [2.0, 0, 0], [4.0, 0, 0]])
        feats = np.array([[1.0], [10.0], [100.0]])
        out = wid_interpolate(np.zeros((1, 3)), src, feats, WIDConfig(power=2))
        expected = (16 * 1.0 + 4 * 10.0 + 1 * 100.0) / 21
        np.testing.assert_allclose(out, [[expected]], atol=1e-12)
        _, w = wid_weights(np.zeros((1, 3)), src, WIDConfig(power=2))
        np.testing.assert_allclose(w[0], [16 / 21, 4 / 21, 1 / 21], atol=1e-12)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(8)
        src = rng.uniform(0, 2, size=(30, 3))
        feats = rng.normal(size=(30, 5))
        q = rng.uniform(0, 2, size=(20, 3))
        cfg = WIDConfig()
        out = wid_interpolate(q, src, feats, cfg)
        for i, point in enumerate(q):
            d = np.sqrt(((src - point) ** 2).sum(axis=1))
            order = sorted(range(30), key=lambda j: (d[j], j))[:3]
            w = np.array([1.0 / d[j] ** 2 for j in order])
            w /= w.sum()
            ref = sum(wj * feats[j] for wj, j in zip(w, order))
            np.testing.assert_allclose(out[i], ref, atol=1e-12)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(9)
        src = rng.uniform(0, 1, size=(40, 3))
        feats = rng.normal(size=(40, 4))
        q = rng.uniform(0, 1, size=(25, 3))
        cfg = WIDConfig()
        idx, _ = knn(q, src, cfg.k_neighbors)
        out = wid_interpolate(q, src, feats, cfg)
        lo = feats[idx].min(axis=1)
        hi = feats[idx].max(axis=1)
        assert np.all(out >= lo - 1e-12)
        assert np.all(out <= hi + 1e-12)

    def test_constant_field_is_exact(self):
        rng = np.random.default_rng(10)
        src = rng.uniform(0, 1, size=(15, 3))
        feats = np.full((15, 3), 4.25)
        q = rng.uniform(0, 1, size=(9, 3))
        out = wid_interpolate(q, src, feats, WIDConfig())
        assert np.array_equal(out, np.full((9, 3), 4.25))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            WIDConfig(k_neighbors=0)
        with pytest.raises(ValueError):
            WIDConfig(power=0)
        with pytest.raises(ValueError):
            WIDConfig(epsilon=0)


class TestUpsampleFeatures:
    def _proj(self, rng, d):
        return (
            Tensor(rng.normal(size=(d, d)), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
            Tensor(rng.normal(size=(d, d)), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
        )

    def test_identity_when_dense_equals_encoder(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(0, 1, size=(8, 3))
        feats = rng.normal(size=(8, 4))
        idx, w = wid_weights(pts, pts, WIDConfig())
        out = T.interp_rows(Tensor(feats), idx, w)
        assert np.array_equal(out.data, feats)

    def test_interp_stage_matches_oracle(self):
        rng = np.random.default_rng(12)
        enc = rng.uniform(0, 1, size=(4, 3))
        feats = rng.normal(size=(4, 6))
        dense = rng.uniform(0, 1, size=(8, 3))
        cfg = WIDConfig()
        idx, w = wid_weights(dense, enc, cfg)
        got = T.interp_rows(Tensor(feats), idx, w).data
        ref = wid_interpolate(dense, enc, feats, cfg)
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_shape_contract(self):
        rng = np.random.default_rng(13)
        enc = rng.uniform(0, 1, size=(64, 3))
        feats = Tensor(rng.normal(size=(64, 32)))
        dense = rng.uniform(0, 1, size=(128, 3))
        proj = self._proj(rng, 32)
        out = upsample_features(enc, feats, dense, proj, WIDConfig())
        assert out.shape == (128, 32)

    def test_differentiable_through_projection(self):
        rng = np.random.default_rng(14)
        enc = rng.uniform(0, 1, size=(6, 3))
        dense = rng.uniform(0, 1, size=(10, 3))
        feats = rng.normal(size=(6, 4))

        def build(ts):
            proj = (ts[1], ts[2], ts[3], ts[4])
            return T.sum_all(upsample_features(enc, ts[0], dense, proj, WIDConfig()))

        err = T.check_gradient(
            build,
            [feats, rng.normal(size=(4, 4)), np.zeros(4), rng.normal(size=(4, 4)), np.zeros(4)],
        )
        assert err < 1e-4
