import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mvdepth import formation, graph
from mvdepth.scene_io import SceneSpec


def _rand_features(rng, n):
    F = rng.normal(size=(n, graph.N_FEATURES))
    F[:, :3] /= np.linalg.norm(F[:, :3], axis=1, keepdims=True)
    return F


def _random_pd(rng, F=6):
    A = rng.normal(size=(F, F))
    M = A @ A.T + 0.1 * np.eye(F)
    return M * F / np.trace(M)


class TestFeatures:
    def _rows(self, rig, spec, i):
        left, _ = formation.render_scene_pair(formation.make_scene(spec, rig))
        return left.values[i - 2:i], left.values[i]

    def test_fronto_plane_normals(self, rig):
        window, cur = self._rows(rig, SceneSpec(kind="fronto", z0=1000.0), 10)
        fm = graph.compute_features(10, window, cur, rig, 100.0)
        np.testing.assert_allclose(fm.values[:, :3], [[0, 0, 1]] * rig.width, atol=1e-6)
        assert not fm.degenerate.any()

    def test_slanted_plane_normals(self, rig):
        spec = SceneSpec(kind="slanted", z0=1000.0, normal=(0.3, -0.2, -1.0))
        window, cur = self._rows(rig, spec, 20)
        fm = graph.compute_features(20, window, cur, rig, 100.0)
        n = np.asarray(spec.normal) / np.linalg.norm(spec.normal)
        n = n if n[2] >= 0 else -n
        np.testing.assert_allclose(fm.values[:, :3], np.tile(n, (rig.width, 1)), atol=1e-6)
        # adjacent pixels on one plane share their normal feature
        np.testing.assert_allclose(fm.values[5, :3], fm.values[6, :3], atol=1e-9)

    def test_unit_normals_and_layout(self, rig, rng):
        cur = 1000 + rng.normal(0, 5, rig.width)
        window = 1000 + rng.normal(0, 5, (2, rig.width))
        fm = graph.compute_features(7, window, cur, rig, 250.0)
        assert fm.values.shape == (rig.width, 6)
        np.testing.assert_allclose(np.linalg.norm(fm.values[:, :3], axis=1), 1.0, atol=1e-6)
        assert np.all(fm.values[:, 2] >= 0)
        np.testing.assert_allclose(fm.values[:, 3], cur / 250.0)
        np.testing.assert_allclose(fm.values[:, 4], 7 / rig.height)
        np.testing.assert_allclose(fm.values[:, 5], np.arange(rig.width) / rig.width)

    def test_single_row_is_degenerate(self, rig):
        # no rows above: each neighbourhood is three collinear points
        fm = graph.compute_features(0, np.zeros((0, rig.width)), np.full(rig.width, 900.0), rig, 1.0)
        assert fm.degenerate.all()
        np.testing.assert_array_equal(fm.values[:, :3], [[0, 0, 1]] * rig.width)

    def test_invalid_neighbours_skipped(self, rig):
        window, cur = self._rows(rig, SceneSpec(kind="fronto", z0=1000.0), 10)
        cur = cur.copy()
        cur[4] = 1e6  # corrupt but masked out
        mask = np.ones(rig.width, dtype=bool)
        mask[4] = False
        fm = graph.compute_features(10, window, cur, rig, 1.0, current_mask=mask)
        np.testing.assert_allclose(fm.values[3, :3], [0, 0, 1], atol=1e-6)


class TestDistanceAndWeight:
    def test_same_point(self, rng):
        f = rng.normal(size=6)
        assert graph.feature_distance(f, f, _random_pd(rng)) == 0.0

    def test_identity_metric(self, rng):
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert graph.feature_distance(a, b, np.eye(6)) == pytest.approx(np.sum((a - b) ** 2))

    def test_quadratic_expansion(self, rng):
        a, b = rng.normal(size=6), rng.normal(size=6)
        M = _random_pd(rng)
        d = a - b
        ref = sum(d[p] * M[p, q] * d[q] for p in range(6) for q in range(6))
        assert graph.feature_distance(a, b, M) == pytest.approx(ref, rel=1e-12)

    def test_weights(self):
        assert graph.edge_weight(0.0) == 1.0
        assert graph.edge_weight(math.log(2)) == pytest.approx(0.5)
        w = graph.edge_weight(np.linspace(0, 50, 200))
        assert np.all(np.diff(w) < 0) and np.all(w > 0) and np.all(w <= 1)


class TestLaplacian:
    def test_two_nodes(self, rng):
        F = _rand_features(rng, 2)
        w = math.exp(-graph.feature_distance(F[0], F[1], np.eye(6)))
        L = graph.build_laplacian(F, np.eye(6), 4).L.toarray()
        np.testing.assert_allclose(L, [[w, -w], [-w, w]], rtol=1e-14)

    def test_pairwise_sum(self, rng):
        n, T = 30, 4
        F = _rand_features(rng, n)
        M = _random_pd(rng)
        x = rng.normal(size=n)
        lap = graph.build_laplacian(F, M, T)
        ref = sum(math.exp(-graph.feature_distance(F[i], F[j], M)) * (x[i] - x[j]) ** 2
                  for i in range(n) for j in range(i + 1, min(n, i + T + 1)))
        assert lap.quad(x) == pytest.approx(ref, rel=1e-12)

    def test_band_structure(self, rng):
        L = graph.build_laplacian(_rand_features(rng, 20), np.eye(6), 3).L.toarray()
        i, j = np.nonzero(L)
        assert np.abs(i - j).max() == 3
        assert np.all(L[~np.eye(20, dtype=bool)] <= 0)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_null_space_and_psd(self, seed, T):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        lap = graph.build_laplacian(_rand_features(rng, n), _random_pd(rng), T)
        L = lap.L.toarray()
        np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(L, L.T, atol=0)
        assert lap.quad(np.full(n, 3.7)) == pytest.approx(0.0, abs=1e-9)
        for _ in range(10):
            x = rng.normal(size=n)
            assert lap.quad(x) >= -1e-9 * (x @ x)

    def test_permutation(self, rng):
        n = 15
        L = graph.build_laplacian(_rand_features(rng, n), np.eye(6), 4).L.toarray()
        perm = rng.permutation(n)
        Pi = np.eye(n)[perm]
        L_pi = Pi @ L @ Pi.T
        x = rng.normal(size=n)
        assert (Pi @ x) @ L_pi @ (Pi @ x) == pytest.approx(x @ L @ x, rel=1e-12)

    def test_inactive_pixels_lose_edges(self, rng):
        n = 12
        active = np.ones(n, dtype=bool)
        active[5] = False
        L = graph.build_laplacian(_rand_features(rng, n), np.eye(6), 4, active=active).L.toarray()
        assert np.all(L[5] == 0) and np.all(L[:, 5] == 0)
        np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-12)


def _training(rng, rows=5, n=40):
    out = []
    for _ in range(rows):
        F = _rand_features(rng, n) * rng.uniform(0.1, 1.0, 6)
        F[:, :3] /= np.linalg.norm(F[:, :3], axis=1, keepdims=True)
        x = 100 + np.cumsum(rng.normal(size=n)) + 5 * F[:, 3]
        out.append((x, F, np.ones(n, dtype=bool)))
    return out


class TestProjection:
    @given(hnp.arrays(float, 6, elements=st.floats(-10, 10)), st.floats(1e-6, 0.5))
    def test_shifted_simplex(self, v, floor):
        out = graph._shifted_simplex(v, 6.0, floor)
        assert out.sum() == pytest.approx(6.0, abs=1e-9)
        assert out.min() >= floor - 1e-12

    def test_simplex_matches_qp(self, rng):
        from scipy.optimize import minimize

        v = rng.normal(size=6) * 3
        out = graph._shifted_simplex(v, 6.0, 0.01)
        res = minimize(lambda z: np.sum((z - v) ** 2), np.full(6, 1.0), method="SLSQP",
                       bounds=[(0.01, None)] * 6,
                       constraints=[{"type": "eq", "fun": lambda z: z.sum() - 6.0}],
                       options={"ftol": 1e-14, "maxiter": 500})
        np.testing.assert_allclose(out, res.x, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_project_metric_feasible(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(6, 6)) * 3
        M = graph.project_metric(A, 6.0, 1e-6)
        assert np.array_equal(M, M.T) or np.abs(M - M.T).max() <= 1e-12
        assert np.trace(M) == pytest.approx(6.0, abs=1e-9)
        assert np.linalg.eigvalsh(M).min() >= 1e-6


class TestLearnMetric:
    def test_constant_rows(self, rng):
        F = _rand_features(rng, 20)
        M0 = _random_pd(rng)
        res = graph.learn_metric([(np.full(20, 5.0), F)], M0)
        assert res.no_information
        np.testing.assert_array_equal(res.M, M0)

    @pytest.mark.parametrize("seed", range(5))
    def test_feasible_and_descending(self, seed):
        rng = np.random.default_rng(seed)
        training = _training(rng)
        res = graph.learn_metric(training)
        M = res.M
        assert np.abs(M - M.T).max() <= 1e-12
        assert np.trace(M) == pytest.approx(6.0, abs=1e-9)
        assert np.linalg.eigvalsh(M).min() >= 1e-6 * np.trace(M) / 6
        assert np.all(np.diff(res.history) <= 0)
        assert graph.glr_objective(M, training, 4) <= graph.glr_objective(np.eye(6), training, 4)
        assert res.history[-1] == pytest.approx(graph.glr_objective(M, training, 4), rel=1e-12)

    def test_two_feature_toy_matches_grid_search(self, rng):
        n = 60
        F = rng.uniform(0, 1, size=(n, 2))
        x = 3.0 * F[:, 0]  # signal is a function of feature 1 only
        training = [(x, F, np.ones(n, dtype=bool))]
        res = graph.learn_metric(training, np.eye(2), graph.GraphConfig(T=4))
        grid = np.arange(0.0, 2.0 + 1e-9, 0.05)
        vals = [graph.glr_objective(np.diag([m, 2.0 - m]), training, 4) for m in grid]
        m_best = grid[int(np.argmin(vals))]
        assert (res.M[0, 0] > res.M[1, 1]) == (m_best > 2.0 - m_best)
        assert res.M[0, 0] > res.M[1, 1]

    def test_masked_pairs_ignored(self, rng):
        training = _training(rng, rows=1)
        x, F, mask = training[0]
        x2 = x.copy()
        x2[7] = 1e6
        m2 = mask.copy()
        m2[7] = False
        _, c2 = graph._pairs([(x2, F, m2)], 4)
        assert c2.max() < 1e5
        assert len(c2) < len(graph._pairs([(x, F, mask)], 4)[1])
