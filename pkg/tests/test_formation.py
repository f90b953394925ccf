import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvdepth import formation, warp
from mvdepth.formation import FormationParams
from mvdepth.scene_io import CameraRig, DepthImage, SceneSpec


class TestQuantizationStep:
    def test_byte_range(self):
        assert formation.quantization_step_for_bits((0, 256), 8) == 1.0

    def test_one_bit(self):
        assert formation.quantization_step_for_bits((0, 1), 1) == 0.5

    @pytest.mark.parametrize("rng_, bits", [((1.0, 1.0), 8), ((2.0, 1.0), 8), ((0, 1), 0)])
    def test_rejects(self, rng_, bits):
        with pytest.raises(ValueError):
            formation.quantization_step_for_bits(rng_, bits)

    def test_level_count_on_lattice(self):
        # the lattice is {kQ}; a closed range spanning 2^B steps touches 2^B + 1 levels,
        # the half-open interior [lo + Q/2, hi - Q/2) exactly 2^B
        lo, hi = 1202.33, 1423.02
        Q = formation.quantization_step_for_bits((lo, hi), 8)
        closed = np.unique(formation.quantize(np.linspace(lo, hi, 200001), Q))
        assert len(closed) in (256, 257)
        lo_al = np.round(lo / Q) * Q
        hi_al = lo_al + 256 * Q
        inner = np.linspace(lo_al - Q / 2 + 1e-9, hi_al - Q / 2 - 1e-9, 200001)
        assert len(np.unique(formation.quantize(inner, Q))) == 256
        assert len(np.unique(formation.quantize(np.linspace(lo_al, hi_al, 200001), Q))) == 257


class TestSimulate:
    def test_lattice_fixed_point(self):
        Q = 0.25
        clean = DepthImage.full(np.arange(1, 41, dtype=float).reshape(4, 10) * Q)
        out = formation.simulate_observation(clean, FormationParams(Q, 0.0, 1))
        np.testing.assert_array_equal(out.values, clean.values)

    @given(st.floats(0.01, 3.0), st.integers(0, 2**31 - 1))
    def test_rounding_bound_and_lattice(self, Q, seed):
        vals = np.random.default_rng(seed).uniform(10.0, 50.0, size=(3, 5))
        out = formation.simulate_observation(DepthImage.full(vals), FormationParams(Q, 0.0, seed))
        assert np.all(np.abs(out.values - vals) <= Q / 2 + 1e-9)
        k = out.values / Q
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)

    def test_noise_mean_statistical(self):
        clean = DepthImage.full(np.full((400, 400), 500.0))
        out = formation.simulate_observation(clean, FormationParams(1.0, 50.0, 3))
        diff = out.values - clean.values
        assert abs(diff.mean()) <= 3 * np.sqrt(50.0) / np.sqrt(diff.size)
        # rounding adds Q^2/12 to the variance
        assert diff.var() == pytest.approx(50.0 + 1.0 / 12, rel=0.02)

    def test_deterministic(self):
        clean = DepthImage.full(np.full((20, 20), 30.0))
        a = formation.simulate_observation(clean, FormationParams(0.5, 10.0, 9))
        b = formation.simulate_observation(clean, FormationParams(0.5, 10.0, 9))
        c = formation.simulate_observation(clean, FormationParams(0.5, 10.0, 10))
        assert a.values.tobytes() == b.values.tobytes()
        assert a.values.tobytes() != c.values.tobytes()

    def test_negative_values_masked(self):
        clean = DepthImage.full(np.full((50, 50), 1.0))
        out = formation.simulate_observation(clean, FormationParams(0.1, 25.0, 0))
        assert not out.mask.all()
        assert np.all(out.values[~out.mask] == 0.0)
        assert np.all(out.values[out.mask] > 0.0)

    def test_invalid_input_stays_invalid(self):
        mask = np.ones((4, 4), dtype=bool)
        mask[1, 2] = False
        clean = DepthImage(np.full((4, 4), 10.0), mask)
        out = formation.simulate_observation(clean, FormationParams(1.0, 1.0, 0))
        assert not out.mask[1, 2]

    @pytest.mark.parametrize("kw", [dict(Q=0.0, sigma_n2=1.0), dict(Q=1.0, sigma_n2=-1.0)])
    def test_param_validation(self, kw):
        with pytest.raises(ValueError):
            FormationParams(**kw)


class TestRender:
    def test_fronto_plane(self, small_rig):
        scene = formation.make_scene(SceneSpec(kind="fronto", z0=50.0), small_rig)
        left, right = formation.render_scene_pair(scene)
        np.testing.assert_allclose(left.values, 50.0)
        np.testing.assert_allclose(right.values, 50.0, rtol=1e-12)
        assert left.mask.all() and right.mask.all()

    def test_fronto_disparity(self, small_rig):
        c = 50.0
        scene = formation.make_scene(SceneSpec(kind="fronto", z0=c), small_rig)
        left, _ = formation.render_scene_pair(scene)
        # the same 3-D point: left column u, right column u - fD/c
        u = 20
        X = (u - small_rig.cx) * c / small_rig.f
        u_r = small_rig.f * (X - small_rig.D) / c + small_rig.cx
        assert u - u_r == pytest.approx(small_rig.fD / c)

    def test_slanted_plane_matches_ray_intersection(self, small_rig):
        spec = SceneSpec(kind="slanted", z0=60.0, normal=(0.3, -0.1, -1.0))
        _, right = formation.render_scene_pair(formation.make_scene(spec, small_rig))
        n = np.asarray(spec.normal) / np.linalg.norm(spec.normal)
        r = small_rig
        for v in range(r.height):
            for i in range(r.width):
                d = np.array([(i - r.cx) / r.f, (v - r.cy) / r.f, 1.0])
                t = (n[2] * spec.z0 - n[0] * r.D) / (n @ d)
                assert right.values[v, i] == pytest.approx(t, rel=1e-9)

    def test_zero_baseline(self):
        rig = CameraRig(100.0, 0.0, 5.0, 5.0, 10, 10)
        left, right = formation.render_scene_pair(formation.make_scene(SceneSpec(z0=80.0), rig))
        np.testing.assert_array_equal(left.values, right.values)

    def test_warp_consistency(self, rig):
        # smooth scene: warping the left rows reproduces the right rows within 2%
        spec = SceneSpec(kind="slanted", z0=1300.0, normal=(0.2, 0.1, -1.0))
        left, right = formation.render_scene_pair(formation.make_scene(spec, rig))
        cfg = warp.WarpConfig(sigma_s=0.5, normalization_mode=warp.EXACT)
        for v in range(0, rig.height, 9):
            g = warp.apply_warp(left.values[v], rig, cfg)
            cov = ~warp.uncovered_rows(left.values[v], rig, cfg)
            core = cov.copy()
            core[:3] = core[-3:] = False  # partial windows at the row ends
            rel = np.abs(g - right.values[v])[core] / right.values[v][core]
            assert rel.max() <= 0.02

    def test_unknown_kind(self, rig):
        with pytest.raises(ValueError):
            formation.make_scene(SceneSpec(kind="sphere"), rig)

    def test_depth_range(self, rig):
        left, right = formation.render_scene_pair(formation.make_scene(SceneSpec(), rig))
        lo, hi = formation.scene_depth_range(left, right)
        assert lo == min(left.values.min(), right.values.min())
        assert hi == max(left.values.max(), right.values.max())
