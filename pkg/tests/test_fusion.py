"""Tests for RGB-D fusion: encoder, TSDF integration, feature statistics."""

import numpy as np
import pytest

from fusefield.errors import DomainError
from fusefield.fusion import (
    DEFAULT_COUNT_CAP,
    EncoderParams,
    FusionState,
    assemble_input,
    backproject_features,
    encode_image,
    fuse_frames,
    integrate_depth,
    merge_states,
    record_assignments,
)
from fusefield.geometry import CameraIntrinsics, GridSpec, Pose, look_at
from fusefield.kernels import fusionk
from fusefield.scene import (
    ScenePrimitive,
    SyntheticScene,
    ground_truth_tsdf,
    orbit_poses,
    preset_scene,
    render_frame,
)


def small_intr(width=40, height=30, f=35.0):
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def sphere_scene():
    return preset_scene("sphere", feature_dim=8)


def orbit_frames(scene, n=8, radius=0.9, height=0.45, intr=None):
    intr = intr or small_intr()
    center = (0.0, 0.0, 0.45)
    return [render_frame(scene, p, intr) for p in orbit_poses(center, radius, height, n)]


def sphere_grid(dims=16, vs=0.05):
    half = dims * vs / 2.0
    return GridSpec(np.array([-half, -half, 0.45 - half]), vs, (dims, dims, dims))


# ---------------------------------------------------------------------------
# Oracle: per-voxel sequential TSDF fusion with explicit arithmetic matching
# the documented update rule (weight-1 running average, one frame at a time).


def oracle_tsdf_fusion(grid, frames, trunc):
    centers = grid.voxel_centers().reshape(-1, 3)
    tsdf = np.zeros(len(centers))
    weight = np.zeros(len(centers))
    for frame in frames:
        rot_t = frame.pose.rotation.T
        t = frame.pose.translation
        dx = centers[:, 0] - t[0]
        dy = centers[:, 1] - t[1]
        dz = centers[:, 2] - t[2]
        pz = rot_t[2, 0] * dx + rot_t[2, 1] * dy + rot_t[2, 2] * dz
        px = rot_t[0, 0] * dx + rot_t[0, 1] * dy + rot_t[0, 2] * dz
        py = rot_t[1, 0] * dx + rot_t[1, 1] * dy + rot_t[1, 2] * dz
        intr = frame.intr
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * px / pz + intr.cx
            v = intr.fy * py / pz + intr.cy
        ui = np.floor(u).astype(np.int64)
        vi = np.floor(v).astype(np.int64)
        ok = (
            (pz > 1e-12)
            & (ui >= 0) & (ui < intr.width)
            & (vi >= 0) & (vi < intr.height)
        )
        d = np.zeros(len(centers))
        d[ok] = frame.depth[vi[ok], ui[ok]]
        ok &= d > 0
        sdf = d - pz
        ok &= sdf > -trunc
        value = np.clip(sdf / trunc, -1.0, 1.0)
        new_tsdf = (tsdf * weight + value) / (weight + 1.0)
        tsdf = np.where(ok, new_tsdf, tsdf)
        weight = np.where(ok, weight + 1.0, weight)
    return tsdf.reshape(grid.dims), weight.reshape(grid.dims)


class TestEncoder:
    def test_identity_passthrough(self):
        rng = np.random.default_rng(0)
        rgb = rng.uniform(0, 1, size=(12, 10, 3))
        out = encode_image(EncoderParams.identity(), rgb)
        np.testing.assert_allclose(out, rgb, atol=1e-12)

    def test_constant_image_constant_interior(self):
        params = EncoderParams.create(4, np.random.default_rng(1))
        rgb = np.full((10, 12, 3), 0.4)
        out = encode_image(params, rgb)
        # Two stacked 3x3 convs -> 5x5 receptive field, so a 2-pixel border
        # feels the zero padding.
        interior = out[2:-2, 2:-2]
        spread = interior.max(axis=(0, 1)) - interior.min(axis=(0, 1))
        assert np.all(spread < 1e-12)

    def test_shift_equivariance(self):
        params = EncoderParams.create(4, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(14, 16, 3))
        shifted = np.roll(img, 1, axis=1)
        a = encode_image(params, img)
        b = encode_image(params, shifted)
        # Interior excludes the two columns affected by zero padding wrap.
        diff = np.abs(b[2:-2, 3:-2] - a[2:-2, 2:-3])
        assert diff.max() < 1e-9

    def test_rejects_out_of_range(self):
        params = EncoderParams.identity()
        with pytest.raises(DomainError):
            encode_image(params, np.full((4, 4, 3), 1.5))


class TestIntegrateDepth:
    def make_wall_frame(self):
        wall = ScenePrimitive.plane((0.0, 0.0, -1.0), -2.0, (0.5, 0.5, 0.5), 0)
        scene = SyntheticScene((wall,), (-3, -3, -1), (3, 3, 4), feature_dim=8)
        intr = small_intr(64, 48, 55.0)
        return render_frame(scene, Pose.identity(), intr)

    def test_single_voxel_in_front_of_surface(self):
        frame = self.make_wall_frame()
        grid = GridSpec(np.array([-0.05, -0.05, 1.9]), 0.1, (1, 1, 1))
        state = FusionState.empty(grid, 2, trunc=0.15)
        out = integrate_depth(state, frame)
        assert out.tsdf.data[0, 0, 0, 0] == pytest.approx(1.0 / 3.0, abs=1e-9)
        assert out.tsdf_weight.data[0, 0, 0, 0] == 1.0

    def test_voxel_behind_truncation_untouched(self):
        frame = self.make_wall_frame()
        grid = GridSpec(np.array([-0.05, -0.05, 2.15]), 0.1, (1, 1, 1))
        state = FusionState.empty(grid, 2, trunc=0.15)
        out = integrate_depth(state, frame)
        assert out.tsdf_weight.data[0, 0, 0, 0] == 0.0
        assert out.tsdf.data[0, 0, 0, 0] == 0.0

    def test_orbit_fusion_matches_brute_force_oracle(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=8)
        grid = sphere_grid(32, 0.025)
        trunc = 0.1
        state = FusionState.empty(grid, 2, trunc)
        for f in frames:
            state = integrate_depth(state, f)
        oracle_tsdf, oracle_w = oracle_tsdf_fusion(grid, frames, trunc)
        np.testing.assert_array_equal(state.tsdf.data[..., 0], oracle_tsdf)
        np.testing.assert_array_equal(state.tsdf_weight.data[..., 0], oracle_w)

    def test_fused_tsdf_tracks_ground_truth(self):
        # Unweighted per-frame averaging inflates |sdf| by ~1/cos(incidence),
        # so the accuracy bound applies to captures with mostly face-on views.
        wall = ScenePrimitive.plane((0.0, 0.0, -1.0), -2.0, (0.5, 0.5, 0.5), 0)
        scene = SyntheticScene((wall,), (-3, -3, -1), (3, 3, 4), feature_dim=8)
        intr = small_intr(64, 48, 55.0)
        eyes = [(0, 0, 0), (0.25, 0, 0), (-0.25, 0, 0), (0, 0.2, 0), (0, -0.2, 0)]
        frames = [render_frame(scene, look_at(e, (0, 0, 2)), intr) for e in eyes]
        trunc = 0.15
        grid = GridSpec(np.array([-0.3, -0.3, 1.7]), 0.05, (12, 12, 8))
        state = FusionState.empty(grid, 2, trunc)
        for f in frames:
            state = integrate_depth(state, f)
        gt = ground_truth_tsdf(scene, grid, trunc).data[..., 0]
        observed = (state.tsdf_weight.data[..., 0] > 0) & (np.abs(gt) < 1.0)
        assert observed.sum() > 50
        mae = np.mean(np.abs(state.tsdf.data[..., 0][observed] - gt[observed]))
        assert mae < 0.1

    def test_tsdf_stays_in_unit_range(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=4)
        state = FusionState.empty(sphere_grid(), 2, 0.15)
        for f in frames:
            state = integrate_depth(state, f)
        assert np.all(state.tsdf.data >= -1.0) and np.all(state.tsdf.data <= 1.0)


class TestBackprojectFeatures:
    def test_single_pixel_single_voxel(self):
        intr = CameraIntrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
        depth = np.array([[1.0]])
        rgb = np.zeros((1, 1, 3))
        feats = np.zeros((1, 1, 8))
        frame_pose = Pose.identity()
        from fusefield.scene import FrameObservation

        frame = FrameObservation(rgb, depth, frame_pose, intr, feats)
        grid = GridSpec(np.array([-0.1, -0.1, 0.5]), 0.2, (1, 1, 1))
        state = FusionState.empty(grid, 3, trunc=0.1)
        f = np.zeros((1, 1, 3))
        f[0, 0] = (0.5, -1.0, 2.0)
        out = backproject_features(state, frame, f)
        assert out.count.data[0, 0, 0, 0] == 1.0
        np.testing.assert_allclose(out.feat_mean.data[0, 0, 0], (0.5, -1.0, 2.0))
        np.testing.assert_array_equal(out.feat_m2.data[0, 0, 0], np.zeros(3))

    def test_welford_by_hand(self):
        mean = np.zeros((1, 1))
        m2 = np.zeros((1, 1))
        count = np.zeros(1)
        fusionk.welford_loop(
            np.zeros(3, dtype=np.int64),
            np.array([[1.0], [2.0], [3.0]]),
            mean, m2, count,
        )
        assert count[0] == 3.0
        assert mean[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert m2[0, 0] == pytest.approx(2.0, abs=1e-12)  # population var 2/3

    def test_full_frame_matches_two_pass_oracle(self):
        scene = sphere_scene()
        intr = small_intr()
        frame = orbit_frames(scene, n=1, intr=intr)[0]
        grid = sphere_grid(16, 0.05)
        state = FusionState.empty(grid, 4, trunc=0.15)
        params = EncoderParams.create(4, np.random.default_rng(5))
        feat_map = encode_image(params, frame.rgb)
        out = backproject_features(state, frame, feat_map)

        pixel_rows, voxel_ids = record_assignments(grid, frame, 0.15)
        feats = feat_map.reshape(-1, 4)[pixel_rows]
        nvox = int(np.prod(grid.dims))
        counts = np.zeros(nvox)
        np.add.at(counts, voxel_ids, 1.0)
        sums = np.zeros((nvox, 4))
        np.add.at(sums, voxel_ids, feats)
        mean = sums / np.maximum(counts, 1.0)[:, None]
        dev = feats - mean[voxel_ids]
        m2 = np.zeros((nvox, 4))
        np.add.at(m2, voxel_ids, dev * dev)

        np.testing.assert_allclose(
            out.feat_mean.data.reshape(nvox, 4), mean, atol=1e-10
        )
        np.testing.assert_allclose(out.feat_m2.data.reshape(nvox, 4), m2, atol=1e-10)
        np.testing.assert_array_equal(out.count.data.reshape(nvox), counts)

    def test_counts_are_integers_and_m2_nonnegative(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=3)
        params = EncoderParams.create(2, np.random.default_rng(6))
        state = fuse_frames(sphere_grid(), frames, params, trunc=0.15)
        counts = state.count.data
        np.testing.assert_array_equal(counts, np.round(counts))
        assert np.all(counts >= 0)
        assert np.all(state.feat_m2.data >= -1e-12)


class TestMergeStates:
    def fused(self, frames, c_e=2):
        params = EncoderParams.create(c_e, np.random.default_rng(7))
        return fuse_frames(sphere_grid(), frames, params, trunc=0.15), params

    def test_merge_with_empty_is_identity(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=3)
        state, params = self.fused(frames)
        empty = FusionState.empty(sphere_grid(), 2, 0.15)
        for merged in (merge_states(state, empty), merge_states(empty, state)):
            np.testing.assert_array_equal(merged.feat_mean.data, state.feat_mean.data)
            np.testing.assert_array_equal(merged.feat_m2.data, state.feat_m2.data)
            np.testing.assert_array_equal(merged.count.data, state.count.data)
            np.testing.assert_array_equal(merged.tsdf.data, state.tsdf.data)
            np.testing.assert_array_equal(merged.tsdf_weight.data, state.tsdf_weight.data)

    def test_merge_symmetry(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=4)
        params = EncoderParams.create(2, np.random.default_rng(8))
        a = fuse_frames(sphere_grid(), frames[:2], params, trunc=0.15)
        b = fuse_frames(sphere_grid(), frames[2:], params, trunc=0.15)
        ab = merge_states(a, b)
        ba = merge_states(b, a)
        np.testing.assert_allclose(ab.feat_mean.data, ba.feat_mean.data, atol=1e-10)
        np.testing.assert_allclose(ab.feat_m2.data, ba.feat_m2.data, atol=1e-10)
        np.testing.assert_array_equal(ab.count.data, ba.count.data)
        np.testing.assert_allclose(ab.tsdf.data, ba.tsdf.data, atol=1e-10)

    def test_split_merge_equals_sequential(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=8)
        params = EncoderParams.create(2, np.random.default_rng(9))
        grid = sphere_grid()
        sequential = fuse_frames(grid, frames, params, trunc=0.15)
        first = fuse_frames(grid, frames[:4], params, trunc=0.15)
        second = fuse_frames(grid, frames[4:], params, trunc=0.15)
        merged = merge_states(first, second)
        np.testing.assert_allclose(
            merged.feat_mean.data, sequential.feat_mean.data, atol=1e-9
        )
        np.testing.assert_allclose(merged.feat_m2.data, sequential.feat_m2.data, atol=1e-9)
        np.testing.assert_array_equal(merged.count.data, sequential.count.data)
        np.testing.assert_allclose(merged.tsdf.data, sequential.tsdf.data, atol=1e-9)
        np.testing.assert_allclose(
            merged.tsdf_weight.data, sequential.tsdf_weight.data, atol=1e-9
        )

    def test_permutation_invariance(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=5)
        params = EncoderParams.create(2, np.random.default_rng(10))
        grid = sphere_grid()
        a = fuse_frames(grid, frames, params, trunc=0.15)
        order = [3, 0, 4, 1, 2]
        b = fuse_frames(grid, [frames[i] for i in order], params, trunc=0.15)
        np.testing.assert_allclose(a.feat_mean.data, b.feat_mean.data, atol=1e-9)
        np.testing.assert_allclose(a.feat_m2.data, b.feat_m2.data, atol=1e-9)
        np.testing.assert_array_equal(a.count.data, b.count.data)
        np.testing.assert_allclose(a.tsdf.data, b.tsdf.data, atol=1e-9)

    def test_grid_mismatch_rejected(self):
        a = FusionState.empty(sphere_grid(16), 2, 0.15)
        b = FusionState.empty(sphere_grid(8), 2, 0.15)
        with pytest.raises(DomainError):
            merge_states(a, b)


class TestAssembleInput:
    def test_empty_state_channels(self):
        grid = sphere_grid(8)
        state = FusionState.empty(grid, 4, 0.15)
        vol = assemble_input(state)
        assert vol.channels == 4 + 3
        np.testing.assert_array_equal(vol.data[..., :4], 0.0)
        np.testing.assert_array_equal(vol.data[..., 4], 1.0)  # free-space prior
        np.testing.assert_array_equal(vol.data[..., 5], 0.0)  # count channel
        np.testing.assert_array_equal(vol.data[..., 6], 0.0)  # variance channel

    def test_single_observation_has_zero_variance(self):
        grid = GridSpec(np.array([-0.1, -0.1, 0.5]), 0.2, (1, 1, 1))
        state = FusionState.empty(grid, 2, 0.1)
        state.count.data[0, 0, 0, 0] = 1.0
        state.feat_m2.data[0, 0, 0] = 0.0
        state.feat_mean.data[0, 0, 0] = (0.3, 0.7)
        vol = assemble_input(state)
        assert vol.data[0, 0, 0, 2] == 1.0  # no depth weight -> free space
        assert vol.data[0, 0, 0, 3] == pytest.approx(
            np.log1p(1.0) / np.log1p(DEFAULT_COUNT_CAP)
        )
        assert vol.data[0, 0, 0, 4] == 0.0

    def test_matches_hand_assembly(self):
        scene = sphere_scene()
        frames = orbit_frames(scene, n=3)
        params = EncoderParams.create(2, np.random.default_rng(11))
        state = fuse_frames(sphere_grid(), frames, params, trunc=0.15)
        cap = 16
        vol = assemble_input(state, count_cap=cap)
        count = state.count.data[..., 0]
        expected_feat = state.feat_mean.data
        expected_tsdf = np.where(
            state.tsdf_weight.data[..., 0] > 0, state.tsdf.data[..., 0], 1.0
        )
        expected_count = np.log1p(count) / np.log1p(cap)
        expected_var = state.feat_m2.data.mean(axis=3) / np.maximum(count, 1.0)
        np.testing.assert_array_equal(vol.data[..., :2], expected_feat)
        np.testing.assert_array_equal(vol.data[..., 2], expected_tsdf)
        np.testing.assert_array_equal(vol.data[..., 3], expected_count)
        np.testing.assert_allclose(vol.data[..., 4], expected_var, atol=1e-12)

    def test_count_cap_validated(self):
        state = FusionState.empty(sphere_grid(8), 2, 0.15)
        with pytest.raises(DomainError):
            assemble_input(state, count_cap=0)
