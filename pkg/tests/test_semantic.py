"""Tests for semantic querying and uncertainty post-processing."""

import math

import numpy as np
import pytest

from fusefield.errors import DomainError
from fusefield.field import DecoderParams, HeadMLP, UnifiedField
from fusefield.geometry import GridSpec
from fusefield.meshing import TriangleMesh, extract_mesh
from fusefield.scene import preset_scene, teacher_feature
from fusefield.semantic import (
    QuerySpec,
    combine_similarity,
    contrastive_score,
    contrastive_volume,
    normalize_uncertainty,
    query_for_class,
    similarity_volume,
    surface_project,
    uncertainty_volume,
)
from fusefield.volume import VoxelVolume


def constant_head(in_dim, mean_dim, logvar=0.0):
    """Head emitting activation(0) means and a fixed log-variance."""
    return HeadMLP(
        np.zeros((in_dim, 2)), np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((1, 2)),
        np.zeros((2, mean_dim)), np.zeros((1, mean_dim)),
        np.zeros((2, 1)), np.full((1, 1), float(logvar)),
    )


def passthrough_sem_head(dim, logvar=0.0, logvar_weights=None):
    """Semantic decoder whose (linear) mean head reproduces the input feature.

    The hidden relu pair [f]+ and [-f]+ carries signed features losslessly.
    ``logvar_weights`` (dim,) makes the log-variance head emit f @ w + logvar.
    """
    eye = np.eye(dim)
    w_logvar = np.zeros((2 * dim, 1))
    if logvar_weights is not None:
        w = np.asarray(logvar_weights, dtype=np.float64).reshape(dim, 1)
        w_logvar = np.vstack([w, -w])
    return HeadMLP(
        np.hstack([eye, -eye]), np.zeros((1, 2 * dim)),
        np.eye(2 * dim), np.zeros((1, 2 * dim)),
        np.vstack([eye, -eye]), np.zeros((1, dim)),
        w_logvar, np.full((1, 1), float(logvar)),
    )


def feature_field(grid, feats, sem_logvar=0.0, sem_logvar_weights=None):
    """Field whose semantic decode returns the stored per-voxel features."""
    dim = feats.shape[-1]
    decoders = DecoderParams(
        constant_head(dim, 3),
        passthrough_sem_head(dim, sem_logvar, sem_logvar_weights),
        constant_head(dim, 1),
    )
    return UnifiedField(VoxelVolume(grid, feats), decoders)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestQuerySpec:
    def test_validation(self):
        q = unit([1.0, 2.0, 3.0])
        spec = QuerySpec(q, (unit([0.0, 1.0, 0.0]),), 0.1)
        assert len(spec.negatives) == 1
        with pytest.raises(DomainError):
            QuerySpec(np.array([1.0, 2.0, 3.0]))
        with pytest.raises(DomainError):
            QuerySpec(q, (np.array([0.5, 0.0, 0.0]),))
        with pytest.raises(DomainError):
            QuerySpec(q, (unit([1.0, 1.0]),))
        with pytest.raises(DomainError):
            QuerySpec(q, (), temperature=0.0)

    def test_query_for_class_collects_other_classes_and_background(self):
        scene = preset_scene("tabletop", feature_dim=8)
        spec = query_for_class(scene, 1)
        np.testing.assert_array_equal(spec.positive, teacher_feature(1, 8, 0))
        assert len(spec.negatives) == 2  # background 0 and box class 2
        np.testing.assert_array_equal(spec.negatives[0], teacher_feature(0, 8, 0))
        np.testing.assert_array_equal(spec.negatives[1], teacher_feature(2, 8, 0))

    def test_query_for_class_adds_background_when_absent(self):
        scene = preset_scene("sphere", feature_dim=8)  # only class 1
        spec = query_for_class(scene, 1)
        assert len(spec.negatives) == 1
        np.testing.assert_array_equal(spec.negatives[0], teacher_feature(0, 8, 0))
        with pytest.raises(DomainError):
            query_for_class(scene, 7)


class TestSimilarityVolume:
    def grid(self):
        return GridSpec(np.zeros(3), 0.1, (2, 2, 1))

    def test_matching_orthogonal_and_zero_features(self):
        grid = self.grid()
        query = unit([1.0, 1.0, 0.0])
        feats = np.zeros(grid.dims + (3,))
        feats[0, 0, 0] = 2.0 * query          # parallel, non-unit
        feats[1, 0, 0] = [0.0, 0.0, -4.0]     # orthogonal
        field = feature_field(grid, feats)
        sim = similarity_volume(field, query)
        assert sim.channels == 1 and sim.grid == grid
        assert sim.data[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-12)
        assert sim.data[1, 0, 0, 0] == pytest.approx(0.0, abs=1e-12)
        assert sim.data[0, 1, 0, 0] == 0.0  # zero feature scores 0
        assert sim.data[1, 1, 0, 0] == 0.0

    def test_matches_cosine_oracle(self):
        grid = GridSpec(np.zeros(3), 0.2, (3, 2, 2))
        rng = np.random.default_rng(0)
        feats = rng.normal(size=grid.dims + (5,))
        query = unit(rng.normal(size=5))
        sim = similarity_volume(feature_field(grid, feats), query)
        for i in range(3):
            for j in range(2):
                for k in range(2):
                    f = feats[i, j, k]
                    expected = f @ query / np.linalg.norm(f)
                    assert sim.data[i, j, k, 0] == pytest.approx(expected, abs=1e-12)

    def test_validation(self):
        field = feature_field(self.grid(), np.zeros((2, 2, 1, 3)))
        with pytest.raises(DomainError):
            similarity_volume(field, np.array([2.0, 0.0, 0.0]))
        with pytest.raises(DomainError):
            similarity_volume(field, unit(np.ones(4)))


class TestContrastiveScore:
    def test_equal_similarities_give_half(self):
        assert contrastive_score(0.3, [0.3], 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_sharp_temperature_limit(self):
        assert contrastive_score(0.9, [0.1], 1e-4) == pytest.approx(1.0, abs=1e-9)

    def test_matches_scalar_formula(self):
        expected = math.exp(6.0) / (math.exp(6.0) + math.exp(4.0) + math.exp(2.0))
        assert contrastive_score(0.6, [0.4, 0.2], 0.1) == pytest.approx(expected, abs=1e-9)

    def test_shift_invariance(self):
        base = contrastive_score(0.6, [0.4, 0.2], 0.1)
        for c in (-5.0, 3.0, 700.0):
            shifted = contrastive_score(0.6 + c, [0.4 + c, 0.2 + c], 0.1)
            assert shifted == pytest.approx(base, abs=1e-12)

    def test_no_negatives_and_validation(self):
        assert contrastive_score(0.2, [], 0.1) == 1.0
        with pytest.raises(DomainError):
            contrastive_score(0.5, [0.1], 0.0)

    def test_volume_matches_scalar_loop(self):
        grid = GridSpec(np.zeros(3), 0.1, (2, 2, 2))
        rng = np.random.default_rng(1)
        feats = rng.normal(size=grid.dims + (4,))
        field = feature_field(grid, feats)
        spec = QuerySpec(unit(rng.normal(size=4)),
                         (unit(rng.normal(size=4)), unit(rng.normal(size=4))), 0.2)
        vol = contrastive_volume(field, spec)
        pos = similarity_volume(field, spec.positive)
        negs = [similarity_volume(field, n) for n in spec.negatives]
        for idx in np.ndindex(2, 2, 2):
            expected = contrastive_score(
                pos.data[idx][0], [n.data[idx][0] for n in negs], 0.2
            )
            assert vol.data[idx][0] == pytest.approx(expected, abs=1e-12)


class TestNormalizeUncertainty:
    def test_minmax_basic(self):
        np.testing.assert_allclose(
            normalize_uncertainty([0.0, 5.0, 10.0]), [0.0, 0.5, 1.0], atol=1e-15
        )

    def test_constant_maps_to_half(self):
        np.testing.assert_array_equal(normalize_uncertainty(np.full(7, 3.3)), 0.5)
        np.testing.assert_array_equal(
            normalize_uncertainty(np.full(7, 3.3), "quantile"), 0.5
        )

    def test_quantile_outlier_case(self):
        values = np.concatenate([np.arange(100.0), [1e6]])
        out = normalize_uncertainty(values, "quantile", (0.05, 0.95))
        # Q(0.05) = 5, Q(0.95) = 95 by linear interpolation on 101 values.
        assert np.quantile(np.arange(100.0), 0.05) == pytest.approx(4.95)
        assert out[100] == 1.0
        assert out[50] == pytest.approx((50 - 5) / 90, abs=1e-12)
        assert out[0] == 0.0

    def test_outlier_magnitude_invariance(self):
        base = np.concatenate([np.arange(100.0), [1e6]])
        bigger = np.concatenate([np.arange(100.0), [1e12]])
        np.testing.assert_array_equal(
            normalize_uncertainty(base, "quantile"),
            normalize_uncertainty(bigger, "quantile"),
        )

    def test_minmax_idempotent_on_unit_span(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([[0.0, 1.0], rng.random(20)])
        once = normalize_uncertainty(x)
        np.testing.assert_array_equal(normalize_uncertainty(once), once)

    def test_degenerate_clamp_falls_back_to_minmax(self):
        spike = np.zeros(100)
        spike[7] = 1.0
        out = normalize_uncertainty(spike, "quantile", (0.05, 0.95))
        np.testing.assert_array_equal(out, spike)

    def test_shape_preserved(self):
        vol = np.arange(8.0).reshape(2, 2, 2)
        out = normalize_uncertainty(vol)
        assert out.shape == (2, 2, 2)
        assert out.min() == 0.0 and out.max() == 1.0

    def test_validation(self):
        with pytest.raises(DomainError):
            normalize_uncertainty([])
        with pytest.raises(DomainError):
            normalize_uncertainty([1.0, 2.0], "median")
        with pytest.raises(DomainError):
            normalize_uncertainty([1.0, 2.0], "quantile", (0.9, 0.1))


class TestCombineSimilarity:
    def volume(self, values):
        values = np.asarray(values, dtype=np.float64)
        grid = GridSpec(np.zeros(3), 0.1, (len(values), 1, 1))
        return VoxelVolume(grid, values.reshape(-1, 1, 1, 1))

    def test_zero_uncertainty_is_identity(self):
        sim = self.volume([0.2, 0.9, 0.4])
        out = combine_similarity(sim, [self.volume([0.0, 0.0, 0.0])])
        np.testing.assert_array_equal(out.data, sim.data)

    def test_full_uncertainty_zeroes_voxel(self):
        sim = self.volume([0.2, 0.9])
        out = combine_similarity(sim, [self.volume([0.0, 1.0])])
        assert out.data[1, 0, 0, 0] == 0.0
        assert out.data[0, 0, 0, 0] == 0.2

    def test_argmax_shifts_to_confident_voxel(self):
        sim = self.volume([0.9, 0.8])
        out = combine_similarity(sim, [self.volume([0.9, 0.1])])
        np.testing.assert_allclose(out.data.ravel(), [0.09, 0.72], atol=1e-15)
        assert np.argmax(out.data) == 1

    def test_all_product_multiplies_every_volume(self):
        sim = self.volume([0.5, 1.0, 0.25])
        u1 = self.volume([0.5, 0.0, 0.2])
        u2 = self.volume([0.0, 0.5, 0.5])
        out = combine_similarity(sim, [u1, u2], "all_product")
        expected = sim.data * (1 - u1.data) * (1 - u2.data)
        np.testing.assert_allclose(out.data, expected, atol=1e-15)
        spatial = combine_similarity(sim, [u1, u2], "spatial_only")
        np.testing.assert_allclose(spatial.data, sim.data * (1 - u1.data), atol=1e-15)

    def test_uniform_uncertainty_preserves_argmax(self):
        rng = np.random.default_rng(3)
        sim = self.volume(rng.random(9))
        out = combine_similarity(sim, [self.volume(np.full(9, 0.7))])
        assert np.argmax(out.data) == np.argmax(sim.data)

    def test_validation(self):
        sim = self.volume([0.1, 0.2])
        other_grid = VoxelVolume.zeros(GridSpec(np.zeros(3), 0.1, (3, 1, 1)), 1)
        with pytest.raises(DomainError):
            combine_similarity(sim, [other_grid])
        with pytest.raises(DomainError):
            combine_similarity(sim, [self.volume([0.5, 1.5])])
        with pytest.raises(DomainError):
            combine_similarity(sim, [])
        with pytest.raises(DomainError):
            combine_similarity(sim, [self.volume([0.0, 0.0])], "mean")


class TestSurfaceProject:
    def test_constant_volume(self):
        grid = GridSpec(np.zeros(3), 0.25, (4, 4, 4))
        vol = VoxelVolume.full(grid, 1, 2.5)
        mesh = TriangleMesh(np.array([[0.3, 0.4, 0.5], [0.6, 0.2, 0.7]]), np.zeros((0, 3)))
        np.testing.assert_allclose(surface_project(vol, mesh), 2.5, atol=1e-12)

    def test_linear_field_flat_mesh(self):
        grid = GridSpec(np.zeros(3), 0.1, (5, 5, 8))
        centers = grid.voxel_centers()
        vol = VoxelVolume(grid, (3.0 * centers[..., 2] + 1.0)[..., None])
        height = 0.42
        verts = np.array([[0.2, 0.2, height], [0.3, 0.1, height], [0.25, 0.3, height]])
        mesh = TriangleMesh(verts, [[0, 1, 2]])
        np.testing.assert_allclose(
            surface_project(vol, mesh), 3.0 * height + 1.0, atol=1e-9
        )

    def test_radial_field_on_sphere_mesh(self):
        grid = GridSpec(np.array([-0.8, -0.8, -0.8]), 0.05, (32, 32, 32))
        centers = grid.voxel_centers()
        radii = np.linalg.norm(centers, axis=-1)
        sphere = VoxelVolume(grid, np.clip((radii - 0.5) / 0.15, -1, 1)[..., None])
        mesh = extract_mesh(sphere)
        values = surface_project(VoxelVolume(grid, radii[..., None]), mesh)
        assert np.max(np.abs(values - 0.5)) < grid.voxel_size

    def test_outside_vertices_clamped(self):
        grid = GridSpec(np.zeros(3), 0.1, (3, 3, 3))
        centers = grid.voxel_centers()
        vol = VoxelVolume(grid, centers[..., 0:1])  # x coordinate of centers
        mesh = TriangleMesh(np.array([[99.0, 0.15, 0.15]]), np.zeros((0, 3)))
        # Clamps to the last voxel center plane: x = 0.25.
        np.testing.assert_allclose(surface_project(vol, mesh), 0.25, atol=1e-12)

    def test_empty_mesh_and_channel_validation(self):
        grid = GridSpec(np.zeros(3), 0.1, (2, 2, 2))
        assert surface_project(VoxelVolume.zeros(grid, 1), TriangleMesh.empty()).shape == (0,)
        with pytest.raises(DomainError):
            surface_project(VoxelVolume.zeros(grid, 2), TriangleMesh.empty())


class TestUncertaintyVolume:
    def test_returns_decoded_logvar(self):
        grid = GridSpec(np.zeros(3), 0.1, (2, 1, 2))
        feats = np.random.default_rng(4).normal(size=grid.dims + (3,))
        weights = np.array([0.3, -0.2, 0.1])
        field = feature_field(grid, feats, sem_logvar=0.5, sem_logvar_weights=weights)
        vol = uncertainty_volume(field, "sem")
        expected = feats @ weights + 0.5
        np.testing.assert_allclose(vol.data[..., 0], expected, atol=1e-12)
        const = uncertainty_volume(field, "vis")
        np.testing.assert_allclose(const.data, 0.0, atol=1e-15)
