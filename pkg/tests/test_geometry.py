import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvada.exceptions import ValidationError
from pvada.geometry import (
    PointCloud, build_voxel_grid, canonical_order, knn, normalize_unit_sphere, voxel_downsample,
)

from oracles import knn_exhaustive, voxel_hash_oracle

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
clouds = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords)


# --- PointCloud -----------------------------------------------------------


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((4, 2)), np.array([[0, 0, np.nan]]),
                                 np.array([[0, 0, np.inf]]), np.array([["a", "b", "c"]])])
def test_point_cloud_rejects_invalid_points(bad):
    with pytest.raises(ValidationError):
        PointCloud(bad)


def test_point_cloud_keeps_label():
    assert PointCloud(np.zeros((1, 3)), 3).label == 3


# --- normalize_unit_sphere -----------------------------------------------


def test_normalize_already_normalized():
    out = normalize_unit_sphere(PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]])))
    np.testing.assert_allclose(out.points, [[1, 0, 0], [-1, 0, 0]])


def test_normalize_shift_and_scale():
    out = normalize_unit_sphere(PointCloud(np.array([[2.0, 0, 0], [4.0, 0, 0]])))
    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]])


def test_normalize_single_point():
    out = normalize_unit_sphere(PointCloud(np.array([[5.0, 5.0, 5.0]])))
    np.testing.assert_array_equal(out.points, [[0, 0, 0]])


@settings(max_examples=100, deadline=None)
@given(clouds)
def test_normalize_postconditions(pts):
    out = normalize_unit_sphere(PointCloud(pts)).points
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    radius = np.linalg.norm(out, axis=1).max()
    if np.ptp(pts, axis=0).max() > 1e-6:
        assert abs(radius - 1) <= 1e-6
    else:
        assert radius <= 1 + 1e-6


def test_normalize_coincident_points_are_only_centered():
    out = normalize_unit_sphere(PointCloud(np.full((5, 3), 3.22336067))).points
    assert np.abs(out).max() < 1e-12


# --- voxel_downsample -----------------------------------------------------


def test_voxel_downsample_worked_example():
    pts = np.array([[0.01, 0, 0], [0.02, 0, 0], [0.9, 0, 0]])
    out, assignment = voxel_downsample(PointCloud(pts), 0.1)
    np.testing.assert_allclose(out.points, [[0.015, 0, 0], [0.9, 0, 0]])
    assert assignment.tolist() == [0, 0, 1]


def test_voxel_smaller_than_gaps_keeps_all_points_in_lexicographic_order():
    rng = np.random.default_rng(1)
    pts = rng.permutation(np.array([[i, j, l] for i in range(3) for j in range(2) for l in range(2)], dtype=float))
    out, assignment = voxel_downsample(PointCloud(pts), 0.5)
    assert len(out) == len(pts)
    np.testing.assert_array_equal(out.points, pts[canonical_order(pts)])
    np.testing.assert_array_equal(out.points[assignment], pts)


def test_voxel_all_identical_points():
    pts = np.tile([[0.3, -0.2, 0.7]], (5, 1))
    out, assignment = voxel_downsample(PointCloud(pts), 0.05)
    np.testing.assert_allclose(out.points, [[0.3, -0.2, 0.7]])
    assert assignment.tolist() == [0] * 5


@pytest.mark.parametrize("v", [0.0, -1.0, float("nan")])
def test_voxel_size_must_be_positive(v):
    with pytest.raises(ValidationError):
        voxel_downsample(PointCloud(np.zeros((2, 3))), v)


def test_voxel_grid_partitions_indices():
    pts = np.random.default_rng(2).uniform(-1, 1, size=(200, 3))
    grid = build_voxel_grid(PointCloud(pts), 0.3)
    members = sorted(i for idx in grid.cells.values() for i in idx)
    assert members == list(range(200))
    for cell, idx in grid.cells.items():
        expected = np.floor((pts[idx] - pts.min(axis=0)) / 0.3).astype(int)
        assert (expected == np.array(cell)).all()


def test_voxel_downsample_matches_hash_oracle_on_random_clouds():
    rng = np.random.default_rng(5)
    for _ in range(40):
        pts = rng.uniform(-1, 1, size=(rng.integers(1, 300), 3))
        v = float(rng.choice([0.05, 0.1, 0.25, 0.7]))
        out, assignment = voxel_downsample(PointCloud(pts), v)
        centroids, expected_assignment, _ = voxel_hash_oracle(pts, v)
        np.testing.assert_allclose(out.points, centroids, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(assignment, expected_assignment)


@settings(max_examples=60, deadline=None)
@given(clouds, st.sampled_from([0.05, 0.125, 0.25, 1.0]), st.integers(1, 8))
def test_voxel_count_non_increasing_for_nested_grids(pts, v, m):
    # with a shared origin, each cell of size m*v is a union of cells of size v
    n_small = len(voxel_downsample(PointCloud(pts), v)[0])
    n_large = len(voxel_downsample(PointCloud(pts), m * v)[0])
    assert n_small >= n_large


def test_voxel_count_can_grow_between_non_nested_sizes():
    # grid boundaries of unrelated sizes do not nest, so monotonicity needs integer ratios
    pts = np.array([[-0.5, 0, 0], [-4.5, 0, 0], [0, 0, 0]])
    assert len(voxel_downsample(PointCloud(pts), 1.0)[0]) == 2
    assert len(voxel_downsample(PointCloud(pts), 1.5)[0]) == 3


def test_pyramid_sizes_are_monotone_on_random_clouds():
    rng = np.random.default_rng(11)
    for _ in range(50):
        pts = rng.normal(size=(rng.integers(1, 400), 3))
        counts = [len(voxel_downsample(PointCloud(pts), 0.05 * 2 ** j)[0]) for j in range(4)]
        assert counts == sorted(counts, reverse=True)


@settings(max_examples=60, deadline=None)
@given(clouds, st.floats(0.01, 5))
def test_voxel_centroids_inside_member_bounding_box(pts, v):
    out, assignment = voxel_downsample(PointCloud(pts), v)
    for row in range(len(out)):
        members = pts[assignment == row]
        assert np.all(out.points[row] >= members.min(axis=0) - 1e-9)
        assert np.all(out.points[row] <= members.max(axis=0) + 1e-9)


# --- knn ------------------------------------------------------------------


def test_knn_worked_example():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    assert knn(pts, pts, 2).tolist() == [[0, 1], [1, 0], [2, 1]]


def test_knn_k1_returns_self():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert knn(pts, pts, 1).ravel().tolist() == list(range(20))


def test_knn_pads_with_nearest_index():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    out = knn(np.array([[0.9, 0, 0]]), ref, 3)
    assert out.tolist() == [[1, 0, 1]]


def test_knn_ties_broken_by_index():
    ref = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [5.0, 0, 0]])
    out = knn(np.zeros((1, 3)), ref, 3)
    assert out.tolist() == [[0, 1, 2]]


def test_knn_validation():
    with pytest.raises(ValidationError):
        knn(np.zeros((1, 3)), np.zeros((0, 3)), 1)
    with pytest.raises(ValidationError):
        knn(np.zeros((1, 3)), np.zeros((2, 3)), 0)


def test_knn_matches_exhaustive_search_with_duplicates():
    rng = np.random.default_rng(9)
    for _ in range(20):
        base = rng.integers(-3, 3, size=(rng.integers(2, 60), 3)).astype(float) / 2  # many exact ties
        k = int(rng.integers(1, 33))
        np.testing.assert_array_equal(knn(base, base, k), knn_exhaustive(base, base, k))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=coords),
       arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=coords),
       st.integers(1, 32))
def test_knn_property_matches_oracle(query, reference, k):
    np.testing.assert_array_equal(knn(query, reference, k), knn_exhaustive(query, reference, k))


def test_knn_decimal_grid_ties_match_oracle():
    # distances that tie in exact arithmetic but round differently per summation order
    rng = np.random.default_rng(6)
    for _ in range(20):
        pts = np.round(rng.uniform(-1, 1, size=(int(rng.integers(20, 120)), 3)), 1)
        np.testing.assert_array_equal(knn(pts, pts, 25), knn_exhaustive(pts, pts, 25))


def test_knn_chunking_does_not_change_results():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, size=(700, 3))
    full = knn(pts, pts, 8)
    parts = np.concatenate([knn(pts[i:i + 100], pts, 8) for i in range(0, 700, 100)])
    np.testing.assert_array_equal(full, parts)


# --- canonical order ------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(clouds, st.randoms(use_true_random=False))
def test_canonical_order_is_permutation_invariant(pts, rnd):
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    shuffled = pts[perm]
    np.testing.assert_array_equal(pts[canonical_order(pts)], shuffled[canonical_order(shuffled)])
