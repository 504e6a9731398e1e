"""
Test Procrustes, nearest-neighbor correspondence and ICP alignment of embeddings

OVERALL TEST SUITE PURPOSE:
- Verify the orthogonal Procrustes solve recovers rotations and reflections
- Check nearest-reference lookup is exact and breaks ties by lowest index
- Check ICP aligns a transformed embedding back onto its reference
- Check the N x 4 feature matrices for every ablation mode

WHY THESE TESTS ARE REQUIRED:
- Eigenvector signs and rotations are arbitrary per subject; without alignment
  spectral coordinates are not comparable across the cohort
"""
import numpy as np
import pytest

from csg.errors import DataValidationError, DegenerateAlignmentError
from csg.spectral_alignment import (
    AlignmentConfig,
    build_feature_matrix,
    icp_align,
    nearest_reference,
    procrustes_transform,
    spectral_feature_scale,
)
from csg.spectral_embedding import SpectralEmbedding
from csg.surface_graph import build_graph
from ..utils.test_helpers import CsgTestHelper


def _moved(embedding: SpectralEmbedding, q: np.ndarray) -> SpectralEmbedding:
    return SpectralEmbedding(embedding.eigenvalues, embedding.eigenvectors @ q, embedding.coordinates @ q)


@pytest.mark.parametrize("reflect", [False, True])
def test_procrustes_recovers_orthogonal_map(reflect):
    helper = CsgTestHelper(seed=11)
    source = helper.rng.normal(size=(20, 3))
    q = helper.random_orthogonal(3, reflect=reflect)

    rotation = procrustes_transform(source, source @ q)

    np.testing.assert_allclose(rotation, q, atol=1e-10)
    assert np.linalg.det(rotation) == pytest.approx(-1.0 if reflect else 1.0)


def test_procrustes_of_identical_sets_is_identity():
    source = CsgTestHelper(seed=2).rng.normal(size=(10, 3))
    np.testing.assert_allclose(procrustes_transform(source, source), np.eye(3), atol=1e-12)


def test_procrustes_rank_deficient_configuration():
    """
    WHAT: All source points on one line.

    WHY: A rank-deficient cross-covariance leaves the rotation undetermined;
         returning an arbitrary completion would mislead the caller.

    EXPECTED: DegenerateAlignmentError carrying the singular values
    """
    line = np.outer(np.arange(1.0, 6.0), [1.0, 2.0, 3.0])

    with pytest.raises(DegenerateAlignmentError) as excinfo:
        procrustes_transform(line, line)
    assert len(excinfo.value.singular_values) == 3


def test_procrustes_needs_d_pairs():
    with pytest.raises(DataValidationError):
        procrustes_transform(np.eye(3)[:2], np.eye(3)[:2])


def test_nearest_reference_breaks_ties_by_lowest_index():
    reference = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    points = np.array([[1.0, 0.0], [0.5, 0.0], [1.9, 0.0]])

    exhaustive = nearest_reference(points, reference)
    tree_based = nearest_reference(points, reference, exhaustive_threshold=0)

    np.testing.assert_array_equal(exhaustive, [1, 0, 3])
    np.testing.assert_array_equal(tree_based, [1, 0, 3])


def test_kd_tree_and_exhaustive_lookups_agree():
    rng = CsgTestHelper(seed=4).rng
    reference = rng.normal(size=(400, 3))
    points = rng.normal(size=(250, 3))

    a, da = nearest_reference(points, reference, return_distances=True)
    b, db = nearest_reference(points, reference, exhaustive_threshold=10, return_distances=True)

    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(da, db, rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kd_tree_ties_beyond_fetched_neighbors_match_exhaustive(seed):
    """
    WHAT: A reference point duplicated 11 times (one low index, ten high indices)
          in a cloud of 6000, queried from just off the duplicate.

    WHY: The KD-tree fetches only a handful of neighbors; when all of them tie
         the lowest tied index may lie beyond them.

    EXPECTED: the tree lookup returns the same indices as the exhaustive scan
    """
    rng = CsgTestHelper(seed=seed).rng
    reference = rng.normal(size=(6000, 3))
    site = np.array([4.0, -3.0, 5.0])
    reference[7] = site
    reference[5990:] = site
    offsets = rng.normal(size=(5, 3))
    points = site + 1e-3 * offsets / np.linalg.norm(offsets, axis=1, keepdims=True)

    exhaustive = nearest_reference(points, reference, exhaustive_threshold=10 ** 9)
    tree_based = nearest_reference(points, reference, exhaustive_threshold=0)

    np.testing.assert_array_equal(exhaustive, np.full(5, 7))
    np.testing.assert_array_equal(tree_based, exhaustive)


def test_nearest_reference_dimension_mismatch():
    with pytest.raises(DataValidationError):
        nearest_reference(np.zeros((3, 2)), np.zeros((3, 3)))


def test_self_alignment_is_exact_identity():
    embedding = CsgTestHelper(seed=5).random_embedding()

    result, aligned = icp_align(embedding, embedding)

    np.testing.assert_array_equal(result.rotation, np.eye(3))
    assert result.mean_distance == 0.0
    assert result.iterations == 1
    assert result.converged
    assert aligned.aligned


@pytest.mark.parametrize("reflect", [False, True])
def test_icp_undoes_an_orthogonal_transform(reflect):
    """
    WHAT: Aligns an embedding transformed by a random orthogonal matrix back to the original.

    WHY: Sign flips (reflections) and rotations are exactly the ambiguity of
         eigenvectors, so ICP must undo both.

    EXPECTED: recovered transform is Q^T and the mean NN distance vanishes
    """
    helper = CsgTestHelper(seed=6)
    reference = helper.random_embedding()
    q = helper.random_orthogonal(3, reflect=reflect)

    result, aligned = icp_align(_moved(reference, q), reference)

    np.testing.assert_allclose(result.rotation, q.T, atol=1e-8)
    assert result.mean_distance < 1e-8
    np.testing.assert_allclose(aligned.coordinates, reference.coordinates, atol=1e-8)


def test_icp_is_indifferent_to_node_order():
    """
    WHAT: The transformed embedding also has its rows randomly permuted.

    WHY: Correspondence is by nearest neighbor, so subjects need not share a
         vertex ordering with the reference.

    EXPECTED: the recovered transform is still Q^T and the distance vanishes
    """
    helper = CsgTestHelper(seed=9)
    reference = helper.random_embedding()
    q = helper.random_orthogonal(3, reflect=True)
    order = helper.rng.permutation(reference.n)
    shuffled = SpectralEmbedding(reference.eigenvalues, reference.eigenvectors[order] @ q,
                                 reference.coordinates[order] @ q)

    result, aligned = icp_align(shuffled, reference)

    assert result.mean_distance < 1e-6
    np.testing.assert_allclose(q @ result.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(aligned.coordinates, reference.coordinates[order], atol=1e-6)


def test_icp_distance_history_never_increases():
    helper = CsgTestHelper(seed=7)
    reference = helper.random_embedding()
    other = helper.random_embedding()

    result, _ = icp_align(other, reference, AlignmentConfig(max_iters=50))

    assert np.all(np.diff(result.history) <= 0)
    assert result.mean_distance == result.history[-1]
    np.testing.assert_allclose(result.rotation @ result.rotation.T, np.eye(3), atol=1e-10)
    assert set(result.to_dict()) == {"d", "rotation", "iterations", "final_distance", "converged"}


def test_icp_rejects_dimension_mismatch():
    helper = CsgTestHelper()
    with pytest.raises(DataValidationError):
        icp_align(helper.random_embedding(d=2, values=(0.1, 0.2)), helper.random_embedding(d=3))


def test_euclidean_features_are_zscored_xyz_plus_depth():
    mesh = CsgTestHelper().surface(seed=1)
    graph = build_graph(mesh)

    features = build_feature_matrix(None, graph, "euclidean")

    assert features.shape == (162, 4)
    np.testing.assert_allclose(features[:, :3].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(features[:, :3].std(axis=0), 1.0)
    np.testing.assert_array_equal(features[:, 3], mesh.sulcal_depth)


def test_spectral_features_have_unit_rms():
    helper = CsgTestHelper(seed=3)
    mesh = helper.surface(seed=3)
    embedding = helper.random_embedding(n=mesh.n_vertices).transformed(np.eye(3))

    features = build_feature_matrix(embedding, build_graph(mesh), "spectral")

    assert np.sqrt(np.mean(features[:, :3] ** 2)) == pytest.approx(1.0)
    np.testing.assert_array_equal(build_feature_matrix(embedding, build_graph(mesh), "pointwise"), features)


def test_spectral_features_use_the_leading_three_of_a_wider_embedding():
    """
    WHAT: A four-dimensional aligned embedding.

    WHY: The convolution kernels live in three coordinates; wider embeddings
         still feed the network through their first three columns.

    EXPECTED: N x 4 features whose first three columns are a scaled copy of u1..u3
    """
    helper = CsgTestHelper(seed=8)
    mesh = helper.surface(seed=8)
    embedding = helper.random_embedding(n=mesh.n_vertices, d=4, values=(0.01, 0.02, 0.04, 0.08))

    features = build_feature_matrix(embedding.transformed(np.eye(4)), build_graph(mesh), "spectral")

    leading = embedding.coordinates[:, :3]
    assert features.shape == (mesh.n_vertices, 4)
    np.testing.assert_allclose(features[:, :3], leading * spectral_feature_scale(leading))
    assert np.sqrt(np.mean(features[:, :3] ** 2)) == pytest.approx(1.0)
    np.testing.assert_array_equal(features[:, 3], mesh.sulcal_depth)


def test_spectral_features_reject_fewer_than_three_coordinates():
    helper = CsgTestHelper()
    mesh = helper.surface()
    narrow = helper.random_embedding(n=mesh.n_vertices, d=2, values=(0.1, 0.2)).transformed(np.eye(2))
    with pytest.raises(DataValidationError, match="d >= 3"):
        build_feature_matrix(narrow, build_graph(mesh), "spectral")


def test_spectral_features_need_an_aligned_embedding():
    helper = CsgTestHelper()
    mesh = helper.surface()
    with pytest.raises(DataValidationError):
        build_feature_matrix(helper.random_embedding(n=mesh.n_vertices), build_graph(mesh), "spectral")


def test_unknown_feature_mode():
    mesh = CsgTestHelper().surface()
    with pytest.raises(DataValidationError):
        build_feature_matrix(None, build_graph(mesh), "geodesic")


def test_feature_scale_of_zero_coordinates_is_one():
    assert spectral_feature_scale(np.zeros((4, 3))) == 1.0
