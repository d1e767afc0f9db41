import warnings

import numpy as np
import pytest

from cloudcast.data import AlignedSeries
from cloudcast.errors import DataError
from cloudcast.structure import (AdjacencyMatrix, ConstantSeriesWarning, TopologySpec,
                                 adjacency_from_correlation, adjacency_from_topology,
                                 correlation_matrix, row_normalize)


def _series(values):
    values = np.asarray(values, dtype=np.float64)
    return AlignedSeries(values[:, :, None], np.ones(values.shape, dtype=bool))


def test_topology_without_edges_is_identity():
    A = adjacency_from_topology(TopologySpec(("a", "b", "c"), ()))
    np.testing.assert_array_equal(A.weights, np.eye(3))
    assert A.node_ids == ("a", "b", "c")


def test_topology_single_edge():
    A = adjacency_from_topology(TopologySpec(("0", "1"), (("0", "1", 1.0),)))
    np.testing.assert_array_equal(A.weights, [[0.5, 0.5], [0.0, 1.0]])


def test_topology_fully_connected():
    nodes = tuple("abcd")
    edges = tuple((s, d, 1.0) for s in nodes for d in nodes if s != d)
    A = adjacency_from_topology(TopologySpec(nodes, edges))
    np.testing.assert_array_equal(A.weights, np.full((4, 4), 0.25))


def test_topology_unknown_node():
    with pytest.raises(DataError, match="unknown node 'z'"):
        adjacency_from_topology(TopologySpec(("a", "b"), (("a", "z", 1.0),)))


def test_topology_from_json(tmp_path):
    path = tmp_path / "topo.json"
    path.write_text('{"nodes": ["x", "y"], "edges": [{"src": "y", "dst": "x", "weight": 3}]}')
    A = adjacency_from_topology(TopologySpec.load(path))
    np.testing.assert_allclose(A.weights, [[1, 0], [0.75, 0.25]])
    with pytest.raises(DataError):
        TopologySpec.from_dict({"nodes": ["a", "a"]})


def test_topology_permutation_equivariance():
    rng = np.random.default_rng(0)
    nodes = tuple(f"n{i}" for i in range(6))
    edges = tuple((nodes[i], nodes[j], float(rng.uniform(0.1, 2)))
                  for i in range(6) for j in range(6) if i != j and rng.random() < 0.4)
    A = adjacency_from_topology(TopologySpec(nodes, edges)).weights
    perm = rng.permutation(6)
    B = adjacency_from_topology(TopologySpec(tuple(nodes[p] for p in perm), edges)).weights
    np.testing.assert_allclose(B, A[np.ix_(perm, perm)], atol=1e-15)


def test_row_normalize_cases():
    np.testing.assert_array_equal(row_normalize(np.eye(3)).weights, np.eye(3))
    np.testing.assert_array_equal(row_normalize([[2, 2], [1, 3]]).weights, [[0.5, 0.5], [0.25, 0.75]])
    with pytest.raises(DataError):
        row_normalize([[1, -1], [0, 1]])
    with pytest.raises(DataError):
        row_normalize([[0, 0], [0, 1]])


def test_adjacency_matrix_validation():
    with pytest.raises(DataError):
        AdjacencyMatrix(np.array([[0.5, 0.4], [0, 1]]))
    A = AdjacencyMatrix(np.array([[0.5, 0.5], [0.0, 1.0]]), ("a", "b"))
    back = AdjacencyMatrix.from_dict(A.to_dict())
    assert back.weights.tobytes() == A.weights.tobytes() and back.node_ids == A.node_ids


def test_correlation_copy_node_always_linked():
    rng = np.random.default_rng(1)
    base = rng.normal(size=200)
    values = np.stack([base, base, rng.normal(size=200)], axis=1)
    A = adjacency_from_correlation(_series(values), threshold=1.0)
    assert A.weights[0, 1] > 0 and A.weights[1, 0] > 0
    assert A.weights[0, 2] == 0


def test_correlation_white_noise_has_no_edges():
    values = np.random.default_rng(2).normal(size=(2000, 5))
    A = adjacency_from_correlation(_series(values), threshold=0.5)
    np.testing.assert_array_equal(A.weights, np.eye(5))


def test_correlation_threshold_above_one_gives_identity():
    rng = np.random.default_rng(3)
    base = rng.normal(size=300)
    values = np.stack([base + 0.1 * rng.normal(size=300), base + 0.1 * rng.normal(size=300)], axis=1)
    assert adjacency_from_correlation(_series(values), threshold=0.9).weights[0, 1] > 0
    with pytest.raises(DataError):
        adjacency_from_correlation(_series(values), threshold=1.0 + 1e-6)
    np.testing.assert_array_equal(adjacency_from_correlation(_series(values), threshold=1.0).weights,
                                  np.eye(2))


def test_correlation_constant_node_warns():
    rng = np.random.default_rng(4)
    values = np.stack([rng.normal(size=50), np.full(50, 2.0), rng.normal(size=50)], axis=1)
    with pytest.warns(ConstantSeriesWarning):
        A = adjacency_from_correlation(_series(values), threshold=0.0)
    np.testing.assert_array_equal(A.weights[1], [0, 1, 0])
    assert A.weights[0, 1] == 0
    assert A.notes and "n1" in A.notes[0]


def test_correlation_is_symmetric_before_normalization():
    values = np.random.default_rng(5).normal(size=(100, 4)).cumsum(axis=0)
    rho, _ = correlation_matrix(values, np.ones(values.shape, dtype=bool))
    np.testing.assert_array_equal(rho, rho.T)


def test_correlation_uses_only_valid_steps():
    rng = np.random.default_rng(6)
    base = rng.normal(size=100)
    values = np.stack([base, base], axis=1)[:, :, None]
    mask = np.ones((100, 2), dtype=bool)
    values[10, 1, 0] = np.nan
    mask[10, 1] = False
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        A = adjacency_from_correlation(AlignedSeries(values, mask), threshold=0.99)
    np.testing.assert_allclose(A.weights, np.full((2, 2), 0.5))


def test_correlation_needs_three_steps():
    with pytest.raises(DataError):
        adjacency_from_correlation(_series([[1.0, 2.0], [2.0, 1.0]]))
