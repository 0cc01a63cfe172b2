import logging
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp

from springmor import graph as gr
from springmor.errors import InvalidConfig, InvalidScene, IsolatedNode, NumericalError


def random_graph(rng, n):
    pts = rng.uniform(-1, 1, size=(n, 3))
    return gr.build_knn_graph(pts, k=min(4, n - 1))


def test_two_points_single_edge():
    g = gr.build_knn_graph(np.array([[0, 0, 0], [1, 0, 0]], float), k=1)
    assert g.edges.tolist() == [[0, 1]]
    assert g.rest_lengths.tolist() == [1.0]


def test_three_collinear_points_tie_break():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    g = gr.build_knn_graph(pts, k=1)
    # node 1 ties between 0 and 2; lower index wins, symmetrization adds (1,2)
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_unit_square_radius_prunes_diagonals():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    g = gr.build_knn_graph(pts, k=2, radius=1.05)
    assert g.edges.tolist() == [[0, 1], [0, 3], [1, 2], [2, 3]]
    np.testing.assert_allclose(g.rest_lengths, 1.0)


def test_knn_errors():
    with pytest.raises(InvalidScene):
        gr.build_knn_graph(np.zeros((1, 3)), k=1)
    with pytest.raises(InvalidConfig):
        gr.build_knn_graph(np.random.default_rng(0).normal(size=(4, 3)), k=4)
    with pytest.raises(InvalidScene):
        gr.build_knn_graph(np.zeros((3, 3)), k=1)  # duplicates
    # far-away point becomes isolated under a small radius
    pts = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], float)
    with pytest.raises(IsolatedNode) as ei:
        gr.build_knn_graph(pts, k=1, radius=2.0)
    assert ei.value.node == 2


def test_knn_deterministic():
    rng = np.random.default_rng(42)
    pts = rng.uniform(size=(30, 3))
    g1 = gr.build_knn_graph(pts, k=5)
    g2 = gr.build_knn_graph(pts, k=5)
    assert np.array_equal(g1.edges, g2.edges)
    assert np.array_equal(g1.rest_lengths, g2.rest_lengths)


def test_laplacian_single_spring():
    g = gr.build_knn_graph(np.array([[0, 0, 0], [1, 0, 0]], float), k=1)
    L = gr.assemble_laplacian(g, np.array([3.0])).toarray()
    np.testing.assert_array_equal(L, [[3, -3], [-3, 3]])


def test_laplacian_three_node_path():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    g = gr.build_knn_graph(pts, k=1)
    L = gr.assemble_laplacian(g, np.array([2.0, 2.0])).toarray()
    np.testing.assert_array_equal(L, [[2, -2, 0], [-2, 4, -2], [0, -2, 2]])


def test_laplacian_random_graph_psd_and_row_sums():
    rng = np.random.default_rng(7)
    g = random_graph(rng, 10)
    s = rng.uniform(0.5, 3.0, size=g.edge_count)
    L = gr.assemble_laplacian(g, s)
    dense = L.toarray()
    assert np.min(np.linalg.eigvalsh(dense)) >= -1e-9
    np.testing.assert_allclose(dense.sum(axis=1), 0.0, atol=1e-9 * np.abs(dense).max())


def test_laplacian_negative_stiffness_warns_nan_raises(caplog):
    g = gr.build_knn_graph(np.array([[0, 0, 0], [1, 0, 0]], float), k=1)
    with caplog.at_level(logging.WARNING, logger="springmor.graph"):
        gr.assemble_laplacian(g, np.array([-1.0]))
    assert any("negative stiffness" in r.message for r in caplog.records)
    with pytest.raises(NumericalError):
        gr.assemble_laplacian(g, np.array([np.nan]))


def test_damping_examples():
    g2 = gr.build_knn_graph(np.array([[0, 0, 0], [1, 0, 0]], float), k=1)
    np.testing.assert_array_equal(
        gr.assemble_damping(g2, 1.0, 0.0).toarray(), [[1, -1], [-1, 1]]
    )
    np.testing.assert_array_equal(gr.assemble_damping(g2, 0.0, 5.0).toarray(), [[5, 0], [0, 5]])
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    g3 = gr.build_knn_graph(pts, k=1)
    D = gr.assemble_damping(g3, 1.0, 2.0).toarray()
    np.testing.assert_array_equal(D, [[3, -1, 0], [-1, 4, -1], [0, -1, 3]])
    with pytest.raises(InvalidConfig):
        gr.assemble_damping(g3, -0.1, 0.0)


def test_laplacian_invariant_properties():
    # L @ 1 = 0, symmetry, quadratic form bounded below, translation nullspace
    rng = np.random.default_rng(12)
    g = random_graph(rng, 25)
    s = rng.uniform(0.1, 5.0, size=g.edge_count)
    L = gr.assemble_laplacian(g, s)
    dense = L.toarray()
    scale = np.abs(dense).max()
    assert np.max(np.abs(dense @ np.ones(g.node_count))) <= 1e-9 * scale
    assert np.array_equal(dense, dense.T)
    for _ in range(100):
        x = rng.normal(size=g.node_count)
        assert x @ dense @ x >= -1e-9 * (x @ x) * scale
    X = rng.normal(size=(g.node_count, 3))
    c = np.array([0.3, -1.2, 7.0])
    assert np.max(np.abs(L @ (X + c) - L @ X)) <= 1e-9 * scale * np.abs(c).max()


def test_diff_and_accum_operators():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    g = gr.build_knn_graph(pts, k=1)
    X = np.array([[0.0, 0, 0], [1.5, 0, 0], [2.0, 0, 0]])
    d = g.diff_op @ X
    np.testing.assert_array_equal(d[:, 0], [1.5, 0.5])
    # accumulating per-edge values reproduces -L@X for unit stiffness
    L = gr.assemble_laplacian(g, np.ones(2)).toarray()
    np.testing.assert_allclose(g.accum_op @ d, -(L @ X), atol=1e-14)


def _level(graph, stiffness, d_dp=0.1, d_dr=0.01):
    params = SimpleNamespace(stiffness=stiffness, d_dp=d_dp, d_dr=d_dr)
    return (graph, gr.assemble_system(graph, stiffness, d_dp, d_dr), params)


def _assignment(labels, k):
    labels = np.asarray(labels)
    hard = np.zeros((labels.size, k))
    hard[np.arange(labels.size), labels] = 1.0
    return SimpleNamespace(hard=hard, soft=None, seed_ids=np.arange(k))


def test_validate_single_level_hierarchy_empty_report():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 12)
    h = gr.Hierarchy(levels=[_level(g, np.ones(g.edge_count))])
    rep = gr.validate_hierarchy(h)
    assert rep.ok, rep.issues


def test_validate_flags_empty_cluster_and_nondecreasing_count():
    rng = np.random.default_rng(6)
    g = random_graph(rng, 6)
    fine = _level(g, np.ones(g.edge_count))

    coarse_pts = np.array([[0, 0, 0], [1, 0, 0], [2.0, 0, 0]])
    cg = gr.build_knn_graph(coarse_pts, k=1, masses=np.bincount([0, 0, 1, 1, 2, 2], weights=g.masses))
    coarse = _level(cg, np.ones(cg.edge_count))

    # column 2 empty: everything mapped to clusters 0/1
    bad = gr.Hierarchy(
        levels=[fine, coarse],
        assignments=[_assignment([0, 0, 1, 1, 0, 1], 3)],
        committed=[True],
    )
    rep = gr.validate_hierarchy(bad)
    assert any("empty cluster at level 0" in m for m in rep.issues)

    same = gr.Hierarchy(
        levels=[fine, fine],
        assignments=[_assignment(np.arange(6), 6)],
        committed=[True],
    )
    rep2 = gr.validate_hierarchy(same)
    assert any("non-decreasing node count" in m for m in rep2.issues)


def test_disconnected_object_subgraph_warns(caplog):
    pts = np.array([[0, 0, 0], [1, 0, 0], [50, 0, 0], [51, 0, 0]], float)
    edges = np.array([[0, 1], [2, 3]])
    rest = np.ones(2)
    with caplog.at_level(logging.WARNING, logger="springmor.graph"):
        gr.SpringGraph(4, pts, np.ones(4), np.zeros(4, dtype=int), edges, rest)
    assert any("disconnected" in r.message for r in caplog.records)
