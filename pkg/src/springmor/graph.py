"""Graph data model and system-matrix assembly.

A spring-mass level is a :class:`SpringGraph` (nodes, axial springs, rest
lengths) plus :class:`SystemMatrices` holding the diagonal mass matrix, the
weighted graph Laplacian (off-diagonals are negated spring stiffnesses) and
the damping matrix (shared dashpot + shared drag).  A :class:`Hierarchy`
strings levels together with their assignment matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import InvalidConfig, InvalidScene, IsolatedNode, NumericalError

log = logging.getLogger(__name__)


class NodeType(IntEnum):
    OBJECT = 0
    BOUNDARY = 1
    CONTROLLER = 2


NODE_TYPE_NAMES = {
    NodeType.OBJECT: "object",
    NodeType.BOUNDARY: "boundary",
    NodeType.CONTROLLER: "controller",
}
NODE_TYPE_FROM_NAME = {v: k for k, v in NODE_TYPE_NAMES.items()}


@dataclass(eq=False)
class SpringGraph:
    """Immutable node/edge structure of one level.

    ``edges`` stores each unordered pair once as (i, j) with i < j in
    lexicographic order; ``rest_lengths`` aligns with it.
    """

    node_count: int
    positions0: np.ndarray  # (N, 3) meters, canonical configuration
    masses: np.ndarray  # (N,) kg
    node_types: np.ndarray  # (N,) NodeType values
    edges: np.ndarray  # (E, 2) int
    rest_lengths: np.ndarray  # (E,) meters

    def __post_init__(self):
        self.positions0 = np.ascontiguousarray(self.positions0, dtype=np.float64)
        self.masses = np.ascontiguousarray(self.masses, dtype=np.float64)
        self.node_types = np.ascontiguousarray(self.node_types, dtype=np.int64)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.rest_lengths = np.ascontiguousarray(self.rest_lengths, dtype=np.float64)
        _check_graph(self)
        for a in (self.positions0, self.masses, self.node_types, self.edges, self.rest_lengths):
            a.flags.writeable = False

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.bincount(self.edges.reshape(-1), minlength=self.node_count)
        deg.flags.writeable = False
        return deg

    @cached_property
    def controller_ids(self) -> np.ndarray:
        return np.flatnonzero(self.node_types == NodeType.CONTROLLER)

    @cached_property
    def boundary_ids(self) -> np.ndarray:
        return np.flatnonzero(self.node_types == NodeType.BOUNDARY)

    @cached_property
    def diff_op(self) -> sp.csr_matrix:
        """(E, N) operator: (diff_op @ X)[e] = X[j] - X[i] for edge e=(i,j)."""
        e = self.edge_count
        rows = np.repeat(np.arange(e), 2)
        cols = self.edges.reshape(-1)
        vals = np.tile([-1.0, 1.0], e)
        return sp.csr_matrix((vals, (rows, cols)), shape=(e, self.node_count))

    @cached_property
    def accum_op(self) -> sp.csr_matrix:
        """(N, E) operator adding +f_e at i and -f_e at j; equals -diff_op.T."""
        return sp.csr_matrix(-self.diff_op.T)

    @cached_property
    def incidence_op(self) -> sp.csr_matrix:
        """(N, E) unsigned incidence: sums each edge value into both endpoints."""
        e = self.edge_count
        rows = self.edges.reshape(-1)
        cols = np.repeat(np.arange(e), 2)
        return sp.csr_matrix((np.ones(2 * e), (rows, cols)), shape=(self.node_count, e))


def _check_graph(g: SpringGraph) -> None:
    n = g.node_count
    if n < 1 or g.positions0.shape != (n, 3):
        raise InvalidScene(f"positions shape {g.positions0.shape} inconsistent with N={n}")
    if g.masses.shape != (n,) or g.node_types.shape != (n,):
        raise InvalidScene("masses/node_types length inconsistent with node count")
    if np.any(g.masses <= 0):
        raise InvalidScene("all node masses must be positive")
    e = g.edges
    if e.size:
        if e.min() < 0 or e.max() >= n:
            raise InvalidScene("edge index out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise InvalidScene("self-loop edge")
        canon = np.sort(e, axis=1)
        if len(np.unique(canon[:, 0] * n + canon[:, 1])) != len(e):
            raise InvalidScene("duplicate edge")
    if g.rest_lengths.shape != (e.shape[0],):
        raise InvalidScene("rest_lengths length inconsistent with edge count")
    if np.any(g.rest_lengths <= 0):
        raise InvalidScene("rest lengths must be positive")
    _warn_if_disconnected(g)


def _warn_if_disconnected(g: SpringGraph) -> None:
    keep = g.node_types != NodeType.BOUNDARY
    ids = np.flatnonzero(keep)
    if ids.size <= 1:
        return
    remap = -np.ones(g.node_count, dtype=np.int64)
    remap[ids] = np.arange(ids.size)
    e = g.edges[keep[g.edges[:, 0]] & keep[g.edges[:, 1]]]
    adj = sp.csr_matrix(
        (np.ones(len(e)), (remap[e[:, 0]], remap[e[:, 1]])), shape=(ids.size, ids.size)
    )
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp > 1:
        log.warning("graph is disconnected over object+controller nodes (%d components)", ncomp)


def canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Sort each pair ascending, then lexicographically sort the pair list."""
    pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def build_knn_graph(
    points: np.ndarray,
    k: int = 8,
    radius: float | None = None,
    masses: np.ndarray | None = None,
    node_types: np.ndarray | None = None,
    total_mass: float = 1.0,
) -> SpringGraph:
    """Symmetrized k-nearest-neighbour spring graph over a point set.

    Each node links to its k nearest neighbours (distance ties broken by
    lower index); the directed lists are united into an undirected edge
    set, edges longer than ``radius`` are dropped, and rest lengths are
    set to the initial Euclidean distances.  Masses default to a uniform
    split of ``total_mass``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < 2:
        raise InvalidScene("need at least 2 points")
    if k < 1 or k >= n:
        raise InvalidConfig(f"k={k} must satisfy 1 <= k < N={n}")

    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    off_diag = d2 + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    if np.min(off_diag) < 1e-18:
        i, j = np.unravel_index(np.argmin(off_diag), off_diag.shape)
        raise InvalidScene(f"duplicate points {i} and {j} (within 1e-9 m)")

    pairs = []
    idx = np.arange(n)
    for i in range(n):
        # stable lexicographic order: primary distance, secondary index
        order = np.lexsort((idx, off_diag[i]))
        for j in order[:k]:
            pairs.append((min(i, j), max(i, j)))
    pairs = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
    lengths = np.sqrt(np.sum((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2, axis=1))
    if radius is not None:
        keep = lengths <= radius
        pairs = pairs[keep]
        present = np.zeros(n, dtype=bool)
        present[pairs.reshape(-1)] = True
        if not np.all(present):
            raise IsolatedNode(int(np.flatnonzero(~present)[0]), "radius pruning isolated a node")
    pairs = canonical_edges(pairs)
    lengths = np.sqrt(np.sum((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2, axis=1))

    if masses is None:
        masses = np.full(n, float(total_mass) / n)
    if node_types is None:
        node_types = np.zeros(n, dtype=np.int64)
    return SpringGraph(n, points, np.asarray(masses, float), np.asarray(node_types), pairs, lengths)


def assemble_laplacian(graph: SpringGraph, stiffness: np.ndarray) -> sp.csr_matrix:
    """Weighted graph Laplacian: L_ij = -s_ij on edges, degree-weighted diagonal."""
    s = np.asarray(stiffness, dtype=np.float64)
    if s.shape != (graph.edge_count,):
        raise InvalidConfig("stiffness length must equal edge count")
    if not np.all(np.isfinite(s)):
        raise NumericalError("non-finite stiffness")
    if np.any(s < 0):
        log.warning(
            "negative stiffness on %d edges (transient during optimization)", int(np.sum(s < 0))
        )
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    n = graph.node_count
    diag = _scatter(s, i, n) + _scatter(s, j, n)
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([-s, -s, diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_damping(graph: SpringGraph, d_dp: float, d_dr: float) -> sp.csr_matrix:
    """Damping matrix: -d_dp on edges, d_dr + deg(i)*d_dp on the diagonal."""
    if d_dp < 0 or d_dr < 0:
        raise InvalidConfig("damping coefficients must be nonnegative")
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    n = graph.node_count
    diag = d_dr + graph.degrees * d_dp
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([np.full(len(i), -d_dp), np.full(len(i), -d_dp), diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _scatter(vals, idx, n):
    return np.bincount(idx, weights=vals, minlength=n)


@dataclass(eq=False)
class SystemMatrices:
    """Mass / Laplacian / damping triplet of one level."""

    mass: sp.csr_matrix
    laplacian: sp.csr_matrix
    damping: sp.csr_matrix

    @property
    def mass_diag(self) -> np.ndarray:
        return self.mass.diagonal()

    @property
    def node_count(self) -> int:
        return self.mass.shape[0]


def assemble_system(graph: SpringGraph, stiffness, d_dp, d_dr) -> SystemMatrices:
    return SystemMatrices(
        mass=sp.csr_matrix(sp.diags(graph.masses)),
        laplacian=assemble_laplacian(graph, stiffness),
        damping=assemble_damping(graph, float(d_dp), float(d_dr)),
    )


@dataclass(eq=False)
class Hierarchy:
    """Levels 0..L with the assignment chain that produced them.

    ``levels[l]`` is a (SpringGraph, SystemMatrices, MechParams) triple;
    ``assignments[l]`` maps level-l nodes onto level-(l+1) clusters.
    """

    levels: list  # [(SpringGraph, SystemMatrices, MechParams)]
    assignments: list = field(default_factory=list)  # [AssignmentMatrix]
    committed: list = field(default_factory=list)  # per-assignment frozen flag

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def graph(self, level: int) -> SpringGraph:
        return self.levels[level][0]

    def system(self, level: int) -> SystemMatrices:
        return self.levels[level][1]

    def params(self, level: int):
        return self.levels[level][2]


@dataclass
class ValidationReport:
    issues: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, msg: str) -> None:
        self.issues.append(msg)


def validate_hierarchy(h: Hierarchy) -> ValidationReport:
    """Check every structural invariant; reports violations, never raises."""
    rep = ValidationReport()
    counts = [g.node_count for g, _, _ in h.levels]
    for l in range(len(counts) - 1):
        if counts[l + 1] >= counts[l]:
            rep.add(f"non-decreasing node count at level {l + 1} ({counts[l]} -> {counts[l + 1]})")
    if len(h.assignments) != len(h.levels) - 1:
        rep.add(f"assignment count {len(h.assignments)} does not match level count {len(h.levels)}")
    for l, asg in enumerate(h.assignments):
        hard = np.asarray(asg.hard)
        nl = counts[l] if l < len(counts) else -1
        nl1 = counts[l + 1] if l + 1 < len(counts) else -1
        if hard.shape != (nl, nl1):
            rep.add(f"assignment shape {hard.shape} at level {l}, expected {(nl, nl1)}")
            continue
        if np.any((hard != 0.0) & (hard != 1.0)) or np.any(hard.sum(axis=1) != 1.0):
            rep.add(f"rows not one-hot at level {l}")
        for c in np.flatnonzero(hard.sum(axis=0) == 0):
            rep.add(f"empty cluster at level {l} (column {c})")
        labels = hard.argmax(axis=1)
        fine_m = h.levels[l][1].mass_diag
        want = np.bincount(labels, weights=fine_m, minlength=nl1)
        got = h.levels[l + 1][1].mass_diag
        if not np.array_equal(want, got):
            rep.add(f"coarse mass diagonal at level {l + 1} is not the cluster mass sums")
    for l, (graph, mats, params) in enumerate(h.levels):
        _check_system(rep, l, graph, mats, params)
    return rep


def _check_system(rep, level, graph, mats, params) -> None:
    lap = mats.laplacian
    n = lap.shape[0]
    if n != graph.node_count:
        rep.add(f"matrix size mismatch at level {level}")
        return
    scale = max(abs(lap.data).max(initial=0.0), 1.0)
    rowsums = np.asarray(lap.sum(axis=1)).ravel()
    if rowsums.size and np.max(np.abs(rowsums)) > 1e-9 * scale:
        rep.add(f"laplacian row sums nonzero at level {level}")
    asym = abs(lap - lap.T)
    if asym.nnz and asym.data.max() > 1e-9 * scale:
        rep.add(f"laplacian not symmetric at level {level}")
    if params is None:
        return
    stiff = np.asarray(params.stiffness, dtype=np.float64)
    if np.all(stiff >= 0) and n <= 500:
        w = np.linalg.eigvalsh(lap.toarray())
        if w[0] < -1e-9 * scale:
            rep.add(f"laplacian indefinite at level {level} (lambda_min={w[0]:.3e})")
    want = assemble_damping(graph, float(params.d_dp), float(params.d_dr))
    diff = abs(mats.damping - want)
    if diff.nnz and diff.data.max() > 1e-12 * max(float(params.d_dr) + float(params.d_dp), 1.0):
        rep.add(f"damping structure violates dashpot+drag form at level {level}")
