"""Galerkin projection and the sampling-strategy baselines.

Two routes compute the coarse system.  The matrix route forms P^T A P with
sparse products and is the checking oracle; the edge route works directly
on per-edge values (sums of crossing stiffnesses, mean dashpot
multiplicity, mean drag row sum) and is what the differentiable training
pipeline uses.  Both agree on the off-diagonal pattern and values.

The two ablation reducers live here as well: uniform random seeding with
nearest-seed assignment, and classical nodal clustering by similarity of
controllability-Gramian rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import value_of
from .dynamics import ControllerScript, DynamicState, MechParams
from .errors import EmptyCluster, InvalidConfig, SolverFailure
from .gnn import AssignmentMatrix, STIFFNESS_MIN
from .graph import Hierarchy, NodeType, SpringGraph, SystemMatrices, assemble_system, canonical_edges

log = logging.getLogger(__name__)


def _labels_of(assignment) -> tuple[np.ndarray, int]:
    if isinstance(assignment, AssignmentMatrix):
        labels = assignment.labels
        k = assignment.shape[1]
    else:
        hard = np.asarray(assignment, dtype=np.float64)
        labels = hard.argmax(axis=1)
        k = hard.shape[1]
    if len(np.unique(labels)) != k:
        missing = sorted(set(range(k)) - set(labels.tolist()))
        raise EmptyCluster(f"assignment has empty columns {missing}")
    return np.asarray(labels, dtype=np.int64), k


def _p_sparse(labels: np.ndarray, k: int) -> sp.csr_matrix:
    n = labels.size
    return sp.csr_matrix((np.ones(n), (np.arange(n), labels)), shape=(n, k))


def galerkin_project(mats: SystemMatrices, assignment) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """(P^T M P, P^T L P, P^T D P) for a hard one-hot assignment."""
    labels, k = _labels_of(assignment)
    p = _p_sparse(labels, k)
    pt = sp.csr_matrix(p.T)
    m_hat = sp.csr_matrix(sp.diags(np.bincount(labels, weights=mats.mass_diag, minlength=k)))
    l_hat = sp.csr_matrix(pt @ mats.laplacian @ p)
    d_hat = sp.csr_matrix(pt @ mats.damping @ p)
    return m_hat, l_hat, d_hat


def coarse_edge_map(labels: np.ndarray, fine_graph: SpringGraph, k: int):
    """Coarse edge set from cluster-crossing fine edges.

    Returns (coarse_edges (Ec,2) in canonical order, edge_map (Ef,) with the
    coarse edge index of each fine edge, -1 for intra-cluster edges).
    """
    e = fine_graph.edges
    ci, cj = labels[e[:, 0]], labels[e[:, 1]]
    lo, hi = np.minimum(ci, cj), np.maximum(ci, cj)
    crossing = lo != hi
    edge_map = np.full(fine_graph.edge_count, -1, dtype=np.int64)
    if not np.any(crossing):
        return np.zeros((0, 2), dtype=np.int64), edge_map
    keys = lo[crossing] * k + hi[crossing]
    uniq, inverse = np.unique(keys, return_inverse=True)
    coarse_edges = np.stack([uniq // k, uniq % k], axis=1)
    # np.unique sorts keys, which is exactly the canonical edge order
    edge_map[crossing] = inverse
    return coarse_edges, edge_map


def project_stiffness(stiffness, edge_map: np.ndarray, n_coarse_edges: int):
    """Sum fine stiffnesses over each coarse edge (the -L_hat off-diagonal)."""
    cross = np.flatnonzero(edge_map >= 0)
    vals = ad.gather_rows(stiffness, cross)
    return ad.scatter_add_rows(vals, edge_map[cross], n_coarse_edges)


def project_damping_scalars(d_dp, d_dr, fine_graph: SpringGraph, labels: np.ndarray, n_coarse: int, n_coarse_edges: int):
    """Shared-scalar estimates matching P^T D P on average.

    Dashpot: mean crossing multiplicity per coarse edge.  Drag: mean row sum
    (total drag of a cluster is the sum of its members' drag).
    """
    e = fine_graph.edges
    crossing = int(np.sum(labels[e[:, 0]] != labels[e[:, 1]]))
    if n_coarse_edges > 0:
        dp_hat = ad.mul(d_dp, crossing / n_coarse_edges)
    else:
        dp_hat = d_dp
    dr_hat = ad.mul(d_dr, fine_graph.node_count / n_coarse)
    return dp_hat, dr_hat


def coarse_positions(labels: np.ndarray, fine_graph: SpringGraph, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mass-weighted member centroids and cluster masses."""
    m = fine_graph.masses
    mass = np.bincount(labels, weights=m, minlength=k)
    pos = np.empty((k, 3))
    for c in range(3):
        pos[:, c] = np.bincount(labels, weights=m * fine_graph.positions0[:, c], minlength=k)
    return pos / mass[:, None], mass


def coarse_types(labels: np.ndarray, fine_graph: SpringGraph, k: int) -> np.ndarray:
    """Type precedence: controller beats boundary beats object."""
    out = np.zeros(k, dtype=np.int64)
    np.maximum.at(out, labels, fine_graph.node_types)
    return out


def extract_coarse_graph(l_hat: sp.csr_matrix, m_hat: sp.csr_matrix, assignment, fine_graph: SpringGraph) -> tuple[SpringGraph, np.ndarray]:
    """Coarse spring graph inherited from the projected Laplacian sparsity.

    Returns the graph and its per-edge base stiffness (-L_hat off-diagonal,
    floored at the minimum stiffness when cancellation drove it negative).
    """
    labels, k = _labels_of(assignment)
    coo = sp.coo_matrix(sp.triu(l_hat, k=1))
    keep = np.abs(coo.data) > 1e-12
    pairs = canonical_edges(np.stack([coo.row[keep], coo.col[keep]], axis=1))
    lut = {(int(i), int(j)): -v for i, j, v in zip(coo.row[keep], coo.col[keep], coo.data[keep])}
    stiff = np.array([lut[(int(i), int(j))] for i, j in pairs])
    bad = stiff <= 0
    if np.any(bad):
        log.warning("coarse stiffness <= 0 on %d edges, clamped to %.0e", int(bad.sum()), STIFFNESS_MIN)
        stiff = np.where(bad, STIFFNESS_MIN, stiff)

    pos, mass = coarse_positions(labels, fine_graph, k)
    rest = np.sqrt(np.sum((pos[pairs[:, 0]] - pos[pairs[:, 1]]) ** 2, axis=1))
    tiny = rest < 1e-9
    if np.any(tiny):
        log.warning("%d coarse rest lengths below 1e-9 m, floored", int(tiny.sum()))
        rest = np.maximum(rest, 1e-9)
    graph = SpringGraph(k, pos, mass, coarse_types(labels, fine_graph, k), pairs, rest)
    return graph, stiff


def project_state(state: DynamicState, assignment, mass_diag: np.ndarray) -> DynamicState:
    """Mass-weighted cluster means of positions and velocities."""
    labels, k = _labels_of(assignment)
    m = np.asarray(mass_diag, dtype=np.float64)
    cm = np.bincount(labels, weights=m, minlength=k)

    def proj(arr):
        arr = np.asarray(value_of(arr), dtype=np.float64)
        out = np.empty((k, 3))
        for c in range(3):
            out[:, c] = np.bincount(labels, weights=m * arr[:, c], minlength=k)
        return out / cm[:, None]

    return DynamicState(proj(state.positions), proj(state.velocities), state.frame_index)


def project_controller_script(script: ControllerScript, assignment, mass_diag: np.ndarray, fine_graph: SpringGraph) -> ControllerScript:
    """Coarse controllers receive the mass-weighted mean of their controller
    members' trajectories; non-controller members do not contribute."""
    labels, k = _labels_of(assignment)
    ctypes = coarse_types(labels, fine_graph, k)
    coarse_ctrl = np.flatnonzero(ctypes == NodeType.CONTROLLER)
    frames = script.trajectory.shape[0]
    out = np.zeros((frames, coarse_ctrl.size, 3))
    m = np.asarray(mass_diag, dtype=np.float64)
    for col, cnode in enumerate(coarse_ctrl):
        members = np.flatnonzero((labels == cnode) & (fine_graph.node_types == NodeType.CONTROLLER))
        sel = np.searchsorted(script.indices, members)
        if not np.all(script.indices[sel] == members):
            raise InvalidConfig("controller script does not cover all controller nodes")
        w = m[members] / m[members].sum()
        out[:, col, :] = np.einsum("tcx,c->tx", script.trajectory[:, sel, :], w)
    return ControllerScript(coarse_ctrl, out)


def random_reduce(graph: SpringGraph, ratio: float, rng: np.random.Generator) -> AssignmentMatrix:
    """Uniform random seeds; every node joins its nearest seed."""
    if not 0.0 < ratio <= 1.0:
        raise InvalidConfig("ratio must lie in (0, 1]")
    n = graph.node_count
    k = max(1, math.ceil(ratio * n))
    seeds = np.sort(rng.choice(n, size=k, replace=False))
    return nearest_seed_assignment(graph.positions0, seeds)


def nearest_seed_assignment(points: np.ndarray, seeds: np.ndarray) -> AssignmentMatrix:
    """Assign each point to the nearest seed (ties: lower seed index)."""
    seeds = np.asarray(seeds, dtype=np.int64)
    d2 = np.sum((points[:, None, :] - points[None, seeds, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    labels[seeds] = np.arange(seeds.size)  # exact self-assignment
    return AssignmentMatrix.from_labels(labels, seeds.size, seeds)


def controllability_gramian(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A W + W A^T + B B^T = 0 and verify the residual."""
    q = b @ b.T
    w = scipy.linalg.solve_continuous_lyapunov(a, -q)
    res = np.linalg.norm(a @ w + w @ a.T + q)
    if res > 1e-6 * max(np.linalg.norm(q), 1e-300):
        raise SolverFailure(f"Lyapunov residual {res:.3e} too large")
    return w


def gramian_reduce(system: SystemMatrices, graph: SpringGraph, controller_ids, ratio: float) -> AssignmentMatrix:
    """Classical nodal clustering by controllability-Gramian row similarity.

    Works on the per-node scalar realization of the linear (Laplacian-form)
    system; controller and boundary coordinates are pinned and survive as
    singleton clusters.  Greedy centroid agglomeration merges the closest
    signature pair until ceil(ratio*N) clusters remain.
    """
    n = graph.node_count
    if n > 500:
        raise InvalidConfig("dense Gramian reduction is limited to N <= 500")
    if not 0.0 < ratio <= 1.0:
        raise InvalidConfig("ratio must lie in (0, 1]")
    controller_ids = np.asarray(controller_ids, dtype=np.int64)
    pinned = np.union1d(controller_ids, graph.boundary_ids).astype(np.int64)
    free = np.setdiff1d(np.arange(n), pinned)
    if free.size < 2:
        raise InvalidConfig("need at least two free nodes to reduce")
    k_target = max(1, math.ceil(ratio * n))
    if k_target <= pinned.size:
        raise InvalidConfig(f"target {k_target} clusters cannot hold {pinned.size} pinned singletons")

    l_full = system.laplacian.toarray()
    d_full = system.damping.toarray()
    m_diag = system.mass_diag
    lff = l_full[np.ix_(free, free)]
    dff = d_full[np.ix_(free, free)]
    inv_m = 1.0 / m_diag[free]
    nf = free.size
    a = np.zeros((2 * nf, 2 * nf))
    a[:nf, nf:] = np.eye(nf)
    a[nf:, :nf] = -inv_m[:, None] * lff
    a[nf:, nf:] = -inv_m[:, None] * dff

    if np.max(np.linalg.eigvals(a).real) >= -1e-9:
        log.warning("first-order system not asymptotically stable; adding uniform drag 1e-3")
        a[nf:, nf:] -= 1e-3 * inv_m[:, None] * np.eye(nf)

    if controller_ids.size:
        lfc = l_full[np.ix_(free, controller_ids)]
        b = np.zeros((2 * nf, controller_ids.size))
        b[nf:, :] = -inv_m[:, None] * lfc
    else:
        b = np.zeros((2 * nf, nf))
        b[nf:, :] = np.diag(inv_m)

    w = controllability_gramian(a, b)
    signatures = w[:nf, :nf]  # position-block rows, one per free node

    labels = _greedy_merge(signatures, k_target - pinned.size)
    # stitch free clusters and pinned singletons into one label array, with
    # columns ordered by their lowest member id
    full = np.empty(n, dtype=np.int64)
    full[free] = labels
    full[pinned] = np.arange(pinned.size) + labels.max() + 1
    reps = np.array([np.min(np.flatnonzero(full == c)) for c in range(full.max() + 1)])
    order = np.argsort(reps)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return AssignmentMatrix.from_labels(remap[full], order.size, reps[order])


def _greedy_merge(signatures: np.ndarray, k: int) -> np.ndarray:
    """Agglomerate rows by euclidean signature distance until k clusters remain.

    Centroid linkage; on merge the lower index survives, and distance ties
    resolve to the lexicographically first pair.
    """
    nf = signatures.shape[0]
    if not 1 <= k <= nf:
        raise InvalidConfig(f"cannot merge {nf} nodes into {k} clusters")
    sig = np.array(signatures, dtype=np.float64)
    sizes = np.ones(nf)
    assign = np.arange(nf)
    gram = sig @ sig.T
    sq = np.diag(gram).copy()
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(d2, np.inf)
    alive = np.ones(nf, dtype=bool)
    for _ in range(nf - k):
        i, j = divmod(int(np.argmin(d2)), nf)
        if i > j:
            i, j = j, i
        si, sj = sizes[i], sizes[j]
        sig[i] = (si * sig[i] + sj * sig[j]) / (si + sj)
        sizes[i] = si + sj
        alive[j] = False
        assign[assign == j] = i
        d2[j, :] = np.inf
        d2[:, j] = np.inf
        diff = sig - sig[i]
        row = np.einsum("ij,ij->i", diff, diff)
        row[~alive] = np.inf
        row[i] = np.inf
        d2[i, :] = row
        d2[:, i] = row
    roots = np.flatnonzero(alive)
    remap = np.empty(nf, dtype=np.int64)
    remap[roots] = np.arange(roots.size)
    return remap[assign]


def compose_labels(assignments: list, level: int) -> np.ndarray:
    """Map fine (level-0) node ids to their level-`level` cluster ids."""
    if level == 0:
        n = assignments[0].shape[0] if assignments else 0
        return np.arange(n, dtype=np.int64)
    labels = assignments[0].labels
    for asg in assignments[1:level]:
        labels = asg.labels[labels]
    return labels


@dataclass
class LevelSystem:
    """One reduced level ready for simulation."""

    graph: SpringGraph
    params: MechParams


def hierarchy_from_assignments(
    fine_graph: SpringGraph,
    fine_params: MechParams,
    assignments: list,
    coarse_params: list | None = None,
    committed: list | None = None,
) -> Hierarchy:
    """Build the level chain, Galerkin-projecting parameters downward.

    ``coarse_params`` may override the projected MechParams per coarse level
    (as decoded by the network); entries of None keep the projection.
    """
    levels = [(fine_graph, assemble_system(fine_graph, value_of(fine_params.stiffness), value_of(fine_params.d_dp), value_of(fine_params.d_dr)), fine_params.raw())]
    graph, params = fine_graph, fine_params.raw()
    for li, asg in enumerate(assignments):
        labels, k = _labels_of(asg)
        coarse_edges, edge_map = coarse_edge_map(labels, graph, k)
        stiff = project_stiffness(params.stiffness, edge_map, len(coarse_edges))
        dp_hat, dr_hat = project_damping_scalars(params.d_dp, params.d_dr, graph, labels, k, len(coarse_edges))
        pos, mass = coarse_positions(labels, graph, k)
        rest = np.sqrt(np.sum((pos[coarse_edges[:, 0]] - pos[coarse_edges[:, 1]]) ** 2, axis=1))
        rest = np.maximum(rest, 1e-9)
        cgraph = SpringGraph(k, pos, mass, coarse_types(labels, graph, k), coarse_edges, rest)
        cparams = MechParams(stiff, float(dp_hat), float(dr_hat), params.contact)
        if coarse_params is not None and coarse_params[li] is not None:
            cparams = coarse_params[li].raw()
        levels.append((cgraph, assemble_system(cgraph, value_of(cparams.stiffness), value_of(cparams.d_dp), value_of(cparams.d_dr)), cparams))
        graph, params = cgraph, cparams
    return Hierarchy(levels=levels, assignments=list(assignments), committed=list(committed or [True] * len(assignments)))
