"""Forward integration of the second-order spring-mass system.

Forces follow M x'' + D x' + L x = f_contact + u: Hookean axial springs
(or the literal Laplacian product in ``linear`` mode), shared dashpot plus
drag damping, and a smooth penalty ground contact.  Controller nodes are
kinematic (prescribed positions interpolated per substep); boundary nodes
are pinned.  The default integrator is semi-implicit (symplectic) Euler,
velocity first.

All math goes through :mod:`springmor.autodiff` helpers, so the same code
integrates plain arrays (fast path) or records onto a tape for gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import DivergedSimulation, InvalidConfig
from .graph import SpringGraph

log = logging.getLogger(__name__)

FRICTION_EPS = 1e-4  # m/s, smoothed Coulomb cap
DEGENERATE_EDGE_LENGTH = 1e-9  # m


@dataclass
class ContactCoeffs:
    """Ground-contact coefficients; fields may be scalars or recorded tensors."""

    restitution: object = 0.3
    friction: object = 0.5
    contact_stiffness: object = 1000.0

    def validate(self) -> None:
        e = float(value_of(self.restitution))
        mu = float(value_of(self.friction))
        kc = float(value_of(self.contact_stiffness))
        if not (0.0 <= e <= 1.0):
            raise InvalidConfig(f"restitution {e} outside [0, 1]")
        if mu < 0.0:
            raise InvalidConfig(f"friction {mu} negative")
        if kc <= 0.0:
            raise InvalidConfig(f"contact stiffness {kc} must be positive")

    def raw(self) -> "ContactCoeffs":
        return ContactCoeffs(
            float(value_of(self.restitution)),
            float(value_of(self.friction)),
            float(value_of(self.contact_stiffness)),
        )


@dataclass
class MechParams:
    """Learnable mechanical tuple of one level."""

    stiffness: object  # (E,) N/m
    d_dp: object  # dashpot, N*s/m
    d_dr: object  # drag, N*s/m
    contact: ContactCoeffs

    def raw(self) -> "MechParams":
        return MechParams(
            np.array(value_of(self.stiffness), dtype=np.float64),
            float(value_of(self.d_dp)),
            float(value_of(self.d_dr)),
            self.contact.raw(),
        )


@dataclass
class DynamicState:
    """Positions and velocities of all nodes at one frame."""

    positions: object  # (N, 3) m
    velocities: object  # (N, 3) m/s
    frame_index: int = 0

    def raw(self) -> "DynamicState":
        return DynamicState(
            np.array(value_of(self.positions), dtype=np.float64),
            np.array(value_of(self.velocities), dtype=np.float64),
            self.frame_index,
        )


@dataclass
class ControllerScript:
    """Prescribed positions for the controller nodes, one row set per frame."""

    indices: np.ndarray  # (C,) node ids
    trajectory: np.ndarray  # (T+1, C, 3) m

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.trajectory = np.asarray(self.trajectory, dtype=np.float64)
        if self.trajectory.ndim != 3 or self.trajectory.shape[1] != self.indices.size:
            raise InvalidConfig("controller trajectory shape must be (frames, |indices|, 3)")
        if not np.all(np.isfinite(self.trajectory)):
            raise InvalidConfig("controller trajectory must be finite")

    @property
    def frames(self) -> int:
        return self.trajectory.shape[0]

    @staticmethod
    def empty(frames: int) -> "ControllerScript":
        return ControllerScript(np.zeros(0, dtype=np.int64), np.zeros((frames, 0, 3)))


@dataclass
class SimOptions:
    force_mode: str = "rest_length"  # or "linear"
    integrator: str = "symplectic"  # or "explicit" (debugging)
    contact: bool = True
    plane_height: float = 0.0


@dataclass
class Trajectory:
    positions: np.ndarray  # (T+1, N, 3)
    velocities: np.ndarray  # (T+1, N, 3)
    dt: float

    @property
    def frames(self) -> int:
        return self.positions.shape[0] - 1


def _spring_edge_force(x, graph: SpringGraph, s_col, mode: str):
    """(E, 3) per-edge force on node i (node j receives the negative)."""
    d = ad.spmm(graph.diff_op, x)  # (E, 3) x_j - x_i
    if mode == "linear":
        return ad.mul(s_col, d)
    if mode != "rest_length":
        raise InvalidConfig(f"unknown force mode {mode!r}")
    e = graph.edge_count
    length = ad.norm_rows(d)  # (E, 1)
    degenerate = value_of(length)[:, 0] < DEGENERATE_EDGE_LENGTH
    if not np.any(degenerate):
        # s*(len - r)*d/len written as d * s*(1 - r/len)
        coef = ad.mul(s_col, ad.sub(1.0, ad.div(graph.rest_lengths[:, None], length)))
        return ad.mul(d, coef)
    log.warning("DegenerateEdge: %d coincident edges, using +x fallback", int(degenerate.sum()))
    mask = degenerate[:, None]
    safe = ad.where(mask, np.ones((e, 1)), length)
    coef = ad.mul(s_col, ad.sub(1.0, ad.div(graph.rest_lengths[:, None], safe)))
    fallback_mag = ad.mul(s_col, -graph.rest_lengths[:, None])  # s*(0 - r) along +x
    fallback = ad.concat([fallback_mag, np.zeros((e, 2))], axis=1)
    return ad.where(np.broadcast_to(mask, (e, 3)), fallback, ad.mul(d, coef))


def _stiffness_col(graph, params):
    return ad.reshape(params.stiffness, (graph.edge_count, 1))


def spring_force(state, graph: SpringGraph, params: MechParams, mode: str = "rest_length"):
    """Per-node spring forces; total force sums to zero in both modes."""
    f_edge = _spring_edge_force(state.positions, graph, _stiffness_col(graph, params), mode)
    return ad.spmm(graph.accum_op, f_edge)


def damping_force(state, graph: SpringGraph, params: MechParams):
    """-D @ v: dashpot on relative velocities plus drag on absolute ones."""
    v = state.velocities
    rel = ad.spmm(graph.diff_op, v)  # (E, 3) v_j - v_i
    dash = ad.spmm(graph.accum_op, ad.mul(rel, params.d_dp))
    return ad.sub(dash, ad.mul(v, params.d_dr))


def contact_force(state, contact: ContactCoeffs, plane_height: float = 0.0):
    """Smooth penalty ground contact: spring normal with restitution-scaled
    normal damping and a capped, smoothed Coulomb friction force."""
    x, v = state.positions, state.velocities
    n = np.shape(value_of(x))[0]
    if not np.any(value_of(x)[:, 2] < plane_height):
        # no penetration: force and all derivatives vanish identically
        return np.zeros((n, 3))
    z = x[:, 2:3]
    pen = ad.maximum(ad.sub(plane_height, z), 0.0)  # (N, 1)
    touching = value_of(pen) > 0.0
    kc, e, mu = contact.contact_stiffness, contact.restitution, contact.friction

    vz_neg = ad.minimum(v[:, 2:3], 0.0)
    normal = ad.add(
        ad.mul(ad.mul(pen, kc), ad.add(e, 1.0)),
        ad.where(touching, ad.mul(ad.mul(vz_neg, kc), ad.mul(e, -1.0)), np.zeros((n, 1))),
    )
    vt = v[:, 0:2]
    vt_norm = ad.norm_rows(vt)
    cap = ad.div(ad.mul(normal, mu), ad.add(vt_norm, FRICTION_EPS))
    kc_arr = ad.mul(kc, np.ones((n, 1)))
    factor = ad.where(value_of(cap) <= value_of(kc_arr), cap, kc_arr)
    factor = ad.where(touching, factor, np.zeros((n, 1)))
    tangential = ad.mul(ad.mul(vt, factor), -1.0)
    return ad.concat([tangential, normal], axis=1)


def _controller_targets(script: ControllerScript, frame: int, dt: float):
    p0 = script.trajectory[frame]
    p1 = script.trajectory[frame + 1]
    return p0, p1, (p1 - p0) / dt


def step(
    state: DynamicState,
    script: ControllerScript,
    graph: SpringGraph,
    params: MechParams,
    dt: float,
    substeps: int,
    gravity,
    opts: SimOptions | None = None,
) -> DynamicState:
    """Advance one frame with `substeps` integrator substeps."""
    opts = opts or SimOptions()
    if substeps < 1 or dt <= 0:
        raise InvalidConfig("need substeps >= 1 and dt > 0")
    t = state.frame_index
    if script.frames < t + 2:
        raise InvalidConfig(f"controller script has no target for frame {t + 1}")
    h = dt / substeps
    gravity = np.asarray(gravity, dtype=np.float64)
    base_force = graph.masses[:, None] * gravity  # constant per node
    h_inv_m = (h / graph.masses)[:, None]
    ctrl, bnd = graph.controller_ids, graph.boundary_ids
    p0, p1, ctrl_v = _controller_targets(script, t, dt)
    zeros_b = np.zeros((bnd.size, 3))
    bnd_x = np.array(value_of(state.positions))[bnd]
    s_col = _stiffness_col(graph, params)
    d_dp = params.d_dp

    x, v = state.positions, state.velocities
    for k in range(1, substeps + 1):
        # per-edge spring + dashpot terms accumulate in one pass
        f_edge = _spring_edge_force(x, graph, s_col, opts.force_mode)
        f_edge = ad.add(f_edge, ad.mul(ad.spmm(graph.diff_op, v), d_dp))
        f = ad.add(ad.spmm(graph.accum_op, f_edge), base_force)
        f = ad.sub(f, ad.mul(v, params.d_dr))
        if opts.contact and np.any(value_of(x)[:, 2] < opts.plane_height):
            f = ad.add(f, contact_force(DynamicState(x, v, t), params.contact, opts.plane_height))
        if opts.integrator == "explicit":
            x_next = ad.add(x, ad.mul(v, h))
            v = ad.add(v, ad.mul(f, h_inv_m))
            x = x_next
        else:
            v = ad.add(v, ad.mul(f, h_inv_m))
        if ctrl.size:
            v = ad.row_set(v, ctrl, ctrl_v)
        if bnd.size:
            v = ad.row_set(v, bnd, zeros_b)
        if opts.integrator != "explicit":
            x = ad.add(x, ad.mul(v, h))
        if ctrl.size:
            # land exactly on the scripted target at the frame boundary
            target = p1 if k == substeps else p0 + (k / substeps) * (p1 - p0)
            x = ad.row_set(x, ctrl, target)
        if bnd.size and opts.integrator == "explicit":
            x = ad.row_set(x, bnd, bnd_x)
    out = DynamicState(x, v, t + 1)
    if not (np.all(np.isfinite(value_of(x))) and np.all(np.isfinite(value_of(v)))):
        raise DivergedSimulation(
            t + 1, _locate_divergence(state, script, graph, params, dt, substeps, gravity, opts)
        )
    return out


def _locate_divergence(state, script, graph, params, dt, substeps, gravity, opts):
    """Re-run a diverged frame substep by substep to report where it blew up."""
    h = dt / substeps
    base_force = graph.masses[:, None] * np.asarray(gravity, dtype=np.float64)
    inv_m = (1.0 / graph.masses)[:, None]
    ctrl, bnd = graph.controller_ids, graph.boundary_ids
    t = state.frame_index
    p0, p1, ctrl_v = _controller_targets(script, t, dt)
    x = np.array(value_of(state.positions))
    v = np.array(value_of(state.velocities))
    raw_params = params.raw() if isinstance(params, MechParams) else params
    for k in range(1, substeps + 1):
        cur = DynamicState(x, v, t)
        f = value_of(spring_force(cur, graph, raw_params, opts.force_mode))
        f = f + value_of(damping_force(cur, graph, raw_params))
        if opts.contact:
            f = f + value_of(contact_force(cur, raw_params.contact, opts.plane_height))
        f = f + base_force
        v = v + h * inv_m * f
        if ctrl.size:
            v[ctrl] = ctrl_v
        if bnd.size:
            v[bnd] = 0.0
        x = x + h * v
        if ctrl.size:
            x[ctrl] = p1 if k == substeps else p0 + (k / substeps) * (p1 - p0)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            return k
    return substeps


def rollout(
    z0: DynamicState,
    script: ControllerScript,
    graph: SpringGraph,
    params: MechParams,
    frames: int,
    dt: float,
    substeps: int,
    gravity,
    opts: SimOptions | None = None,
) -> Trajectory:
    """Integrate `frames` steps from z0; deterministic given its inputs."""
    if frames < 1:
        raise InvalidConfig("frames must be >= 1")
    n = graph.node_count
    xs = np.empty((frames + 1, n, 3))
    vs = np.empty((frames + 1, n, 3))
    state = z0.raw()
    xs[0], vs[0] = state.positions, state.velocities
    for t in range(frames):
        state = step(state, script, graph, params, dt, substeps, gravity, opts)
        xs[t + 1] = value_of(state.positions)
        vs[t + 1] = value_of(state.velocities)
    return Trajectory(xs, vs, dt)


def mechanical_energy(
    state: DynamicState,
    graph: SpringGraph,
    params: MechParams,
    gravity=None,
    mode: str = "rest_length",
) -> float:
    """Kinetic + elastic (+ gravitational) energy of a raw state."""
    x = np.asarray(value_of(state.positions))
    v = np.asarray(value_of(state.velocities))
    s = np.asarray(value_of(params.stiffness))
    kin = 0.5 * float(np.sum(graph.masses[:, None] * v * v))
    d = graph.diff_op @ x
    if mode == "linear":
        elastic = 0.5 * float(np.sum(s * np.sum(d * d, axis=1)))
    else:
        stretch = np.sqrt(np.sum(d * d, axis=1)) - graph.rest_lengths
        elastic = 0.5 * float(np.sum(s * stretch**2))
    pot = 0.0
    if gravity is not None:
        pot = -float(np.sum(graph.masses[:, None] * x * np.asarray(gravity)))
    return kin + elastic + pot
