"""Message-passing network, learned clustering block, and parameter heads.

The encoder embeds node attributes (position, mass, type one-hot, and a
NeRF-style high-frequency positional encoding) and edge geometry, then
updates features with shared edge/node MLPs.  The clustering block turns
latent distances to farthest-point-sampled seed nodes into a hard one-hot
assignment via Gumbel-Softmax with a straight-through estimator.  Decoder
heads emit residual corrections on top of the Galerkin parameter
estimates, squashed so stiffness and damping stay in their valid ranges.

Edge features are treated symmetrically in the two endpoints (both
orientations are encoded and averaged), which is what makes the whole
stack equivariant under node relabelling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .dynamics import ContactCoeffs, MechParams
from .errors import InvalidConfig
from .graph import SpringGraph

PE_OCTAVES = 5  # frequencies 2^0 .. 2^4, giving 3*2*5 = 30 encoding dims
NODE_IN_DIM = 3 + 1 + 3 + 3 * 2 * PE_OCTAVES
EDGE_IN_DIM = 4
N_NODE_TYPES = 3
STIFFNESS_MIN = 1e-3  # N/m
CLAMP_WIDTH = 1e-3


def positional_encoding(x) -> np.ndarray:
    """Sin/cos features over 5 octaves; coordinate-major, sin before cos.

    Accepts a single 3-vector or an (N, 3) array; returns 30 entries per
    point: for each coordinate c and frequency f in {1,2,4,8,16}, the pair
    (sin(pi f c), cos(pi f c)).
    """
    pts = np.asarray(x, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if not np.all(np.isfinite(pts)):
        raise InvalidConfig("positional encoding input must be finite")
    freqs = 2.0 ** np.arange(PE_OCTAVES)
    ang = np.pi * pts[:, :, None] * freqs[None, None, :]  # (N, 3, F)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(pts.shape[0], -1)
    return out[0] if squeeze else out


def one_hot_types(graph: SpringGraph) -> np.ndarray:
    out = np.zeros((graph.node_count, N_NODE_TYPES))
    out[np.arange(graph.node_count), graph.node_types] = 1.0
    return out


# ---------------------------------------------------------------------------
# weights


def _mlp_shapes(d_in, hidden, d_out):
    dims = [d_in] + list(hidden) + [d_out]
    return list(zip(dims[:-1], dims[1:]))


def _init_mlp(arrays, prefix, d_in, hidden, d_out, rng, zero_last=False):
    shapes = _mlp_shapes(d_in, hidden, d_out)
    for k, (fan_in, fan_out) in enumerate(shapes):
        last = k == len(shapes) - 1
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        arrays[f"{prefix}/W{k}"] = w
        arrays[f"{prefix}/b{k}"] = b


def mlp_forward(weights, prefix: str, x):
    """Hidden layers with softplus activations and a linear output layer."""
    k = 0
    h = x
    while f"{prefix}/W{k}" in weights:
        h = ad.add(ad.matmul(h, weights[f"{prefix}/W{k}"]), weights[f"{prefix}/b{k}"])
        k += 1
        if f"{prefix}/W{k}" in weights:
            h = ad.softplus(h)
    if k == 0:
        raise InvalidConfig(f"no weights found under prefix {prefix!r}")
    return h


@dataclass
class NetWeights:
    """Architecture metadata plus the named weight arrays.

    Per-level edge/node update MLPs exist in encoder and decoder copies;
    the parameter heads (stiffness, dashpot, drag, contact) are shared
    across levels.  Head output layers start at zero so training begins
    exactly at the Galerkin baseline.
    """

    levels: int  # L: number of coarsening steps; L+1 feature levels
    d_latent: int = 128
    rounds: int = 2
    beta_scale: float = 0.1  # residual scale relative to the baseline magnitude
    arrays: dict = field(default_factory=dict)

    @staticmethod
    def create(levels: int, d_latent: int = 128, rounds: int = 2, rng=None, beta_scale: float = 0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        w = NetWeights(levels=levels, d_latent=d_latent, rounds=rounds, beta_scale=beta_scale)
        d = d_latent
        hidden = (d, d)
        a = w.arrays
        _init_mlp(a, "enc_v", NODE_IN_DIM, hidden, d, rng)
        _init_mlp(a, "enc_e", EDGE_IN_DIM, hidden, d, rng)
        for side in ("enc", "dec"):
            for l in range(levels + 1):
                _init_mlp(a, f"phi_e/{side}/l{l}", 3 * d + 2 * N_NODE_TYPES, hidden, d, rng)
                _init_mlp(a, f"phi_v/{side}/l{l}", 2 * d, hidden, d, rng)
        _init_mlp(a, "head_s", d, hidden, 1, rng, zero_last=True)
        _init_mlp(a, "head_dp", d, hidden, 1, rng, zero_last=True)
        _init_mlp(a, "head_dr", d, hidden, 1, rng, zero_last=True)
        _init_mlp(a, "head_eta", d, hidden, 3, rng, zero_last=True)
        return w

    def head_names(self) -> list[str]:
        return [k for k in self.arrays if k.startswith("head_eta/")]


# ---------------------------------------------------------------------------
# encoder / message passing


def encode(graph: SpringGraph, weights) -> tuple:
    """Initial node and edge latents at one level from raw geometry."""
    pos = graph.positions0
    node_in = np.concatenate(
        [pos, graph.masses[:, None], one_hot_types(graph), positional_encoding(pos)], axis=1
    )
    h = mlp_forward(weights, "enc_v", node_in)

    i, j = graph.edges[:, 0], graph.edges[:, 1]
    diff = pos[i] - pos[j]
    length = np.sqrt(np.einsum("ij,ij->i", diff, diff))[:, None]
    fwd = np.concatenate([diff, length], axis=1)
    rev = np.concatenate([-diff, length], axis=1)
    both = mlp_forward(weights, "enc_e", np.concatenate([fwd, rev], axis=0))
    e_cnt = graph.edge_count
    e = ad.mul(ad.add(both[:e_cnt], both[e_cnt:]), 0.5)
    return h, e


def message_pass(
    nodes,
    edges,
    graph: SpringGraph,
    node_types_onehot,
    weights,
    rounds: int,
    side: str = "enc",
    level: int = 0,
):
    """Edge update then aggregate-and-update node features, `rounds` times.

    The edge MLP is evaluated in both endpoint orders and averaged, so the
    result is independent of edge orientation; aggregation sums the shared
    edge feature into both endpoints in fixed order.
    """
    if rounds < 1:
        raise InvalidConfig("rounds must be >= 1")
    e_prefix, v_prefix = f"phi_e/{side}/l{level}", f"phi_v/{side}/l{level}"
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    e_cnt = graph.edge_count
    tau_i, tau_j = node_types_onehot[i], node_types_onehot[j]
    h, e = nodes, edges
    for _ in range(rounds):
        if e_cnt:
            hi = ad.gather_rows(h, i)
            hj = ad.gather_rows(h, j)
            fwd = ad.concat([hi, hj, e, np.concatenate([tau_i, tau_j], axis=1)], axis=1)
            rev = ad.concat([hj, hi, e, np.concatenate([tau_j, tau_i], axis=1)], axis=1)
            both = mlp_forward(weights, e_prefix, ad.concat([fwd, rev], axis=0))
            e = ad.mul(ad.add(both[:e_cnt], both[e_cnt:]), 0.5)
            agg = ad.spmm(graph.incidence_op, e)
        else:
            agg = np.zeros_like(value_of(h))
        h = mlp_forward(weights, v_prefix, ad.concat([h, agg], axis=1))
    return h, e


def select_seeds(positions0: np.ndarray, count: int) -> np.ndarray:
    """Farthest-point sampling; the first seed is farthest from the centroid.

    Ties resolve to the lower node index, so the selection is deterministic.
    """
    pts = np.asarray(positions0, dtype=np.float64)
    n = pts.shape[0]
    if not (1 <= count < n):
        raise InvalidConfig(f"seed count {count} must satisfy 1 <= count < N={n}")
    centroid = pts.mean(axis=0)
    d0 = np.linalg.norm(pts - centroid, axis=1)
    seeds = [int(np.argmax(d0))]
    dist = np.linalg.norm(pts - pts[seeds[0]], axis=1)
    while len(seeds) < count:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(sorted(seeds), dtype=np.int64)


@dataclass
class AssignmentMatrix:
    """Hard one-hot node-to-cluster map plus its soft relaxation."""

    hard: np.ndarray  # (N, K) one-hot rows
    soft: object  # (N, K) row-stochastic; Tensor while recording
    seed_ids: np.ndarray  # (K,) fine-level nodes serving as cluster centers

    @property
    def labels(self) -> np.ndarray:
        return self.hard.argmax(axis=1)

    @property
    def shape(self):
        return self.hard.shape

    def ste_tensor(self):
        """Hard forward / soft backward assignment for recorded pipelines."""
        if self.soft is None:
            return self.hard
        return ad.straight_through(self.hard, self.soft)

    @staticmethod
    def from_labels(labels: np.ndarray, k: int, seed_ids=None) -> "AssignmentMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        hard = np.zeros((labels.size, k))
        hard[np.arange(labels.size), labels] = 1.0
        if seed_ids is None:
            seed_ids = np.arange(k, dtype=np.int64)
        return AssignmentMatrix(hard, None, np.asarray(seed_ids, dtype=np.int64))


def clasp_assign(nodes, seed_ids, temperature: float, rng=None, noise: bool = False) -> AssignmentMatrix:
    """Cluster nodes onto seed columns from latent distances.

    Soft assignment is a row softmax of (-distance + Gumbel noise) / lambda;
    the hard assignment is its row argmax with every seed forced onto its
    own column so no cluster is empty.
    """
    seed_ids = np.asarray(seed_ids, dtype=np.int64)
    if seed_ids.size == 0:
        raise InvalidConfig("need at least one seed")
    if temperature <= 0:
        raise InvalidConfig("temperature must be positive")
    hs = ad.gather_rows(nodes, seed_ids)  # (K, d)
    # ||h_i - h_s||^2 = |h_i|^2 + |h_s|^2 - 2 h_i . h_s
    hn = ad.asum(ad.mul(nodes, nodes), axis=1, keepdims=True)  # (N, 1)
    sn = ad.reshape(ad.asum(ad.mul(hs, hs), axis=1, keepdims=True), (1, seed_ids.size))
    cross = ad.matmul(nodes, ad.transpose(hs))
    d2 = ad.add(ad.add(hn, sn), ad.mul(cross, -2.0))
    # each seed's own-column distance is identically zero; pinning it kills
    # the rounding noise the expansion formula leaves there
    self_mask = np.zeros(value_of(d2).shape, dtype=bool)
    self_mask[seed_ids, np.arange(seed_ids.size)] = True
    d2 = ad.where(self_mask, np.zeros(self_mask.shape), d2)
    # the floor keeps sqrt well-conditioned near zero distances
    dist = ad.sqrt(ad.add(ad.maximum(d2, 0.0), 1e-12))
    logits = ad.mul(dist, -1.0)
    if noise:
        rng = np.random.default_rng(0) if rng is None else rng
        logits = ad.add(logits, rng.gumbel(size=value_of(logits).shape))
    soft = ad.softmax_rows(ad.mul(logits, 1.0 / float(temperature)))

    labels = np.argmax(value_of(soft), axis=1)
    labels[seed_ids] = np.arange(seed_ids.size)  # seeds self-assign
    hard = np.zeros(value_of(soft).shape)
    hard[np.arange(labels.size), labels] = 1.0
    return AssignmentMatrix(hard, soft, seed_ids)


def decode_params(
    node_feats,
    edge_feats,
    base: MechParams,
    weights,
    beta_s: float,
    beta_d: float,
    s_min: float = STIFFNESS_MIN,
) -> MechParams:
    """Galerkin baseline plus scaled residual head corrections.

    Stiffness gets a per-edge residual; dashpot/drag get scalar residuals
    from the pooled edge feature; contact coefficients come from a head on
    the pooled node feature, squashed into their valid ranges.  All floors
    are smooth so gradients survive near the bounds.
    """
    e_cnt = np.shape(value_of(edge_feats))[0]
    ds = ad.reshape(mlp_forward(weights, "head_s", edge_feats), (e_cnt,))
    stiff = ad.smooth_floor(ad.add(base.stiffness, ad.mul(ds, beta_s)), s_min, CLAMP_WIDTH)

    if e_cnt:
        pooled_e = ad.mul(ad.asum(edge_feats, axis=0, keepdims=True), 1.0 / e_cnt)
    else:
        pooled_e = np.zeros((1, np.shape(value_of(node_feats))[1]))
    ddp = ad.reshape(mlp_forward(weights, "head_dp", pooled_e), ())
    ddr = ad.reshape(mlp_forward(weights, "head_dr", pooled_e), ())
    d_dp = ad.smooth_floor(ad.add(base.d_dp, ad.mul(ddp, beta_d)), 0.0, CLAMP_WIDTH)
    d_dr = ad.smooth_floor(ad.add(base.d_dr, ad.mul(ddr, beta_d)), 0.0, CLAMP_WIDTH)

    n_cnt = np.shape(value_of(node_feats))[0]
    pooled_n = ad.mul(ad.asum(node_feats, axis=0, keepdims=True), 1.0 / n_cnt)
    eta = mlp_forward(weights, "head_eta", pooled_n)  # (1, 3) residual on raw coefficients
    raw_e = ad.add(ad.reshape(eta[0:1, 0:1], ()), base.contact.restitution)
    raw_mu = ad.add(ad.reshape(eta[0:1, 1:2], ()), base.contact.friction)
    raw_kc = ad.add(ad.reshape(eta[0:1, 2:3], ()), base.contact.contact_stiffness)
    contact = ContactCoeffs(
        restitution=ad.sigmoid(raw_e),
        friction=ad.softplus(raw_mu),
        contact_stiffness=ad.softplus(raw_kc),
    )
    return MechParams(stiff, d_dp, d_dr, contact)


def contact_raw_from_coeffs(c: ContactCoeffs) -> tuple[float, float, float]:
    """Pre-squash parameter values whose squashed images equal the inputs."""

    def logit(p):
        p = min(max(float(p), 1e-9), 1 - 1e-9)
        return float(np.log(p / (1 - p)))

    def inv_softplus(y):
        y = float(y)
        if y > 20.0:  # softplus is the identity to double precision here
            return y
        return float(np.log(np.expm1(max(y, 1e-12))))

    return (
        logit(value_of(c.restitution)),
        inv_softplus(value_of(c.friction)),
        inv_softplus(value_of(c.contact_stiffness)),
    )
