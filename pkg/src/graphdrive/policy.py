"""Graph-attention driving policy over in-view road agents.

The policy consumes four views of one world tick: per-agent node
features C, a scene latent z from the frozen context encoder, an
ego-motion vector m, and a local route vector G. Nodes are embedded,
optionally mixed with z, aggregated by a two-layer graph attention
stack (or a GCN / per-node-MLP baseline), and the ego node's output is
fused with MLP-transformed m and G to regress two bounded scalars:
kappa_v in [0, 1] (fraction of the speed limit) and kappa_theta in
[-1, 1] (fraction of a 90 degree course change). The gat_ctx_ctl
variant regresses device controls (steer, throttle, brake) directly.

Variants:
  gat_ctx      attention aggregation, latent mixed in (the full model)
  gat          attention aggregation, no latent
  gcn_u        graph convolution, uniform adjacency
  gcn_d        graph convolution, inverse-distance adjacency
  mlp          per-node MLP, no message passing
  gat_ctx_ctl  gat_ctx trunk with a direct-control head
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .guidance import guidance_errors, lane_flags
from .nn import MLP, ParamSet, kaiming_uniform
from .routing import Route, wrap_angle
from .simulate import WorldState
from .snapshot import load_snapshot, save_snapshot

VARIANTS = ("gat_ctx", "gat", "gcn_u", "gcn_d", "mlp", "gat_ctx_ctl")
_CONTEXT_VARIANTS = frozenset({"gat_ctx", "gat_ctx_ctl"})
_GAT_VARIANTS = frozenset({"gat_ctx", "gat", "gat_ctx_ctl"})

MS_TO_KMH = 3.6

# Node feature layout: (x, y, d, psi, vx, vy, ax, ay, w, l), ego frame.
NODE_DIM = 10
# Per-entry divisors applied before the node MLP. Yaw is already bounded.
NODE_SCALE = np.array([10.0, 10.0, 10.0, 1.0, 10.0, 10.0, 5.0, 5.0, 5.0, 5.0])

# Ego-motion layout: (tau_s, tau_t, tau_b, v_lim, vx, vy, ax, ay,
# e_v, e_cte, e_heading, F_l, F_r); v_lim and e_v in km/h.
M_DIM = 13
M_SCALE = np.array([1.0, 1.0, 1.0, 50.0, 10.0, 10.0, 5.0, 5.0,
                    50.0, 10.0, np.pi / 2.0, 1.0, 1.0])

ROUTE_POINTS = 75
ROUTE_SPACING = 0.4   # m between consecutive route-vector waypoints
ROUTE_SCALE = 10.0    # divisor for route coordinates
G_DIM = 2 * ROUTE_POINTS

THETA_RANGE_DEG = 90.0


@dataclass(frozen=True)
class PolicyConfig:
    variant: str = "gat_ctx"
    n_max: int = 32
    latent_dim: int = 64
    node_embed_dim: int = 128
    graph_dim: int = 256
    heads: int = 5
    fusion_dim: int = 1024
    head_hidden: tuple[int, int] = (512, 256)
    # Region of interest for non-ego nodes, ego frame (m): ahead,
    # behind, half width. Matches the rasterized field of view.
    roi_front: float = 25.0
    roi_back: float = 10.0
    roi_half_width: float = 10.0
    dtype: str = "f64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; "
                             f"expected one of {VARIANTS}")
        for name in ("n_max", "latent_dim", "node_embed_dim", "graph_dim",
                     "heads", "fusion_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.roi_front, self.roi_back, self.roi_half_width) <= 0:
            raise ValueError("roi extents must be > 0")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def uses_context(self) -> bool:
        return self.variant in _CONTEXT_VARIANTS

    @property
    def direct_control(self) -> bool:
        return self.variant == "gat_ctx_ctl"

    @property
    def graph_in_dim(self) -> int:
        return self.node_embed_dim + (self.latent_dim if self.uses_context
                                      else 0)

    @property
    def out_dim(self) -> int:
        return 3 if self.direct_control else 2


# ---------------------------------------------------------------------------
# feature construction

def _into_frame(c: float, s: float, x: float, y: float) -> tuple[float, float]:
    return c * x + s * y, -s * x + c * y


def build_node_features(world: WorldState, n_max: int = 32,
                        roi: tuple[float, float, float] = (25.0, 10.0, 10.0),
                        ) -> np.ndarray:
    """Per-agent feature rows (N, 10) in the ego frame, ego first.

    Non-ego agents outside the region of interest (roi = ahead, behind,
    half-width in m) are dropped; the rest are ordered by ascending
    distance (agent id breaks ties) and truncated to n_max rows total.
    """
    ego = world.ego
    c, s = np.cos(ego.yaw), np.sin(ego.yaw)
    front, back, half_w = roi

    def motion(agent):
        vx, vy = _into_frame(c, s, agent.vx, agent.vy)
        ax, ay = _into_frame(c, s, agent.ax, agent.ay)
        return vx, vy, ax, ay

    rows = [(0.0, 0.0, 0.0, 0.0, *motion(ego), ego.w, ego.l)]
    others = []
    for agent in world.agents[1:]:
        x, y = _into_frame(c, s, agent.x - ego.x, agent.y - ego.y)
        if not (-back <= x <= front and abs(y) <= half_w):
            continue
        d = float(np.hypot(x, y))
        psi = wrap_angle(agent.yaw - ego.yaw)
        others.append((d, agent.id,
                       (x, y, d, psi, *motion(agent), agent.w, agent.l)))
    others.sort(key=lambda item: (item[0], item[1]))
    rows.extend(row for _, _, row in others[:n_max - 1])
    return np.array(rows, dtype=np.float64)


def build_ego_vector(world: WorldState, route: Route) -> np.ndarray:
    """Ego-motion vector m (13,): controls, limits, errors, lane flags."""
    ego = world.ego
    s = route.project((ego.x, ego.y))[0]
    v_lim_kmh = route.v_lim_at(s)
    speed = ego.speed
    e_cte, e_heading, _ = guidance_errors(
        (ego.x, ego.y, ego.yaw), route, v_lim_kmh / MS_TO_KMH, speed)
    e_v_kmh = v_lim_kmh - speed * MS_TO_KMH
    c, cs = np.cos(ego.yaw), np.sin(ego.yaw)
    vx, vy = _into_frame(c, cs, ego.vx, ego.vy)
    ax, ay = _into_frame(c, cs, ego.ax, ego.ay)
    f_l, f_r = lane_flags((ego.x, ego.y), world.graph)
    return np.array([ego.steer, ego.throttle, ego.brake, v_lim_kmh,
                     vx, vy, ax, ay, e_v_kmh, e_cte, e_heading,
                     float(f_l), float(f_r)], dtype=np.float64)


def build_route_vector(route: Route, pose: tuple[float, float, float],
                       ) -> np.ndarray:
    """Local route vector G (150,): 75 ego-frame waypoints 0.4 m apart.

    The first waypoint is the route grid point nearest the ego's
    projection; past the route end the final point repeats.
    """
    x, y, yaw = pose
    s0 = route.project((x, y))[0]
    s0 = round(s0 / ROUTE_SPACING) * ROUTE_SPACING
    c, s = np.cos(yaw), np.sin(yaw)
    length = route.length
    pts = np.empty((ROUTE_POINTS, 2))
    for k in range(ROUTE_POINTS):
        p = route.line.point_at(min(s0 + k * ROUTE_SPACING, length))
        pts[k] = _into_frame(c, s, p[0] - x, p[1] - y)
    return pts.reshape(-1)


# ---------------------------------------------------------------------------
# aggregation layers

class GatLayer:
    """Multi-head graph attention over the complete graph with self-loops.

    Per head: alpha[k, j] = softmax_j(leaky_relu(a_l . Wh_k + a_r . Wh_j)),
    h'_k = relu(sum_j alpha[k, j] Wh_j). Heads are concatenated or
    averaged after the per-head activation.
    """

    def __init__(self, params: ParamSet, name: str, in_dim: int,
                 out_dim: int, heads: int, combine: str,
                 rng: np.random.Generator):
        if combine not in ("concat", "average"):
            raise ValueError(f"combine must be concat or average, "
                             f"got {combine!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.combine = combine
        self.heads = []
        for i in range(heads):
            w = params.add(f"{name}.w{i}",
                           kaiming_uniform(rng, (in_dim, out_dim), in_dim))
            a_l = params.add(f"{name}.al{i}",
                             kaiming_uniform(rng, (out_dim, 1), 2 * out_dim))
            a_r = params.add(f"{name}.ar{i}",
                             kaiming_uniform(rng, (out_dim, 1), 2 * out_dim))
            self.heads.append((w, a_l, a_r))

    def __call__(self, h: Tensor, distances=None,
                 ) -> tuple[Tensor, np.ndarray]:
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, "
                             f"got {h.shape[-1]}")
        n = h.shape[0]
        ones_row = Tensor(np.ones((1, n), dtype=h.data.dtype))
        ones_col = Tensor(np.ones((n, 1), dtype=h.data.dtype))
        outs, alphas = [], []
        for w, a_l, a_r in self.heads:
            hw = ad.matmul(h, w)
            left = ad.matmul(hw, a_l)                      # (N, 1)
            right = ad.matmul(hw, a_r)                     # (N, 1)
            logits = ad.add(ad.matmul(left, ones_row),
                            ad.matmul(ones_col, ad.transpose(right)))
            alpha = ad.softmax(ad.leaky_relu(logits, 0.2), axis=-1)
            outs.append(ad.relu(ad.matmul(alpha, hw)))
            alphas.append(alpha.data.copy())
        if self.combine == "concat":
            out = ad.concat(outs, axis=1)
        else:
            acc = outs[0]
            for o in outs[1:]:
                acc = ad.add(acc, o)
            out = ad.scale(acc, 1.0 / len(outs))
        return out, np.stack(alphas)


class GcnLayer:
    """Graph convolution with a fixed row-stochastic adjacency.

    uniform: every in-view node weighs 1/N. distance: node j weighs
    proportionally to 1/(1 + d_j) where d_j is its distance to the ego.
    """

    def __init__(self, params: ParamSet, name: str, in_dim: int,
                 out_dim: int, mode: str, rng: np.random.Generator):
        if mode not in ("uniform", "distance"):
            raise ValueError(f"mode must be uniform or distance, got {mode!r}")
        self.in_dim = in_dim
        self.mode = mode
        self.w = params.add(f"{name}.w",
                            kaiming_uniform(rng, (in_dim, out_dim), in_dim))
        self.b = params.add(f"{name}.b", np.zeros(out_dim))

    def adjacency(self, n: int, distances) -> np.ndarray:
        if self.mode == "uniform":
            return np.full((n, n), 1.0 / n)
        d = np.asarray(distances, dtype=np.float64)
        if d.shape != (n,):
            raise ValueError(f"need {n} node distances, got shape {d.shape}")
        row = 1.0 / (1.0 + d)
        a = np.tile(row, (n, 1))
        return a / a.sum(axis=1, keepdims=True)

    def __call__(self, h: Tensor, distances=None,
                 ) -> tuple[Tensor, np.ndarray]:
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, "
                             f"got {h.shape[-1]}")
        a = self.adjacency(h.shape[0], distances)
        hw = ad.matmul(h, self.w)
        out = ad.relu(ad.add(ad.matmul(Tensor(a.astype(h.data.dtype)), hw),
                             self.b))
        return out, a[None]


class NodeMlpLayer:
    """No message passing: each node transformed independently."""

    def __init__(self, params: ParamSet, name: str, in_dim: int,
                 out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.net = MLP(params, name, (in_dim, out_dim), rng,
                       final_activation="relu")

    def __call__(self, h: Tensor, distances=None,
                 ) -> tuple[Tensor, np.ndarray]:
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, "
                             f"got {h.shape[-1]}")
        return self.net(h), np.empty((0, h.shape[0], h.shape[0]))


# ---------------------------------------------------------------------------
# the assembled policy

@dataclass
class PolicyOutput:
    kappa_v: float
    kappa_theta: float
    attention: list[np.ndarray] = field(default_factory=list)
    controls: tuple[float, float, float] | None = None


class PolicyParams:
    """Parameter container + architecture for one policy variant."""

    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.float64 if cfg.dtype == "f64" else np.float32
        self.params = ParamSet(dtype)
        rng = np.random.default_rng(seed)
        p = self.params
        self.node_mlp = MLP(p, "node", (NODE_DIM, cfg.node_embed_dim,
                                        cfg.node_embed_dim), rng,
                            final_activation="relu")
        gin, gdim = cfg.graph_in_dim, cfg.graph_dim
        if cfg.variant in _GAT_VARIANTS:
            self.agg = [
                GatLayer(p, "gat1", gin, gdim, cfg.heads, "concat", rng),
                GatLayer(p, "gat2", gdim * cfg.heads, gdim, cfg.heads,
                         "average", rng),
            ]
        elif cfg.variant in ("gcn_u", "gcn_d"):
            mode = "uniform" if cfg.variant == "gcn_u" else "distance"
            self.agg = [GcnLayer(p, "gcn1", gin, gdim, mode, rng),
                        GcnLayer(p, "gcn2", gdim, gdim, mode, rng)]
        else:
            self.agg = [NodeMlpLayer(p, "node_stack1", gin, gdim, rng),
                        NodeMlpLayer(p, "node_stack2", gdim, gdim, rng)]
        self.f_m = MLP(p, "f_m", (M_DIM, 128, cfg.fusion_dim), rng,
                       final_activation="relu")
        self.f_g = MLP(p, "f_g", (G_DIM, 256, cfg.fusion_dim), rng,
                       final_activation="relu")
        self.f_h = MLP(p, "f_h", (gdim, 512, cfg.fusion_dim), rng,
                       final_activation="relu")
        self.head = MLP(p, "head", (3 * cfg.fusion_dim, *cfg.head_hidden,
                                    cfg.out_dim), rng, final_activation=None)


def policy_forward_graph(pp: PolicyParams, c: np.ndarray,
                         z: np.ndarray | None, m: np.ndarray, g: np.ndarray,
                         ) -> tuple[Tensor, list[np.ndarray]]:
    """Raw head outputs (1, out_dim) plus per-layer attention stacks.

    Differentiable when called under an active tape; inputs are
    standardized here so callers always pass raw-unit features.
    """
    cfg = pp.cfg
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != NODE_DIM:
        raise ValueError(f"node features must be (N, {NODE_DIM}), "
                         f"got {c.shape}")
    dtype = pp.params.dtype
    h = pp.node_mlp(Tensor((c / NODE_SCALE).astype(dtype)))
    if cfg.uses_context:
        if z is None:
            raise ValueError(f"variant {cfg.variant!r} needs a latent z")
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.size != cfg.latent_dim:
            raise ValueError(f"expected latent of length {cfg.latent_dim}, "
                             f"got {z.size}")
        ztile = np.repeat(z[None, :], c.shape[0], axis=0).astype(dtype)
        h = ad.concat([h, Tensor(ztile)], axis=1)
    distances = c[:, 2]
    attention = []
    for layer in pp.agg:
        h, alpha = layer(h, distances)
        attention.append(alpha)
    h1 = ad.narrow(h, 0, 0, 1)                       # ego node, (1, graph_dim)
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if m.size != M_DIM:
        raise ValueError(f"ego vector must have {M_DIM} entries, got {m.size}")
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.size != G_DIM:
        raise ValueError(f"route vector must have {G_DIM} entries, "
                         f"got {g.size}")
    fm = pp.f_m(Tensor((m / M_SCALE)[None, :].astype(dtype)))
    fg = pp.f_g(Tensor((g / ROUTE_SCALE)[None, :].astype(dtype)))
    fh = pp.f_h(h1)
    raw = pp.head(ad.concat([fm, fg, fh], axis=1))
    return raw, attention


def policy_forward(pp: PolicyParams, c: np.ndarray, z: np.ndarray | None,
                   m: np.ndarray, g: np.ndarray) -> PolicyOutput:
    """Inference: bounded output scalars plus attention diagnostics."""
    raw, attention = policy_forward_graph(pp, c, z, m, g)
    out = raw.data[0]
    if pp.cfg.direct_control:
        steer = float(np.tanh(out[0]))
        throttle = 1.0 / (1.0 + np.exp(-float(out[1])))
        brake = 1.0 / (1.0 + np.exp(-float(out[2])))
        return PolicyOutput(0.0, 0.0, attention, (steer, throttle, brake))
    kv = 1.0 / (1.0 + np.exp(-float(out[0])))
    kt = float(np.tanh(out[1]))
    return PolicyOutput(kv, kt, attention)


def policy_loss_graph(raw: Tensor, v_lim: float, v_label: float,
                      theta_label: float) -> Tensor:
    """L1 imitation loss in km/h + degrees for one sample.

    raw is the (1, 2) head output; targets are v_T = v_lim * sigmoid and
    theta_T = 90 deg * tanh against labels in the same units.
    """
    v_t = ad.scale(ad.sigmoid(ad.narrow(raw, 1, 0, 1)), float(v_lim))
    th_t = ad.scale(ad.tanh(ad.narrow(raw, 1, 1, 1)), THETA_RANGE_DEG)
    loss_v = ad.absolute(ad.shift(v_t, -float(v_label)))
    loss_th = ad.absolute(ad.shift(th_t, -float(theta_label)))
    return ad.reshape(ad.add(loss_v, loss_th), ())


def control_loss_graph(raw: Tensor, controls: tuple[float, float, float],
                       ) -> Tensor:
    """L1 loss against executed (steer, throttle, brake) labels."""
    steer = ad.tanh(ad.narrow(raw, 1, 0, 1))
    throttle = ad.sigmoid(ad.narrow(raw, 1, 1, 1))
    brake = ad.sigmoid(ad.narrow(raw, 1, 2, 1))
    loss = ad.add(ad.absolute(ad.shift(steer, -float(controls[0]))),
                  ad.add(ad.absolute(ad.shift(throttle, -float(controls[1]))),
                         ad.absolute(ad.shift(brake, -float(controls[2])))))
    return ad.reshape(loss, ())


def policy_loss(kappa_v: float, kappa_theta: float, v_lim: float,
                v_label: float, theta_label: float) -> float:
    """Numpy twin of policy_loss_graph for reporting."""
    v_t = v_lim * kappa_v
    th_t = THETA_RANGE_DEG * kappa_theta
    return float(abs(v_t - v_label) + abs(th_t - theta_label))


# ---------------------------------------------------------------------------
# persistence

def save_policy(path, pp: PolicyParams) -> None:
    meta = {
        "kind": "policy",
        "config": asdict(pp.cfg),
        "node_scale": NODE_SCALE.tolist(),
        "m_scale": M_SCALE.tolist(),
        "route_scale": ROUTE_SCALE,
        "route_points": ROUTE_POINTS,
        "route_spacing": ROUTE_SPACING,
    }
    save_snapshot(path, pp.params.state_arrays(), meta)


def load_policy(path) -> PolicyParams:
    arrays, meta = load_snapshot(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"snapshot at {path} is not a policy "
                         f"(kind={meta.get('kind')!r})")
    raw = dict(meta["config"])
    raw["head_hidden"] = tuple(raw["head_hidden"])
    cfg = PolicyConfig(**raw)
    pp = PolicyParams(cfg, seed=0)
    pp.params.load_arrays(arrays)
    return pp
