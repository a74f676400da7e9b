"""Policy tests: attention laws vs per-edge oracle, invariances, losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphdrive import autodiff as ad
from graphdrive.autodiff import Tape, Tensor
from graphdrive.nn import ParamSet
from graphdrive.policy import (GatLayer, GcnLayer, NodeMlpLayer, PolicyConfig,
                               PolicyParams, build_ego_vector,
                               build_node_features, build_route_vector,
                               control_loss_graph, load_policy, policy_forward,
                               policy_forward_graph, policy_loss,
                               policy_loss_graph, save_policy)
from graphdrive.routing import plan_route
from graphdrive.simulate import AgentState, WorldState
from graphdrive.worldmap import Lane, MapGraph, Polyline

TINY = PolicyConfig(latent_dim=4, node_embed_dim=8, graph_dim=8, heads=2,
                    fusion_dim=16, head_hidden=(8, 8))


def make_lane(lid, pts, succ=(), width=3.5, speed=50.0,
              left="solid", right="solid"):
    return Lane(lid, width, speed, left, right, list(succ),
                Polyline(np.asarray(pts, dtype=float)))


def straight_world(agent_specs=(), lane_len=300.0, ego_x=50.0,
                   left="broken", right="solid"):
    """Ego eastbound at (ego_x, 0) plus (x, y, yaw, vx, vy) vehicle specs."""
    graph = MapGraph("t", "t", {"a": make_lane("a", [(0, 0), (lane_len, 0)],
                                               left=left, right=right)},
                     [], [], [], [])
    agents = [AgentState(0, "ego", ego_x, 0.0, 0.0)]
    for i, (x, y, yaw, vx, vy) in enumerate(agent_specs, start=1):
        agents.append(AgentState(i, "vehicle", x, y, yaw, vx, vy))
    world = WorldState(0.0, agents, {}, 0, 0, graph, {}, {})
    return world, graph


def leaky(v, slope=0.2):
    return np.where(v > 0, v, slope * v)


def gat_oracle(h, layer):
    """Per-edge evaluation of one attention layer, loops only."""
    n = h.shape[0]
    head_outs, head_alphas = [], []
    for w, a_l, a_r in layer.heads:
        hw = h @ w.data
        alpha = np.zeros((n, n))
        for k in range(n):
            logits = np.array([
                leaky(float(a_l.data[:, 0] @ hw[k] + a_r.data[:, 0] @ hw[j]))
                for j in range(n)])
            e = np.exp(logits - logits.max())
            alpha[k] = e / e.sum()
        out = np.zeros((n, hw.shape[1]))
        for k in range(n):
            for j in range(n):
                out[k] += alpha[k, j] * hw[j]
        head_outs.append(np.maximum(out, 0.0))
        head_alphas.append(alpha)
    if layer.combine == "concat":
        return np.concatenate(head_outs, axis=1), head_alphas
    return np.mean(head_outs, axis=0), head_alphas


class TestGatLayer:
    def _layer(self, in_dim=6, out_dim=5, heads=3, combine="concat", seed=0):
        params = ParamSet()
        rng = np.random.default_rng(seed)
        return GatLayer(params, "g", in_dim, out_dim, heads, combine, rng)

    def test_matches_per_edge_oracle(self):
        rng = np.random.default_rng(3)
        for case in range(30):
            n = int(rng.integers(1, 9))
            layer = self._layer(combine="concat" if case % 2 else "average",
                                seed=case)
            h = rng.standard_normal((n, 6))
            out, alphas = layer(Tensor(h))
            ref_out, ref_alphas = gat_oracle(h, layer)
            assert np.abs(out.data - ref_out).max() < 1e-12
            for got, ref in zip(alphas, ref_alphas):
                assert np.abs(got - ref).max() < 1e-12

    def test_rows_stochastic(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(1, 33))
            layer = self._layer()
            _, alphas = layer(Tensor(rng.standard_normal((n, 6))))
            assert alphas.shape == (3, n, n)
            assert np.all(alphas >= 0.0)
            assert np.abs(alphas.sum(axis=-1) - 1.0).max() < 1e-6

    def test_single_node(self):
        layer = self._layer()
        h = np.random.default_rng(1).standard_normal((1, 6))
        out, alphas = layer(Tensor(h))
        assert np.allclose(alphas, 1.0)
        per_head = [np.maximum(h @ w.data, 0.0) for w, _, _ in layer.heads]
        assert np.abs(out.data - np.concatenate(per_head, axis=1)).max() < 1e-12

    def test_identical_embeddings_split_evenly(self):
        layer = self._layer()
        h = np.tile(np.random.default_rng(2).standard_normal((1, 6)), (2, 1))
        _, alphas = layer(Tensor(h))
        assert np.abs(alphas - 0.5).max() < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        layer = self._layer()
        h = rng.standard_normal((6, 6))
        perm = rng.permutation(6)
        out, _ = layer(Tensor(h))
        out_p, _ = layer(Tensor(h[perm]))
        assert np.abs(out_p.data - out.data[perm]).max() < 1e-9

    def test_dim_mismatch_rejected(self):
        layer = self._layer(in_dim=6)
        with pytest.raises(ValueError, match="expected 6 input features"):
            layer(Tensor(np.zeros((3, 5))))


class TestGcnLayer:
    def test_uniform_adjacency(self):
        params = ParamSet()
        layer = GcnLayer(params, "g", 4, 4, "uniform",
                         np.random.default_rng(0))
        a = layer.adjacency(4, None)
        assert np.allclose(a, 0.25)

    def test_distance_adjacency(self):
        params = ParamSet()
        layer = GcnLayer(params, "g", 4, 4, "distance",
                         np.random.default_rng(0))
        a = layer.adjacency(3, np.array([0.0, 1.0, 3.0]))
        expect = np.array([4.0, 2.0, 1.0]) / 7.0
        assert np.abs(a - expect).max() < 1e-12
        assert np.abs(a.sum(axis=1) - 1.0).max() < 1e-12

    def test_rows_stochastic_random(self):
        rng = np.random.default_rng(11)
        params = ParamSet()
        layer = GcnLayer(params, "g", 5, 5, "distance", rng)
        for _ in range(50):
            n = int(rng.integers(1, 33))
            d = rng.uniform(0.0, 30.0, size=n)
            d[0] = 0.0
            _, alpha = layer(Tensor(rng.standard_normal((n, 5))), d)
            assert np.all(alpha >= 0.0)
            assert np.abs(alpha.sum(axis=-1) - 1.0).max() < 1e-6

    def test_forward_matches_direct(self):
        rng = np.random.default_rng(13)
        params = ParamSet()
        layer = GcnLayer(params, "g", 4, 3, "uniform", rng)
        h = rng.standard_normal((5, 4))
        out, _ = layer(Tensor(h))
        ref = np.maximum(np.full((5, 5), 0.2) @ h @ layer.w.data
                         + layer.b.data, 0.0)
        assert np.abs(out.data - ref).max() < 1e-12


class TestNodeMlpLayer:
    def test_no_interaction(self):
        rng = np.random.default_rng(17)
        params = ParamSet()
        layer = NodeMlpLayer(params, "g", 4, 6, rng)
        h = rng.standard_normal((5, 4))
        full, _ = layer(Tensor(h))
        solo, _ = layer(Tensor(h[:1]))
        assert np.abs(full.data[0] - solo.data[0]).max() < 1e-15


class TestNodeFeatures:
    def test_lone_ego(self):
        world, _ = straight_world()
        c = build_node_features(world)
        assert c.shape == (1, 10)
        assert np.all(c[0, :4] == 0.0)
        assert c[0, 8] == world.ego.w and c[0, 9] == world.ego.l

    def test_agent_straight_ahead(self):
        world, _ = straight_world([(55.0, 0.0, 0.0, 0.0, 0.0)])
        c = build_node_features(world)
        assert c.shape == (2, 10)
        np.testing.assert_allclose(c[1, :3], [5.0, 0.0, 5.0], atol=1e-12)
        np.testing.assert_allclose(c[1, 4:8], 0.0, atol=1e-12)

    def test_ego_frame_rotation(self):
        # ego facing north; agent 5 m north of it puts it dead ahead
        graph = MapGraph("t", "t",
                         {"a": make_lane("a", [(0, -50), (0, 50)])},
                         [], [], [], [])
        agents = [AgentState(0, "ego", 0.0, 0.0, np.pi / 2),
                  AgentState(1, "vehicle", 0.0, 5.0, np.pi / 2, -3.0, 0.0)]
        world = WorldState(0.0, agents, {}, 0, 0, graph, {}, {})
        c = build_node_features(world)
        np.testing.assert_allclose(c[1, :3], [5.0, 0.0, 5.0], atol=1e-12)
        # world -x velocity seen from a north-facing ego is lateral +y
        np.testing.assert_allclose(c[1, 4:6], [0.0, 3.0], atol=1e-12)

    def test_roi_filtering(self):
        world, _ = straight_world([
            (80.0, 0.0, 0.0, 0.0, 0.0),    # 30 m ahead: out (front 25)
            (35.0, 0.0, 0.0, 0.0, 0.0),    # 15 m behind: out (back 10)
            (60.0, 11.0, 0.0, 0.0, 0.0),   # 11 m left: out (half width 10)
            (60.0, 5.0, 0.0, 0.0, 0.0),    # inside
        ])
        c = build_node_features(world)
        assert c.shape == (2, 10)
        np.testing.assert_allclose(c[1, :2], [10.0, 5.0], atol=1e-12)

    def test_nearest_first_truncation(self):
        rng = np.random.default_rng(23)
        specs = []
        for _ in range(40):
            specs.append((float(rng.uniform(45, 70)),
                          float(rng.uniform(-8, 8)), 0.0, 0.0, 0.0))
        world, _ = straight_world(specs)
        c = build_node_features(world, n_max=32)
        assert c.shape == (32, 10)
        dists = np.hypot(*(np.array([(s[0] - 50.0, s[1]) for s in specs]).T))
        kept = np.sort(dists)[:31]
        np.testing.assert_allclose(np.sort(c[1:, 2]), kept, atol=1e-9)
        assert np.all(np.diff(c[1:, 2]) >= -1e-12)


class TestTaskVectors:
    def _route_world(self):
        world, graph = straight_world(lane_len=300.0)
        route = plan_route(graph, (20.0, 0.0), (280.0, 0.0))
        return world, route

    def test_ego_vector_units(self):
        world, route = self._route_world()
        ego = world.ego
        ego.vx, ego.vy = 5.0, 0.0
        m = build_ego_vector(world, route)
        assert m.shape == (13,)
        assert m[3] == 50.0                       # lane speed limit, km/h
        np.testing.assert_allclose(m[8], 50.0 - 5.0 * 3.6)
        np.testing.assert_allclose(m[4:6], [5.0, 0.0], atol=1e-12)
        assert (m[11], m[12]) == (1.0, 0.0)       # broken left, solid right

    def test_ego_vector_errors_on_offset(self):
        world, route = self._route_world()
        world.ego.y = 1.0
        m = build_ego_vector(world, route)
        np.testing.assert_allclose(m[9], 1.0, atol=1e-9)      # e_cte left+
        assert abs(m[10] - 0.46365) < 1e-4                    # heading error

    def test_route_vector_spacing(self):
        world, route = self._route_world()
        g = build_route_vector(route, (50.0, 0.0, 0.0)).reshape(-1, 2)
        assert g.shape == (75, 2)
        gaps = np.hypot(*np.diff(g, axis=0).T)
        np.testing.assert_allclose(gaps, 0.4, atol=0.05)
        np.testing.assert_allclose(g[0], [0.0, 0.0], atol=0.21)
        assert np.all(np.diff(g[:, 0]) > 0)       # ahead of a forward ego

    def test_route_vector_snaps_to_grid(self):
        world, route = self._route_world()
        a = build_route_vector(route, (50.05, 0.0, 0.0))
        b = build_route_vector(route, (50.1, 0.0, 0.0))
        # both poses share the nearest 0.4 m grid point at s0=30.0+0.2k
        span = np.hypot(a[0] - b[0], a[1] - b[1])
        assert span < 0.4

    def test_route_vector_pads_at_end(self):
        world, route = self._route_world()
        g = build_route_vector(route, (275.0, 0.0, 0.0)).reshape(-1, 2)
        np.testing.assert_allclose(g[-1], g[-2], atol=1e-12)


class TestPolicyForward:
    def _scene(self, rng, n_agents=None):
        if n_agents is None:
            n_agents = int(rng.integers(0, 6))
        specs = [(float(rng.uniform(45, 70)), float(rng.uniform(-6, 6)),
                  float(rng.uniform(-np.pi, np.pi)),
                  float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)))
                 for _ in range(n_agents)]
        world, graph = straight_world(specs)
        route = plan_route(graph, (20.0, 0.0), (280.0, 0.0))
        c = build_node_features(world)
        m = build_ego_vector(world, route)
        g = build_route_vector(route, (50.0, 0.0, 0.0))
        return c, m, g

    def test_output_bounds(self):
        rng = np.random.default_rng(31)
        pp = PolicyParams(TINY, seed=1)
        for _ in range(25):
            c, m, g = self._scene(rng)
            z = rng.standard_normal(4) * 3.0
            out = policy_forward(pp, c, z, m, g)
            assert 0.0 <= out.kappa_v <= 1.0
            assert -1.0 <= out.kappa_theta <= 1.0

    @pytest.mark.parametrize("variant", ["gat_ctx", "gat", "gcn_u",
                                         "gcn_d", "mlp"])
    def test_permutation_invariance(self, variant):
        rng = np.random.default_rng(37)
        cfg = PolicyConfig(variant=variant, latent_dim=4, node_embed_dim=8,
                           graph_dim=8, heads=2, fusion_dim=16,
                           head_hidden=(8, 8))
        pp = PolicyParams(cfg, seed=2)
        z = rng.standard_normal(4) if cfg.uses_context else None
        for _ in range(20):
            c, m, g = self._scene(rng, n_agents=5)
            out = policy_forward(pp, c, z, m, g)
            perm = 1 + rng.permutation(c.shape[0] - 1)
            c_p = np.vstack([c[:1], c[perm]])
            out_p = policy_forward(pp, c_p, z, m, g)
            assert abs(out.kappa_v - out_p.kappa_v) < 1e-9
            assert abs(out.kappa_theta - out_p.kappa_theta) < 1e-9

    def test_duplicated_node_shifts_output(self):
        rng = np.random.default_rng(41)
        pp = PolicyParams(TINY, seed=3)
        c, m, g = self._scene(rng, n_agents=3)
        z = np.zeros(4)
        out = policy_forward(pp, c, z, m, g)
        c_dup = np.vstack([c, c[1:2]])
        out_dup = policy_forward(pp, c_dup, z, m, g)
        assert (abs(out.kappa_v - out_dup.kappa_v)
                + abs(out.kappa_theta - out_dup.kappa_theta)) > 1e-9

    def test_context_is_live(self):
        rng = np.random.default_rng(43)
        pp = PolicyParams(TINY, seed=4)
        c, m, g = self._scene(rng, n_agents=2)
        out_zero = policy_forward(pp, c, np.zeros(4), m, g)
        out_rand = policy_forward(pp, c, rng.standard_normal(4), m, g)
        assert (abs(out_zero.kappa_v - out_rand.kappa_v)
                + abs(out_zero.kappa_theta - out_rand.kappa_theta)) > 1e-9

    def test_missing_latent_rejected(self):
        rng = np.random.default_rng(47)
        pp = PolicyParams(TINY, seed=5)
        c, m, g = self._scene(rng, n_agents=1)
        with pytest.raises(ValueError, match="needs a latent"):
            policy_forward(pp, c, None, m, g)

    def test_direct_control_bounds(self):
        rng = np.random.default_rng(53)
        cfg = PolicyConfig(variant="gat_ctx_ctl", latent_dim=4,
                           node_embed_dim=8, graph_dim=8, heads=2,
                           fusion_dim=16, head_hidden=(8, 8))
        pp = PolicyParams(cfg, seed=6)
        c, m, g = self._scene(rng, n_agents=2)
        out = policy_forward(pp, c, np.zeros(4), m, g)
        steer, throttle, brake = out.controls
        assert -1.0 <= steer <= 1.0
        assert 0.0 <= throttle <= 1.0 and 0.0 <= brake <= 1.0

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(59)
        pp = PolicyParams(TINY, seed=7)
        c, m, g = self._scene(rng, n_agents=3)
        z = rng.standard_normal(4)
        out = policy_forward(pp, c, z, m, g)
        path = tmp_path / "policy.npz"
        save_policy(path, pp)
        pp2 = load_policy(path)
        out2 = policy_forward(pp2, c, z, m, g)
        assert out.kappa_v == out2.kappa_v
        assert out.kappa_theta == out2.kappa_theta

    def test_config_validation(self):
        with pytest.raises(ValueError, match="unknown variant"):
            PolicyConfig(variant="transformer")
        with pytest.raises(ValueError, match="must be >= 1"):
            PolicyConfig(heads=0)


class TestPolicyLoss:
    def test_zero_at_label(self):
        assert policy_loss(0.5, 0.25, 40.0, 20.0, 22.5) == 0.0

    def test_unit_arithmetic(self):
        # 2 km/h speed error plus 3 deg course error
        assert abs(policy_loss(0.5, 1.0 / 30.0, 40.0, 22.0, 0.0) - 5.0) < 1e-9

    def test_graph_matches_numpy(self):
        rng = np.random.default_rng(61)
        for _ in range(20):
            raw = Tensor(rng.standard_normal((1, 2)))
            v_lim = float(rng.uniform(20, 60))
            v_lab = float(rng.uniform(0, v_lim))
            t_lab = float(rng.uniform(-90, 90))
            got = policy_loss_graph(raw, v_lim, v_lab, t_lab).item()
            kv = 1.0 / (1.0 + np.exp(-raw.data[0, 0]))
            kt = np.tanh(raw.data[0, 1])
            assert abs(got - policy_loss(kv, kt, v_lim, v_lab, t_lab)) < 1e-12

    def test_gradient_wrt_head_matches_fd(self):
        rng = np.random.default_rng(67)
        raw_data = rng.standard_normal((1, 2))
        v_lim, v_lab, t_lab = 40.0, 10.0, -20.0
        raw = Tensor(raw_data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = policy_loss_graph(raw, v_lim, v_lab, t_lab)
        an = tape.backward(loss)[raw]
        h = 1e-7
        for idx in np.ndindex(1, 2):
            save = raw.data[idx]
            raw.data[idx] = save + h
            up = policy_loss_graph(raw, v_lim, v_lab, t_lab).item()
            raw.data[idx] = save - h
            dn = policy_loss_graph(raw, v_lim, v_lab, t_lab).item()
            raw.data[idx] = save
            fd = (up - dn) / (2 * h)
            assert abs(fd - an[idx]) / max(abs(fd), abs(an[idx]), 1e-9) < 1e-6

    def test_control_loss_zero_at_label(self):
        raw = Tensor(np.array([[0.3, -0.2, 1.4]]))
        steer = np.tanh(0.3)
        throttle = 1.0 / (1.0 + np.exp(0.2))
        brake = 1.0 / (1.0 + np.exp(-1.4))
        loss = control_loss_graph(raw, (steer, throttle, brake)).item()
        assert abs(loss) < 1e-12


class TestEndToEndGradients:
    def test_policy_loss_gradients_match_fd(self):
        rng = np.random.default_rng(71)
        pp = PolicyParams(TINY, seed=8)
        nudge = np.random.default_rng(72)
        for t in pp.params.tensors():
            t.data = t.data + nudge.uniform(-0.05, 0.05, size=t.data.shape)
        c = np.array([[0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.2, 0.0, 2.0, 4.5],
                      [6.0, 1.0, np.hypot(6, 1), 0.3, 1.0, 0.5, 0.0, 0.1,
                       2.0, 4.5]])
        z = rng.standard_normal(4)
        m = rng.standard_normal(13)
        g = rng.standard_normal(150)

        def loss_value():
            raw, _ = policy_forward_graph(pp, c, z, m, g)
            return policy_loss_graph(raw, 40.0, 15.0, 10.0)

        with Tape() as tape:
            loss = loss_value()
        grads = tape.backward(loss)
        h = 1e-6
        checked = 0
        for name, tensor in pp.params.items():
            flat = tensor.data.reshape(-1)
            gflat = grads[tensor].reshape(-1)
            for idx in rng.choice(flat.size, size=min(2, flat.size),
                                  replace=False):
                old = flat[idx]
                flat[idx] = old + h
                up = loss_value().item()
                flat[idx] = old - h
                dn = loss_value().item()
                flat[idx] = old
                fd = (up - dn) / (2 * h)
                # floor the denominator: near-zero gradients compare in
                # absolute terms, where central differences carry ~1e-9
                # cancellation noise of their own
                denom = max(abs(fd), abs(gflat[idx]), 1e-5)
                assert abs(fd - gflat[idx]) / denom < 1e-3, \
                    f"{name}[{idx}]: fd={fd} analytic={gflat[idx]}"
                checked += 1
        assert checked >= 50
