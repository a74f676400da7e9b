"""Gradient checks for every primitive against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphdrive import autodiff as ad
from graphdrive.autodiff import Tape, Tensor
from graphdrive.nn import Adam, ParamSet


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grads(build, arrays, rtol=1e-4):
    """build(tensors) -> scalar Tensor; checks d(loss)/d(arr) for each input."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    grads = tape.backward(loss)
    for k, (t, a) in enumerate(zip(tensors, arrays)):
        def f(x, k=k):
            probes = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
            return build(*probes).item()
        num = fd_grad(f, a.copy())
        ana = grads[t]
        assert ana.shape == a.shape
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        assert np.abs(ana - num).max() / denom < rtol, f"input {k}: max rel err too large"


RNG = np.random.default_rng(7)


class TestElementwise:
    def test_add_broadcast(self):
        check_grads(lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))),
                    [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])

    def test_sub_mul_div(self):
        a = RNG.normal(size=(2, 3))
        b = RNG.normal(size=(2, 3)) + 3.0
        check_grads(lambda x, y: ad.sum_(ad.div(ad.mul(x, y), ad.sub(y, ad.scale(x, 0.1)))),
                    [a, b])

    def test_unary_chain(self):
        x = RNG.normal(size=(5,)) * 0.5
        check_grads(lambda t: ad.sum_(ad.tanh(ad.exp(ad.scale(t, 0.3)))), [x])

    def test_sigmoid_extreme_inputs_finite(self):
        x = Tensor(np.array([-500.0, 0.0, 500.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.sigmoid(x))
        g = tape.backward(loss)[x]
        assert np.all(np.isfinite(loss.data)) and np.all(np.isfinite(g))

    def test_log_power_abs(self):
        x = np.abs(RNG.normal(size=(4,))) + 0.5
        check_grads(lambda t: ad.sum_(ad.log(ad.power(t, 3.0))), [x])
        y = RNG.normal(size=(6,)) + 0.01
        check_grads(lambda t: ad.sum_(ad.absolute(t)), [y])

    def test_relu_leaky(self):
        x = RNG.normal(size=(8,)) + 0.05
        check_grads(lambda t: ad.sum_(ad.mul(ad.relu(t), t)), [x])
        check_grads(lambda t: ad.sum_(ad.mul(ad.leaky_relu(t, 0.2), t)), [x])

    def test_square_gradient_value(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.mul(x, x)
        assert tape.backward(loss)[x] == pytest.approx(6.0)


class TestShapes:
    def test_reshape_transpose_concat_narrow(self):
        a = RNG.normal(size=(2, 6))
        b = RNG.normal(size=(3, 4))

        def build(ta, tb):
            ra = ad.reshape(ta, (3, 4))
            cat = ad.concat([ra, ad.transpose(tb, (0, 1))], axis=1)
            return ad.sum_(ad.mul(ad.narrow(cat, 1, 2, 5), ad.narrow(cat, 1, 1, 5)))

        check_grads(build, [a, b])

    def test_narrow_bounds(self):
        x = Tensor(np.zeros((3, 4)))
        with pytest.raises(ValueError, match="out of range"):
            ad.narrow(x, 1, 2, 3)

    def test_broadcast_mismatch_reports_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_mean_axis(self):
        x = RNG.normal(size=(3, 5))
        check_grads(lambda t: ad.sum_(ad.power(ad.mean(t, axis=1), 2.0)), [x])
        check_grads(lambda t: ad.mean(ad.mul(t, t)), [x])


class TestSoftmax:
    def test_values_symmetry(self):
        y = ad.softmax(Tensor(np.array([1.0, 1.0, 1.0])), axis=0)
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3))

    def test_shift_invariance(self):
        x = RNG.normal(size=(4,))
        a = ad.softmax(Tensor(x), axis=0).data
        b = ad.softmax(Tensor(x + 100.0), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_grad_of_sum_is_zero(self):
        x = Tensor(RNG.normal(size=(5,)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.softmax(x, axis=0))
        g = tape.backward(loss)[x]
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_grad_fd(self):
        x = RNG.normal(size=(3, 4))
        w = RNG.normal(size=(3, 4))
        check_grads(lambda t: ad.sum_(ad.mul(ad.softmax(t, axis=1), Tensor(w))), [x])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_stochastic(self, seed):
        x = np.random.default_rng(seed).normal(size=(3, 6)) * 5
        y = ad.softmax(Tensor(x), axis=1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


class TestMatmul:
    def test_2d(self):
        check_grads(lambda a, b: ad.sum_(ad.power(ad.matmul(a, b), 2.0)),
                    [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))])

    def test_batched(self):
        check_grads(lambda a, b: ad.sum_(ad.power(ad.matmul(a, b), 2.0)),
                    [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 2))])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError, match=r"\(3, 4\) @ \(5, 2\)"):
            ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


class TestConv:
    def test_ones_box(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, 9.0)

    def test_stride_padding_shape(self):
        x = Tensor(np.zeros((2, 3, 9, 5)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.zeros(4))
        assert ad.conv2d(x, w, b, stride=2, padding=1).shape == (2, 4, 5, 3)

    def test_grad_fd(self):
        x = RNG.normal(size=(2, 2, 5, 4))
        w = RNG.normal(size=(3, 2, 3, 3))
        b = RNG.normal(size=(3,))
        check_grads(
            lambda tx, tw, tb: ad.sum_(
                ad.power(ad.conv2d(tx, tw, tb, stride=2, padding=1), 2.0)),
            [x, w, b])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            ad.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


class TestUpsample:
    def test_integer_factor_values(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        y = ad.upsample_nn(x, 4, 4)
        np.testing.assert_allclose(y.data[0, 0, :2, :2], 0.0)
        np.testing.assert_allclose(y.data[0, 0, 2:, 2:], 3.0)

    def test_arbitrary_target_grad(self):
        x = RNG.normal(size=(1, 2, 3, 4))
        w = RNG.normal(size=(1, 2, 7, 9))
        check_grads(lambda t: ad.sum_(ad.mul(ad.upsample_nn(t, 7, 9), Tensor(w))), [x])

    def test_downscale_rejected(self):
        with pytest.raises(ValueError, match="smaller than input"):
            ad.upsample_nn(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)


class TestTape:
    def test_zero_grad_for_unreached_leaf(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            _ = ad.sum_(b)  # keeps b on the tape
            loss = ad.sum_(ad.mul(a, a))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[b], 0.0)
        np.testing.assert_allclose(grads[a], 2.0)

    def test_reused_input_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
        assert tape.backward(loss)[x] == pytest.approx(7.0)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.mul(x, x)
        assert y.requires_grad is False

    def test_scalar_loss_required(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_replay_bit_identical(self):
        x = Tensor(RNG.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(RNG.normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.tanh(ad.matmul(x, w)))
        g1 = tape.backward(loss)
        g2 = tape.backward(loss)
        assert np.array_equal(g1[x], g2[x]) and np.array_equal(g1[w], g2[w])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_backward_linearity(self, seed):
        """grad of (f + g) equals grad f + grad g for independent branches."""
        rng = np.random.default_rng(seed)
        xv = rng.normal(size=(3,))

        def run(mode):
            x = Tensor(xv, requires_grad=True)
            with Tape() as tape:
                f = ad.sum_(ad.mul(x, x))
                g = ad.sum_(ad.sigmoid(x))
                loss = {"f": f, "g": g, "fg": ad.add(f, g)}[mode]
            return tape.backward(loss)[x]

        np.testing.assert_allclose(run("fg"), run("f") + run("g"), rtol=1e-12)


class TestDispatch:
    def test_known_kind(self):
        y = ad.forward_op("relu", Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_allclose(y.data, [0.0, 2.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown op kind"):
            ad.forward_op("fused_gelu", Tensor(np.zeros(2)))

    def test_registry_covers_primitives(self):
        for kind in ("matmul", "conv2d", "softmax", "upsample_nn", "concat", "narrow"):
            assert kind in ad.op_kinds()


class TestAdam:
    def test_first_step_magnitude(self):
        ps = ParamSet()
        p = ps.add("w", np.full(4, 0.5))
        opt = Adam(ps, lr=1e-4)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(p, p))
        opt.step(tape.backward(loss))
        delta = p.data - 0.5
        np.testing.assert_allclose(delta, -1e-4, rtol=1e-6)

    def test_two_steps_match_scalar_reference(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        theta, m, v = 1.5, 0.0, 0.0
        ps = ParamSet()
        p = ps.add("w", np.array([theta]))
        opt = Adam(ps, lr=lr, beta1=b1, beta2=b2, eps=eps)
        for t in range(1, 3):
            g = 2 * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            with Tape() as tape:
                loss = ad.sum_(ad.mul(p, p))
            opt.step(tape.backward(loss))
        assert p.data[0] == pytest.approx(theta, abs=1e-12)

    def test_unreached_param_unchanged(self):
        ps = ParamSet()
        a = ps.add("a", np.ones(2))
        b = ps.add("b", np.ones(2))
        opt = Adam(ps, lr=1e-3)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(a, a))
        opt.step(tape.backward(loss))
        np.testing.assert_allclose(b.data, 1.0)


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("w", np.zeros(2))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", np.zeros(2))

    def test_load_shape_mismatch(self):
        ps = ParamSet()
        ps.add("w", np.zeros((2, 3)))
        with pytest.raises(ValueError, match="shape mismatch"):
            ps.load_arrays({"w": np.zeros((3, 2))})

    def test_load_name_mismatch(self):
        ps = ParamSet()
        ps.add("w", np.zeros(2))
        with pytest.raises(ValueError, match="missing"):
            ps.load_arrays({"q": np.zeros(2)})

    def test_float32_mode(self):
        ps = ParamSet(dtype=np.float32)
        rng = np.random.default_rng(0)
        from graphdrive.nn import MLP
        net = MLP(ps, "net", [4, 8, 2], rng)
        y = net(Tensor(np.ones((1, 4), dtype=np.float32)))
        assert y.dtype == np.float32
