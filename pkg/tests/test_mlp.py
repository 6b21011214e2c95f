import numpy as np
import pytest

from anchorsplat.geometry import InvalidInputError
from anchorsplat.mlp import (
    AdamState,
    MlpLayer,
    MlpParams,
    adam_step,
    clip_global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    scaled_clone,
)


def random_net(rng, dims=(5, 7, 3), acts=("relu", "none")):
    return init_mlp(list(dims), list(acts), rng)


class TestForward:
    def test_bias_only(self):
        b = np.array([0.5, -1.0, 2.0])
        net = MlpParams([MlpLayer(np.zeros((3, 4)), b, "relu")])
        y, _ = mlp_forward(net, np.ones(4))
        np.testing.assert_allclose(y, np.maximum(b, 0.0))

    def test_identity_layer(self):
        net = MlpParams([MlpLayer(np.eye(4), np.zeros(4), "none")])
        x = np.array([1.0, -2.0, 3.0, 0.5])
        y, _ = mlp_forward(net, x)
        np.testing.assert_allclose(y, x)

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(42)
        net = random_net(rng)
        x = rng.standard_normal(5)
        y, _ = mlp_forward(net, x)
        # independent reimplementation
        h = np.maximum(net.layers[0].weight @ x + net.layers[0].bias, 0.0)
        expected = net.layers[1].weight @ h + net.layers[1].bias
        np.testing.assert_allclose(y, expected, atol=1e-14)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        net = random_net(rng)
        xs = rng.standard_normal((6, 5))
        ys, _ = mlp_forward(net, xs)
        for i in range(6):
            yi, _ = mlp_forward(net, xs[i])
            np.testing.assert_allclose(ys[i], yi)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        net = random_net(rng)
        x = rng.standard_normal(5)
        y1, _ = mlp_forward(net, x)
        y2, _ = mlp_forward(net, x)
        assert np.array_equal(y1, y2)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(3)
        net = random_net(rng)
        with pytest.raises(InvalidInputError):
            mlp_forward(net, np.ones(6))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(4)
        net = random_net(rng)
        _, tape = mlp_forward(net, rng.standard_normal(5))
        gp, gx = mlp_backward(net, tape, np.zeros(3))
        assert all(np.all(a == 0) for a in gp.arrays())
        assert np.all(gx == 0)

    def test_single_linear_layer_outer_product(self):
        rng = np.random.default_rng(5)
        net = MlpParams([MlpLayer(rng.standard_normal((3, 4)), np.zeros(3), "none")])
        x = rng.standard_normal(4)
        gy = rng.standard_normal(3)
        _, tape = mlp_forward(net, x)
        gp, gx = mlp_backward(net, tape, gy)
        np.testing.assert_allclose(gp.layers[0].weight, np.outer(gy, x))
        np.testing.assert_allclose(gp.layers[0].bias, gy)
        np.testing.assert_allclose(gx, net.layers[0].weight.T @ gy)

    @pytest.mark.parametrize("acts", [("relu", "none"), ("tanh", "sigmoid")])
    def test_matches_finite_differences(self, acts):
        rng = np.random.default_rng(6)
        net = random_net(rng, acts=acts)
        x = rng.standard_normal(5)
        gy = rng.standard_normal(3)
        _, tape = mlp_forward(net, x)
        gp, gx = mlp_backward(net, tape, gy)

        def scalar(net_, x_):
            y, _ = mlp_forward(net_, x_)
            return float(np.sum(y * gy))

        h = 1e-5
        for li, layer in enumerate(net.layers):
            for arr_name in ("weight", "bias"):
                arr = getattr(layer, arr_name)
                grad = getattr(gp.layers[li], arr_name)
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    net2 = net.copy()
                    getattr(net2.layers[li], arr_name)[idx] += h
                    net3 = net.copy()
                    getattr(net3.layers[li], arr_name)[idx] -= h
                    num = (scalar(net2, x) - scalar(net3, x)) / (2 * h)
                    assert abs(num - grad[idx]) < 1e-6 * max(1.0, abs(num))
        for k in range(5):
            e = np.zeros(5)
            e[k] = h
            num = (scalar(net, x + e) - scalar(net, x - e)) / (2 * h)
            assert abs(num - gx[k]) < 1e-6 * max(1.0, abs(num))

    def test_many_random_nets_against_fd(self):
        # invariant: backward matches central differences at rel err < 1e-6
        rng = np.random.default_rng(7)
        for trial in range(100):
            dims = [int(rng.integers(2, 6)) for _ in range(3)]
            net = init_mlp(dims, ["relu", "none"], rng)
            x = rng.standard_normal(dims[0])
            gy = rng.standard_normal(dims[-1])
            _, tape = mlp_forward(net, x)
            gp, _ = mlp_backward(net, tape, gy)
            # spot-check one random weight per net
            W = net.layers[0].weight
            i = int(rng.integers(W.shape[0]))
            j = int(rng.integers(W.shape[1]))
            h = 1e-5
            net2 = net.copy(); net2.layers[0].weight[i, j] += h
            net3 = net.copy(); net3.layers[0].weight[i, j] -= h
            y2, _ = mlp_forward(net2, x)
            y3, _ = mlp_forward(net3, x)
            num = float(np.sum((y2 - y3) * gy)) / (2 * h)
            assert abs(num - gp.layers[0].weight[i, j]) < 1e-6 * max(1.0, abs(num))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = [np.array([1.0, 2.0])]
        st = AdamState.for_params(p, lr=0.1)
        p2, st2, skipped = adam_step(p, [np.zeros(2)], st)
        assert not skipped
        np.testing.assert_allclose(p2[0], p[0])
        assert st2.t == 1

    def test_first_step_textbook_formula(self):
        g = 0.3
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = [np.array([1.0])]
        st = AdamState.for_params(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        p2, _, _ = adam_step(p, [np.array([g])], st)
        # hand-evaluated: m=(1-b1)g; v=(1-b2)g^2; mhat=g; vhat=g^2
        expected = 1.0 - lr * g / (np.sqrt(g * g) + eps)
        assert p2[0][0] == pytest.approx(expected, rel=1e-12)

    def test_two_step_hand_trace(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g1, g2 = 0.4, -0.2
        p = [np.array([0.5])]
        st = AdamState.for_params(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        p, st, _ = adam_step(p, [np.array([g1])], st)
        p, st, _ = adam_step(p, [np.array([g2])], st)
        # hand trace
        m1 = (1 - b1) * g1
        v1 = (1 - b2) * g1 ** 2
        x = 0.5 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        m2 = b1 * m1 + (1 - b1) * g2
        v2 = b2 * v1 + (1 - b2) * g2 ** 2
        x = x - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
        assert p[0][0] == pytest.approx(x, rel=1e-12)
        assert st.t == 2
        np.testing.assert_allclose(st.m[0], [m2])
        np.testing.assert_allclose(st.v[0], [v2])

    def test_nonfinite_gradient_skipped(self):
        p = [np.array([1.0])]
        st = AdamState.for_params(p, lr=0.1)
        p2, st2, skipped = adam_step(p, [np.array([np.nan])], st)
        assert skipped
        assert p2[0][0] == 1.0
        assert st2.t == 0


class TestScaledClone:
    def test_identity_scale_roundtrips_bit_exactly(self):
        rng = np.random.default_rng(8)
        net = random_net(rng)
        c = scaled_clone(net, 1.0)
        for a, b in zip(net.arrays(), c.arrays()):
            assert np.array_equal(a, b)

    def test_zero_scale(self):
        rng = np.random.default_rng(9)
        net = random_net(rng)
        c = scaled_clone(net, 0.0)
        assert all(np.all(a == 0) for a in c.arrays())
        y, _ = mlp_forward(c, rng.standard_normal(5))
        np.testing.assert_allclose(y, np.zeros(3))

    def test_small_scale_entrywise(self):
        rng = np.random.default_rng(10)
        net = random_net(rng)
        c = scaled_clone(net, 0.01)
        for a, b in zip(net.arrays(), c.arrays()):
            np.testing.assert_allclose(b, 0.01 * a, rtol=1e-15)


class TestClip:
    def test_below_threshold_untouched(self):
        g = [np.array([3.0, 4.0])]  # norm 5
        out = clip_global_norm(g, 10.0)
        assert out[0] is g[0]

    def test_above_threshold_scaled(self):
        g = [np.array([3.0, 4.0])]  # norm 5
        out = clip_global_norm(g, 1.0)
        assert np.linalg.norm(out[0]) == pytest.approx(1.0)
