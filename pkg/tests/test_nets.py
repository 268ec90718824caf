import math

import numpy as np
import pytest

from formation_marl.nets import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    AdamState,
    BadArchitecture,
    GradientBundle,
    Layer,
    MlpParams,
    ShapeMismatch,
    adam_step,
    backward,
    forward,
    init_mlp,
    input_gradient,
    params_from_doc,
    params_to_doc,
    polyak_update,
)

from gradcheck import (
    fd_input_grad,
    max_param_grad_error,
    random_test_net,
    relative_error,
)


def random_net(rng, max_width=6, n_layers=None):
    n_layers = n_layers or int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(n_layers + 1)]
    acts = [str(rng.choice(["tanh", "relu", "linear"])) for _ in range(n_layers)]
    return init_mlp(sizes, acts, rng)


def identity_net(dim):
    return MlpParams((Layer(np.eye(dim), np.zeros(dim), "linear"),))


class TestInitMlp:
    def test_shapes(self):
        net = init_mlp([4, 8, 2], ["tanh", "linear"], np.random.default_rng(0))
        assert net.layers[0].weight.shape == (8, 4)
        assert net.layers[1].weight.shape == (2, 8)
        assert net.sizes == (4, 8, 2)
        assert net.activations == ("tanh", "linear")

    def test_same_seed_identical(self):
        a = init_mlp([3, 5, 1], ["relu", "linear"], np.random.default_rng(4))
        b = init_mlp([3, 5, 1], ["relu", "linear"], np.random.default_rng(4))
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_weight_bound_and_zero_bias(self):
        net = init_mlp([9, 7, 3], ["tanh", "tanh"], np.random.default_rng(1))
        for layer in net.layers:
            bound = 1.0 / math.sqrt(layer.in_dim)
            assert np.abs(layer.weight).max() <= bound
            assert np.all(layer.bias == 0.0)

    def test_bad_architectures(self):
        rng = np.random.default_rng(0)
        with pytest.raises(BadArchitecture):
            init_mlp([4], ["tanh"], rng)
        with pytest.raises(BadArchitecture):
            init_mlp([4, 8, 2], ["tanh"], rng)
        with pytest.raises(BadArchitecture):
            init_mlp([4, 0, 2], ["tanh", "linear"], rng)
        with pytest.raises(BadArchitecture):
            init_mlp([4, 8], ["sigmoid"], rng)

    def test_layer_chain_validation(self):
        good = Layer(np.zeros((3, 4)), np.zeros(3), "tanh")
        bad = Layer(np.zeros((2, 5)), np.zeros(2), "linear")
        with pytest.raises(BadArchitecture):
            MlpParams((good, bad))

    def test_nonfinite_rejected(self):
        w = np.zeros((2, 2))
        w[0, 0] = np.nan
        with pytest.raises(BadArchitecture):
            Layer(w, np.zeros(2), "tanh")


class TestForward:
    def test_zero_net_zero_output(self):
        net = MlpParams((Layer(np.zeros((3, 5)), np.zeros(3), "linear"),))
        out, _ = forward(net, np.ones(5))
        assert np.array_equal(out, np.zeros(3))

    def test_identity_layer(self):
        net = identity_net(4)
        x = np.array([0.3, -1.2, 5.0, 0.0])
        out, _ = forward(net, x)
        assert np.array_equal(out, x)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            net = random_net(rng)
            x = rng.uniform(-1, 1, size=net.in_dim)
            out, _ = forward(net, x)
            assert np.allclose(out, naive_forward(net, x), atol=1e-12)

    def test_batch_rows_match_vectors(self):
        rng = np.random.default_rng(8)
        net = random_net(rng, n_layers=2)
        batch = rng.uniform(-1, 1, size=(6, net.in_dim))
        out, _ = forward(net, batch)
        for row_in, row_out in zip(batch, out):
            single, _ = forward(net, row_in)
            assert np.allclose(row_out, single, atol=1e-12)

    def test_purity(self):
        rng = np.random.default_rng(9)
        net = random_net(rng)
        x = rng.uniform(-1, 1, size=net.in_dim)
        before = x.copy()
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert np.array_equal(a, b)
        assert np.array_equal(x, before)

    def test_shape_mismatch(self):
        net = identity_net(4)
        with pytest.raises(ShapeMismatch):
            forward(net, np.zeros(5))


class TestBackward:
    def test_single_linear_layer_outer_product(self):
        rng = np.random.default_rng(10)
        net = init_mlp([4, 3], ["linear"], rng)
        x = rng.uniform(-1, 1, size=4)
        upstream = rng.uniform(-1, 1, size=3)
        _, cache = forward(net, x)
        bundle = backward(net, cache, upstream)
        assert np.allclose(bundle.weight_grads[0], np.outer(upstream, x))
        assert np.allclose(bundle.bias_grads[0], upstream)
        assert np.allclose(bundle.input_grad, net.layers[0].weight.T @ upstream)

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(11)
        net = random_net(rng)
        x = rng.uniform(-1, 1, size=net.in_dim)
        _, cache = forward(net, x)
        bundle = backward(net, cache, np.zeros(net.out_dim))
        for g in bundle.weight_grads + bundle.bias_grads:
            assert np.all(g == 0.0)
        assert np.all(bundle.input_grad == 0.0)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(25):
            net = random_test_net(rng)
            x = rng.uniform(-1, 1, size=net.in_dim)
            upstream = rng.uniform(-1, 1, size=net.out_dim)
            _, cache = forward(net, x)
            bundle = backward(net, cache, upstream)
            worst = max(worst, max_param_grad_error(net, x, upstream, bundle))
            worst = max(worst, relative_error(
                bundle.input_grad, fd_input_grad(net, x, upstream)))
        assert worst < 1e-4

    def test_batched_grads_sum_rows(self):
        rng = np.random.default_rng(13)
        net = random_net(rng, n_layers=2)
        batch = rng.uniform(-1, 1, size=(5, net.in_dim))
        upstream = rng.uniform(-1, 1, size=(5, net.out_dim))
        _, cache = forward(net, batch)
        bundle = backward(net, cache, upstream)
        for k in range(len(net.layers)):
            acc_w = np.zeros_like(net.layers[k].weight)
            acc_b = np.zeros_like(net.layers[k].bias)
            for row_x, row_u in zip(batch, upstream):
                _, c = forward(net, row_x)
                b = backward(net, c, row_u)
                acc_w += b.weight_grads[k]
                acc_b += b.bias_grads[k]
            assert np.allclose(bundle.weight_grads[k], acc_w, atol=1e-12)
            assert np.allclose(bundle.bias_grads[k], acc_b, atol=1e-12)
        for row_x, row_u, row_g in zip(batch, upstream, bundle.input_grad):
            _, c = forward(net, row_x)
            assert np.allclose(row_g, backward(net, c, row_u).input_grad)

    def test_upstream_shape_mismatch(self):
        net = identity_net(3)
        _, cache = forward(net, np.zeros(3))
        with pytest.raises(ShapeMismatch):
            backward(net, cache, np.zeros(4))


class TestAdam:
    def test_zero_grads_leave_params(self):
        rng = np.random.default_rng(14)
        net = random_net(rng)
        zero = GradientBundle(
            tuple(np.zeros_like(l.weight) for l in net.layers),
            tuple(np.zeros_like(l.bias) for l in net.layers),
            np.zeros(net.in_dim),
        )
        new, state = adam_step(net, zero, AdamState.zeros(net), lr=1e-2)
        assert state.step == 1
        for la, lb in zip(net.layers, new.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_first_step_magnitude_near_lr(self):
        net = MlpParams((Layer(np.array([[0.0]]), np.zeros(1), "linear"),))
        grads = GradientBundle((np.array([[0.7]]),), (np.zeros(1),), np.zeros(1))
        new, _ = adam_step(net, grads, AdamState.zeros(net), lr=1e-3)
        delta = float(net.layers[0].weight[0, 0] - new.layers[0].weight[0, 0])
        assert delta == pytest.approx(1e-3, rel=1e-6)

    def test_matches_hand_recurrence(self):
        # scalar parameter, five steps, recurrence written out longhand
        lr = 1e-2
        g_seq = [0.5, -0.2, 0.9, 0.1, -0.7]
        p, m, v = 0.3, 0.0, 0.0
        net = MlpParams((Layer(np.array([[0.3]]), np.zeros(1), "linear"),))
        state = AdamState.zeros(net)
        for t, g in enumerate(g_seq, start=1):
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1 ** t)
            vhat = v / (1 - ADAM_BETA2 ** t)
            p = p - lr * mhat / (math.sqrt(vhat) + ADAM_EPS)
            grads = GradientBundle((np.array([[g]]),), (np.zeros(1),), np.zeros(1))
            net, state = adam_step(net, grads, state, lr)
            assert float(net.layers[0].weight[0, 0]) == pytest.approx(p, abs=1e-15)

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(15)
            net = init_mlp([3, 4, 2], ["tanh", "linear"], rng)
            state = AdamState.zeros(net)
            for _ in range(20):
                x = rng.uniform(-1, 1, size=3)
                upstream = rng.uniform(-1, 1, size=2)
                _, cache = forward(net, x)
                net, state = adam_step(net, backward(net, cache, upstream),
                                       state, 1e-3)
            return net

        a, b = run(), run()
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)

    def test_originals_untouched(self):
        rng = np.random.default_rng(16)
        net = random_net(rng)
        snapshot = net.copy()
        x = rng.uniform(-1, 1, size=net.in_dim)
        _, cache = forward(net, x)
        grads = backward(net, cache, np.ones(net.out_dim))
        adam_step(net, grads, AdamState.zeros(net), 1e-2)
        for la, lb in zip(net.layers, snapshot.layers):
            assert np.array_equal(la.weight, lb.weight)

    def test_shape_mismatch(self):
        net = identity_net(3)
        grads = GradientBundle((np.zeros((2, 2)),), (np.zeros(2),), np.zeros(3))
        with pytest.raises(ShapeMismatch):
            adam_step(net, grads, AdamState.zeros(net), 1e-3)


class TestPolyak:
    def one_weight_pair(self, t_val, o_val):
        target = MlpParams((Layer(np.array([[t_val]]), np.zeros(1), "linear"),))
        online = MlpParams((Layer(np.array([[o_val]]), np.zeros(1), "linear"),))
        return target, online

    def test_tau_table_value(self):
        target, online = self.one_weight_pair(0.0, 1.0)
        new = polyak_update(target, online, 5e-3)
        assert float(new.layers[0].weight[0, 0]) == pytest.approx(0.005)

    def test_tau_one_copies(self):
        rng = np.random.default_rng(17)
        target, online = random_net(rng, n_layers=2), None
        online = init_mlp(target.sizes, target.activations, rng)
        new = polyak_update(target, online, 1.0)
        for ln, lo in zip(new.layers, online.layers):
            assert np.array_equal(ln.weight, lo.weight)

    def test_tau_zero_no_op(self):
        rng = np.random.default_rng(18)
        target = random_net(rng, n_layers=2)
        online = init_mlp(target.sizes, target.activations, rng)
        new = polyak_update(target, online, 0.0)
        for ln, lt in zip(new.layers, target.layers):
            assert np.array_equal(ln.weight, lt.weight)

    def test_contraction(self):
        rng = np.random.default_rng(19)
        online = random_net(rng, n_layers=2)
        target = init_mlp(online.sizes, online.activations, rng)
        tau = 0.25

        def gap(t):
            return max(np.abs(lt.weight - lo.weight).max()
                       for lt, lo in zip(t.layers, online.layers))

        g = gap(target)
        for _ in range(10):
            target = polyak_update(target, online, tau)
            new_gap = gap(target)
            assert new_gap == pytest.approx((1 - tau) * g, rel=1e-9, abs=1e-15)
            g = new_gap

    def test_architecture_mismatch(self):
        rng = np.random.default_rng(20)
        a = init_mlp([3, 4, 2], ["tanh", "linear"], rng)
        b = init_mlp([3, 5, 2], ["tanh", "linear"], rng)
        with pytest.raises(ShapeMismatch):
            polyak_update(a, b, 0.5)

    def test_bad_tau(self):
        rng = np.random.default_rng(21)
        net = random_net(rng)
        with pytest.raises(ValueError):
            polyak_update(net, net, 1.5)


class TestNumericalHygiene:
    def test_long_random_training_stays_finite(self):
        rng = np.random.default_rng(22)
        net = init_mlp([4, 16, 2], ["tanh", "linear"], rng)
        state = AdamState.zeros(net)
        for _ in range(10_000):
            x = rng.uniform(-1, 1, size=(8, 4))
            target = rng.uniform(-1, 1, size=(8, 2))
            out, cache = forward(net, x)
            bundle = backward(net, cache, out - target)
            net, state = adam_step(net, bundle, state, 1e-3)
        for layer in net.layers:
            assert np.isfinite(layer.weight).all()
            assert np.isfinite(layer.bias).all()


class TestSerialization:
    def test_round_trip_bit_identical(self):
        rng = np.random.default_rng(23)
        net = random_net(rng, n_layers=3)
        again = params_from_doc(params_to_doc(net))
        assert again.sizes == net.sizes
        assert again.activations == net.activations
        for la, lb in zip(net.layers, again.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_format_tag_checked(self):
        doc = params_to_doc(identity_net(2))
        doc["format"] = "something-else"
        with pytest.raises(ValueError):
            params_from_doc(doc)

    def test_corrupt_payload_rejected(self):
        doc = params_to_doc(identity_net(2))
        doc["weights"][0] = doc["weights"][0][:8]
        with pytest.raises(ValueError):
            params_from_doc(doc)


def naive_forward(params, x):
    """Index-by-index reference evaluation with math-module scalars."""
    h = [float(v) for v in x]
    for layer in params.layers:
        z = []
        for r in range(layer.out_dim):
            acc = float(layer.bias[r])
            for c in range(layer.in_dim):
                acc += float(layer.weight[r, c]) * h[c]
            z.append(acc)
        if layer.activation == "tanh":
            h = [math.tanh(v) for v in z]
        elif layer.activation == "relu":
            h = [v if v > 0 else 0.0 for v in z]
        else:
            h = z
    return np.array(h)


class TestInputGradient:
    """input_gradient is backward() without the parameter sweep; the
    input gradients must match bitwise since both run the same chain."""

    def test_matches_backward_bitwise(self):
        rng = np.random.default_rng(88)
        for _ in range(25):
            params = random_test_net(rng)
            x = rng.normal(size=(4, params.layers[0].in_dim))
            y, cache = forward(params, x)
            upstream = rng.normal(size=y.shape)
            bundle = backward(params, cache, upstream)
            only_input = input_gradient(params, cache, upstream)
            assert np.array_equal(only_input, bundle.input_grad)

    def test_single_row(self):
        rng = np.random.default_rng(89)
        params = random_test_net(rng)
        x = rng.normal(size=params.layers[0].in_dim)
        y, cache = forward(params, x)
        upstream = rng.normal(size=y.shape)
        assert np.array_equal(
            input_gradient(params, cache, upstream),
            backward(params, cache, upstream).input_grad)

    def test_upstream_shape_mismatch(self):
        rng = np.random.default_rng(90)
        params = random_test_net(rng)
        _, cache = forward(params, rng.normal(size=(3,
                                                    params.layers[0].in_dim)))
        with pytest.raises(ShapeMismatch):
            input_gradient(params, cache, np.zeros((5, 1)))
