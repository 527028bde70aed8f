import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from signshield import tensor as T
from signshield.errors import InputShapeError, LabelError, ParameterError


def _net(layers, input_shape, params, dtype=np.float32):
    return T.Network(tuple(input_shape), tuple(layers), {k: np.asarray(v, dtype=dtype) for k, v in params.items()})


def small_net(seed, dtype=np.float32):
    """3-conv net with a skip connection on an 8x8x1 input, 3 classes."""
    rng = np.random.default_rng(seed)
    layers = [T.conv("c1", 4), T.relu(), T.conv("c2", 4), T.residual_add(1), T.relu(), T.maxpool(),
              T.conv("c3", 3, stride=2), T.relu(), T.flatten(), T.dense("d", 3)]
    params = T.glorot_init(layers, (8, 8, 1), rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(-0.1, 0.1, params[k].shape).astype(np.float32)
    net = T.Network((8, 8, 1), tuple(layers), params)
    x = rng.uniform(0, 1, (8, 8, 1)).astype(np.float32)
    return net.astype(dtype), x, int(rng.integers(3))


def relative_errors(analytic, numeric):
    big = np.abs(analytic) >= 1e-6
    rel = (np.abs(analytic - numeric)[big] / np.abs(numeric)[big]).max(initial=0.0)
    absolute = np.abs(analytic - numeric)[~big].max(initial=0.0)
    return rel, absolute


class TestForward:
    def test_identity_1x1_conv(self):
        x = np.random.default_rng(0).uniform(size=(5, 5, 3)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
        net = _net([T.conv("c", 3, kernel=1)], x.shape, {"c.w": w, "c.b": np.zeros(3)})
        acts, _ = T._forward_cached(net, x[None])
        np.testing.assert_array_equal(acts[-1][0], x)

    def test_dense_dot_product(self):
        net = _net([T.dense("d", 1)], (2,), {"d.w": [[1.0], [2.0]], "d.b": [0.0]})
        assert T.forward(net, np.array([3.0, 4.0], dtype=np.float32)).tolist() == [11.0]

    def test_maxpool_block(self):
        net = _net([T.maxpool(2)], (2, 2, 1), {})
        x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(2, 2, 1)
        acts, _ = T._forward_cached(net, x[None])
        assert acts[-1][0].reshape(-1).tolist() == [4.0]

    def test_shape_mismatch(self):
        net, _, _ = small_net(0)
        with pytest.raises(InputShapeError):
            T.forward(net, np.zeros((7, 8, 1), dtype=np.float32))

    def test_pure(self):
        net, x, _ = small_net(3)
        a, b = T.forward(net, x), T.forward(net, x)
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single(self):
        net, x, _ = small_net(4)
        xs = np.stack([x, 1 - x])
        batch = T.forward(net, xs)
        np.testing.assert_allclose(batch[1], T.forward(net, xs[1]), rtol=1e-6, atol=1e-7)

    def test_layer_chaining_is_checked(self):
        with pytest.raises(InputShapeError):
            T.infer_shapes([T.flatten(), T.conv("c", 2)], (4, 4, 1))
        with pytest.raises(InputShapeError):
            T.infer_shapes([T.conv("c", 2), T.residual_add(-1)], (4, 4, 1))

    @pytest.mark.parametrize("kwargs", [{"kernel": 0}, {"stride": 0}])
    def test_bad_layer_parameters(self, kwargs):
        with pytest.raises(ParameterError):
            T.conv("c", 2, **kwargs)


class TestLoss:
    def test_uniform_logits_give_ln2(self):
        net = _net([T.dense("d", 2)], (2,), {"d.w": np.eye(2), "d.b": [0.0, 0.0]})
        lg = T.loss_and_input_gradient(net, np.zeros(2, dtype=np.float32), 0)
        assert lg.loss == pytest.approx(np.log(2), abs=1e-7)

    def test_dense_closed_form_gradient(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        x = rng.normal(size=4)
        net = _net([T.dense("d", 3)], (4,), {"d.w": w, "d.b": b}, dtype=np.float64)
        lg = T.loss_and_input_gradient(net, x, 2)
        p = T.softmax(x @ w + b)
        onehot = np.eye(3)[2]
        np.testing.assert_allclose(lg.grad_input, w @ (p - onehot), rtol=1e-12, atol=1e-15)

    def test_label_out_of_range(self):
        net, x, _ = small_net(0)
        with pytest.raises(LabelError):
            T.loss_and_input_gradient(net, x, 3)

    def test_gradient_shape(self):
        net, x, y = small_net(2)
        assert T.loss_and_input_gradient(net, x, y).grad_input.shape == x.shape

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-50, 50)))
    def test_softmax_sums_to_one_and_loss_nonnegative(self, logits):
        assert T.softmax(logits).sum() == pytest.approx(1.0, abs=1e-6)
        assert T.cross_entropy(logits, 0)[0] >= 0


class TestFiniteDifferences:
    def test_linear_is_exact(self):
        for h in (1e-3, 0.1, 1.0):
            g = T.finite_difference_gradient(lambda v: 2.0 * v.sum(), np.array([0.3, -7.0]), h=h)
            np.testing.assert_allclose(g, [2.0, 2.0], rtol=1e-12)

    def test_square_at_three(self):
        g = T.finite_difference_gradient(lambda v: float((v ** 2).sum()), np.array([3.0]), h=0.01)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_step_must_be_positive(self):
        with pytest.raises(ParameterError):
            T.finite_difference_gradient(lambda v: 0.0, np.zeros(1), h=0.0)

    def test_random_conv_net_matches_spec_step(self):
        # one fixed net at the documented step h=1e-3, evaluated in float64
        net, x, y = small_net(11, np.float64)
        analytic = T.loss_and_input_gradient(net, x.astype(np.float64), y).grad_input
        numeric = T.finite_difference_gradient(net, x, y, h=1e-3)
        rel, absolute = relative_errors(analytic, numeric)
        assert rel <= 1e-3 and absolute <= 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_param_gradients(self, seed):
        net, x, y = small_net(seed, np.float64)
        xs = np.stack([x, np.roll(x, 1, axis=0)])
        ys = np.array([y, (y + 1) % 3])
        _, grads = T.loss_and_param_gradients(net, xs, ys)
        for key in ("c1.w", "d.b"):
            def loss(p, key=key):
                params = dict(net.params)
                params[key] = p
                n2 = T.Network(net.input_shape, net.layers, params)
                return float(T.cross_entropy(T.forward(n2, xs), ys).mean())
            numeric = T.finite_difference_gradient(loss, net.params[key], h=1e-6)
            np.testing.assert_allclose(grads[key], numeric, rtol=1e-4, atol=1e-7)

    def test_logits_vjp_matches_loss_gradient(self):
        net, x, y = small_net(6, np.float64)
        logits = T.forward(net, x)
        v = T.softmax(logits) - np.eye(3)[y]
        _, dx = T.logits_vjp(net, x, v)
        np.testing.assert_allclose(dx, T.loss_and_input_gradient(net, x, y).grad_input, rtol=1e-10, atol=1e-14)


class TestTieRules:
    def test_maxpool_routes_to_first_maximum(self):
        net = _net([T.maxpool(2), T.flatten(), T.dense("d", 1)], (2, 2, 1), {"d.w": [[1.0]], "d.b": [0.0]})
        x = np.full((2, 2, 1), 0.5, dtype=np.float32)
        _, dx = T.logits_vjp(net, x, np.array([1.0], dtype=np.float32))
        assert dx.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_relu_gradient_zero_at_zero(self):
        net = _net([T.relu(), T.dense("d", 1)], (3,), {"d.w": [[1.0], [1.0], [1.0]], "d.b": [0.0]})
        _, dx = T.logits_vjp(net, np.array([-1.0, 0.0, 1.0], dtype=np.float32), np.array([1.0], dtype=np.float32))
        assert dx.tolist() == [0.0, 0.0, 1.0]
