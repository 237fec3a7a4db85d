import math

import numpy as np
import pytest

from nhnn import neural as nn
from nhnn.dcnn import Architecture, init_params, loss_and_grads
from oracles import conv1d_loops


def _check(f, x, analytic, tol=1e-4):
    num = nn.numerical_gradient(f, x, h=1e-4)
    assert nn.relative_error(analytic, num) < tol


class TestConvolution:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(3, 9))
        layer = nn.DilatedConv1d(np.eye(3)[:, :, None], np.zeros(3), 1)
        np.testing.assert_array_equal(nn.conv1d_dilated_forward(layer, x), x)

    def test_zero_input_gives_bias(self, rng):
        layer = nn.DilatedConv1d.init(2, 4, 5, 3, rng)
        layer.bias[:] = rng.normal(size=4)
        y = nn.conv1d_dilated_forward(layer, np.zeros((2, 11)))
        np.testing.assert_array_equal(y, np.repeat(layer.bias[:, None], 11, axis=1))

    def test_matches_loop_oracle(self, rng):
        w, b = rng.normal(size=(3, 2, 3)), rng.normal(size=3)
        x = rng.normal(size=(2, 7))
        y = nn.conv1d_dilated_forward(nn.DilatedConv1d(w, b, 2), x)
        np.testing.assert_allclose(y, conv1d_loops(x, w, b, 2), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("K, dil, T", [(1, 1, 4), (2, 3, 5), (4, 2, 3), (8, 4, 20), (5, 1, 2)])
    def test_matches_loop_oracle_shapes(self, rng, K, dil, T):
        w, b = rng.normal(size=(2, 3, K)), rng.normal(size=2)
        x = rng.normal(size=(3, T))
        y, _ = nn.conv1d_forward(x, w, b, dil)
        np.testing.assert_allclose(y, conv1d_loops(x, w, b, dil), atol=1e-12)

    def test_length_masks_output(self, rng):
        layer = nn.DilatedConv1d.init(2, 2, 3, 1, rng)
        y = nn.conv1d_dilated_forward(layer, rng.normal(size=(2, 6)), length=4)
        assert np.all(y[:, 4:] == 0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            nn.conv1d_forward(rng.normal(size=(1, 3, 5)), rng.normal(size=(2, 2, 3)),
                              np.zeros(2), 1)

    def test_invalid_layer(self):
        with pytest.raises(ValueError):
            nn.DilatedConv1d(np.zeros((2, 2, 3)), np.zeros(2), 0)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 3, 6))
        w, b = rng.normal(size=(4, 3, 3)), rng.normal(size=4)
        g = rng.normal(size=(2, 4, 6))
        f = lambda: float(np.sum(nn.conv1d_forward(x, w, b, 2)[0] * g))  # noqa: E731
        _, cols = nn.conv1d_forward(x, w, b, 2)
        dx, dw, db = nn.conv1d_backward(g, cols, w, 2)
        _check(f, x, dx)
        _check(f, w, dw)
        _check(f, b, db)


class TestPooling:
    def test_single_frame(self, rng):
        x = rng.normal(size=(4, 1))
        np.testing.assert_array_equal(nn.global_max_pool(x, 1)[0], x[:, 0])

    def test_padding_never_wins(self):
        x = np.array([[[-3.0, -1.0, 0.0, 0.0]]])
        pooled, _ = nn.global_max_pool(x, [2])
        assert pooled[0, 0] == -1.0

    def test_invariant_to_padding_amount(self, rng):
        x = rng.normal(size=(3, 5))
        ref = nn.global_max_pool(x, 5)[0]
        for extra in (1, 4, 10):
            xp = np.concatenate([x, np.zeros((3, extra))], axis=1)
            np.testing.assert_array_equal(nn.global_max_pool(xp, 5)[0], ref)

    def test_zero_length(self, rng):
        with pytest.raises(ValueError):
            nn.global_max_pool(rng.normal(size=(1, 2, 3)), [0])

    def test_gradient(self, rng):
        x = rng.normal(size=(2, 3, 5))
        lengths = np.array([5, 3])
        g = rng.normal(size=(2, 3))
        f = lambda: float(np.sum(nn.global_max_pool(x, lengths)[0] * g))  # noqa: E731
        _, idx = nn.global_max_pool(x, lengths)
        _check(f, x, nn.global_max_pool_backward(g, idx, 5))


class TestDenseAndLoss:
    def test_softmax_zeros(self):
        p = nn.softmax(np.zeros((1, 3)))
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)
        assert math.isclose(nn.cross_entropy(p, [1]), math.log(3), rel_tol=1e-12)

    def test_softmax_large_logit(self):
        p = nn.softmax(np.array([[10.0, 0.0, 0.0]]))
        brute = math.exp(10) / (math.exp(10) + 2)
        assert abs(p[0, 0] - brute) < 1e-15 and round(p[0, 0], 5) == 0.99991

    def test_softmax_sum_and_shift(self, rng):
        z = rng.normal(size=(20, 3)) * 5
        p = nn.softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(nn.softmax(z + 123.4), p, atol=1e-12)

    def test_relu(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
        np.testing.assert_array_equal(nn.relu(x), [0, 0, 0, 0.5, 3.0])

    def test_label_range(self):
        with pytest.raises(ValueError):
            nn.cross_entropy(np.full((1, 3), 1 / 3), [3])
        with pytest.raises(ValueError):
            nn.softmax_cross_entropy(np.zeros((1, 3)), [-1])

    def test_dense_gradient(self, rng):
        x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
        g = rng.normal(size=(4, 2))
        f = lambda: float(np.sum(nn.dense_forward(x, W, b) * g))  # noqa: E731
        dx, dW, db = nn.dense_backward(g, x, W)
        _check(f, x, dx)
        _check(f, W, dW)
        _check(f, b, db)

    def test_relu_gradient(self, rng):
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
        g = rng.normal(size=(3, 4))
        f = lambda: float(np.sum(nn.relu(x) * g))  # noqa: E731
        _check(f, x, nn.relu_backward(g, x))

    def test_softmax_ce_gradient(self, rng):
        z = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, size=5)
        _, grad = nn.softmax_cross_entropy(z, y)
        _check(lambda: nn.softmax_cross_entropy(z, y)[0], z, grad)

    def test_symmetric_signal_zero_bias_gradient(self):
        z = np.zeros((3, 3))
        _, grad = nn.softmax_cross_entropy(z, [0, 1, 2])
        np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-15)


class TestModelGradients:
    def test_full_network(self, rng):
        arch = Architecture(n_mel=3, channels=3, kernel_size=3, dilations=(1, 2), hidden=4)
        # nonzero biases keep pre-activations off the ReLU kink at exactly 0
        params = {k: v + 0.3 * rng.standard_normal(v.shape)
                  for k, v in init_params(arch, rng).items()}
        x = rng.normal(size=(3, 3, 7))
        lengths = np.array([7, 4, 2])
        x[1, :, 4:] = 0
        x[2, :, 2:] = 0
        y = np.array([0, 2, 1])
        names = set(params)
        _, grads = loss_and_grads(params, arch.dilations, x, lengths, y, names)
        for name in names:
            f = lambda: loss_and_grads(params, arch.dilations, x, lengths, y, ())[0]  # noqa
            num = nn.numerical_gradient(f, params[name])
            assert nn.relative_error(grads[name], num) < 1e-4, name

    def test_frozen_layers_get_no_gradient(self, rng):
        arch = Architecture(n_mel=3, channels=3, kernel_size=3, dilations=(1, 2), hidden=4)
        params = init_params(arch, rng)
        x = rng.normal(size=(2, 3, 5))
        _, grads = loss_and_grads(params, arch.dilations, x, np.array([5, 5]), [0, 1],
                                  {"fc2.weight"})
        assert set(grads) == {"fc2.weight"}


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        nn.Adam(learning_rate=0.1).step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = {"w": np.array([0.0])}
        nn.Adam(learning_rate=1e-4).step(p, {"w": np.array([1.0])})
        assert math.isclose(p["w"][0], -1e-4 / (1 + 1e-8), rel_tol=1e-12)

    def test_descends_against_gradient(self):
        p = {"w": np.array([0.0, 0.0])}
        opt = nn.Adam(learning_rate=1e-3)
        for _ in range(100):
            opt.step(p, {"w": np.array([2.0, -0.5])})
        assert p["w"][0] < 0 < p["w"][1]
        assert opt.step_count == 100

    def test_frozen_untouched(self, rng):
        p = {"a": rng.normal(size=3), "b": rng.normal(size=3)}
        before = p["a"].copy()
        opt = nn.Adam(learning_rate=0.1)
        for _ in range(10):
            opt.step(p, {"a": rng.normal(size=3), "b": rng.normal(size=3)}, frozen={"a"})
        np.testing.assert_array_equal(p["a"], before)


class TestParamsAndCheckpoints:
    def test_counts(self, rng):
        assert nn.Dense.init(2, 3, rng).param_count() == 9
        assert nn.DilatedConv1d.init(40, 128, 8, 2, rng).param_count() == 41088
        assert nn.param_count(init_params(Architecture(), rng)) == 189187

    def test_init_bounds(self, rng):
        layer = nn.DilatedConv1d.init(4, 6, 3, 1, rng)
        assert np.all(np.abs(layer.weight) <= math.sqrt(6 / 12))
        assert np.all(layer.bias == 0)

    def test_roundtrip(self, rng, tmp_path):
        params = init_params(Architecture(n_mel=4, channels=3, hidden=2), rng)
        nn.save_params(params, tmp_path / "p.npz", {"note": "x"})
        back, meta = nn.load_params(tmp_path / "p.npz", {k: v.shape for k, v in params.items()})
        assert meta == {"note": "x"}
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])

    def test_shape_mismatch_rejected(self, rng, tmp_path):
        params = {"w": rng.normal(size=(2, 3))}
        nn.save_params(params, tmp_path / "p.npz")
        with pytest.raises(ValueError):
            nn.load_params(tmp_path / "p.npz", {"w": (3, 2)})
        with pytest.raises(ValueError):
            nn.load_params(tmp_path / "p.npz", {"w": (2, 3), "b": (2,)})
