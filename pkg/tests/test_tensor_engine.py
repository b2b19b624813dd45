import numpy as np
import numpy.testing as npt
import pytest

from discnn_detector.errors import DisCNNError, NumericError, ShapeError
from discnn_detector.tensor_engine import (MODE, BN_EPS, RunningStats,
                                           conv3x3_forward, conv3x3_backward,
                                           batchnorm_forward, batchnorm_backward,
                                           relu_forward, relu_backward,
                                           maxpool2_forward, maxpool2_backward,
                                           linear_forward, linear_backward,
                                           sgd_step, clip_by_global_norm, grad_check)


def direct_conv(x, w, b):
    """ Straight sliding-sum loops, zero padding
    """
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for _o in range(w.shape[0]):
        for _y in range(h):
            for _x in range(wd):
                acc = b[_o]
                for _c in range(c):
                    for _dy in range(3):
                        for _dx in range(3):
                            yy, xx = _y + _dy - 1, _x + _dx - 1
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += x[_c, yy, xx] * w[_o, _c, _dy, _dx]
                out[_o, _y, _x] = acc
    return out


# -----   conv3x3   -------
def test_conv_zero_weights(rng):
    x = rng.standard_normal((3, 5, 7))
    out = conv3x3_forward(x, np.zeros((4, 3, 3, 3)), np.zeros(4))
    assert out.shape == (4, 5, 7)
    npt.assert_array_equal(out, 0.0)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    npt.assert_allclose(conv3x3_forward(x, w, np.zeros(1)), x, rtol=0, atol=1e-12)


def test_conv_ramp_against_direct_loops():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    w = np.ones((1, 1, 3, 3))
    out = conv3x3_forward(x, w, np.zeros(1))
    npt.assert_allclose(out, direct_conv(x, w, np.zeros(1)))
    # corner sees 0, 1, 4, 5
    assert out[0, 0, 0] == 10.0


def test_conv_random_against_direct_loops(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    npt.assert_allclose(conv3x3_forward(x, w, b), direct_conv(x, w, b), rtol=1e-10, atol=1e-10)


def test_conv_is_linear_in_input(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    zero_b = np.zeros(4)
    x, y = rng.standard_normal((2, 3, 8, 8))
    a, b = 1.7, -0.6
    lhs = conv3x3_forward(a * x + b * y, w, zero_b)
    rhs = a * conv3x3_forward(x, w, zero_b) + b * conv3x3_forward(y, w, zero_b)
    npt.assert_allclose(lhs, rhs, atol=1e-6)


def test_conv_batched_matches_single(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((5, 2, 3, 3))
    b = rng.standard_normal(5)
    batched = conv3x3_forward(x, w, b)
    for _n in range(3):
        npt.assert_allclose(batched[_n], conv3x3_forward(x[_n], w, b), atol=1e-12)


@pytest.mark.parametrize('w_shape, b_shape, dimension', [
    ((4, 2, 3, 3), (4,), 'input channels'),
    ((4, 3, 5, 5), (4,), 'kernel'),
    ((4, 3, 3, 3), (3,), 'bias'),
])
def test_conv_shape_errors(w_shape, b_shape, dimension):
    with pytest.raises(ShapeError) as err:
        conv3x3_forward(np.zeros((3, 4, 4)), np.zeros(w_shape), np.zeros(b_shape))
    assert err.value.dimension == dimension


# -----   batchnorm   -------
def test_batchnorm_constant_channels_normalize_to_zero():
    x = np.empty((4, 2, 3, 3))
    x[:, 0] = 5.0
    x[:, 1] = -2.0
    out, _, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), BN_EPS, MODE.TRAIN)
    npt.assert_allclose(out, 0.0, atol=1e-6)


def test_batchnorm_gamma_zero_gives_beta(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    out, _, _ = batchnorm_forward(x, np.zeros(2), np.array([0.5, -1.5]), BN_EPS, MODE.TRAIN)
    npt.assert_allclose(out[:, 0], 0.5)
    npt.assert_allclose(out[:, 1], -1.5)


def test_batchnorm_two_point_statistics():
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    out, _, running = batchnorm_forward(x, np.ones(1), np.zeros(1), BN_EPS, MODE.TRAIN)
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + BN_EPS)
    npt.assert_allclose(out.ravel(), expected, rtol=1e-12)
    # EMA from mean 0 / var 1 with momentum 0.1; unbiased variance of {0, 2} is 2
    npt.assert_allclose(running.mean, [0.1])
    npt.assert_allclose(running.var, [0.9 + 0.1 * 2.0])


def test_batchnorm_train_output_statistics(rng):
    x = rng.standard_normal((8, 3, 5, 5)) * 4.0 + 3.0
    out, _, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), BN_EPS, MODE.TRAIN)
    axes = (0, 2, 3)
    assert np.all(np.abs(out.mean(axis=axes)) <= 1e-6)
    var = x.var(axis=axes)
    npt.assert_allclose(out.var(axis=axes), var / (var + BN_EPS), atol=1e-4)


def test_batchnorm_infer_uses_running_stats():
    x = np.full((2, 1, 2, 2), 3.0)
    running = RunningStats(np.array([1.0]), np.array([4.0]))
    out, _, after = batchnorm_forward(x, np.ones(1), np.zeros(1), 0.0, MODE.INFER, running)
    npt.assert_allclose(out, 1.0)
    assert after is running


def test_batchnorm_infer_without_running_stats_is_an_error():
    with pytest.raises(DisCNNError):
        batchnorm_forward(np.zeros((1, 2, 2, 2)), np.ones(2), np.zeros(2), BN_EPS, MODE.INFER, None)


# -----   relu / maxpool / linear   -------
def test_relu_cases(rng):
    npt.assert_array_equal(relu_forward(-np.abs(rng.standard_normal(10)) - 0.1), 0.0)
    npt.assert_array_equal(relu_forward(np.zeros(5)), 0.0)
    x = rng.standard_normal(50)
    npt.assert_array_equal(relu_forward(x), np.where(x > 0, x, 0.0))
    npt.assert_array_equal(relu_forward(relu_forward(x)), relu_forward(x))


def test_maxpool_constant_and_size():
    out, _ = maxpool2_forward(np.full((2, 96, 96), 0.25))
    assert out.shape == (2, 48, 48)
    npt.assert_array_equal(out, 0.25)


def test_maxpool_block_argmax():
    out, argmax = maxpool2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out[0, 0, 0] == 4.0
    assert divmod(int(argmax[0, 0, 0]), 2) == (1, 1)


def test_maxpool_odd_size_is_an_error():
    with pytest.raises(ShapeError):
        maxpool2_forward(np.zeros((1, 5, 4)))
    with pytest.raises(ShapeError):
        maxpool2_forward(np.zeros((1, 4, 7)))


def test_maxpool_backward_routes_each_gradient_once(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    out, argmax = maxpool2_forward(x)
    dout = rng.standard_normal(out.shape)
    dx = maxpool2_backward(dout, argmax).dx
    assert dx.shape == x.shape
    assert np.count_nonzero(dx) == dout.size
    npt.assert_allclose(dx.sum(), dout.sum())
    # gradient sits on the max of each block
    assert np.all(x[dx != 0] == np.repeat(np.repeat(out, 2, axis=2), 2, axis=3)[dx != 0])


def test_linear_cases(rng):
    b = rng.standard_normal(3)
    out = linear_forward(rng.standard_normal((4, 5)), np.zeros((3, 5)), b)
    npt.assert_array_equal(out, np.tile(b, (4, 1)))

    x = rng.standard_normal((2, 4))
    npt.assert_allclose(linear_forward(x, np.eye(4), np.zeros(4)), x)

    out = linear_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([0.0, 1.0]))
    npt.assert_array_equal(out, [[1.0, 4.0]])


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        linear_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))
    with pytest.raises(ShapeError):
        linear_forward(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros(5))


# -----   optimizer   -------
def test_sgd_step_cases():
    params = {'p': np.array([1.0])}
    new, _ = sgd_step(params, {'p': np.array([2.0])}, lr=0.0, momentum=0.9)
    npt.assert_array_equal(new['p'], [1.0])

    new, _ = sgd_step(params, {'p': np.array([0.0])}, lr=0.5, momentum=0.9)
    npt.assert_array_equal(new['p'], [1.0])

    new, velocity = sgd_step(params, {'p': np.array([2.0])}, lr=0.1, momentum=0.0)
    npt.assert_allclose(new['p'], [0.8])
    npt.assert_allclose(velocity['p'], [2.0])
    assert params['p'][0] == 1.0


def test_sgd_step_momentum_accumulates():
    params = {'p': np.array([0.0])}
    grads = {'p': np.array([1.0])}
    params, velocity = sgd_step(params, grads, lr=1.0, momentum=0.5)
    params, velocity = sgd_step(params, grads, lr=1.0, momentum=0.5, velocity=velocity)
    npt.assert_allclose(velocity['p'], [1.5])
    npt.assert_allclose(params['p'], [-2.5])


def test_sgd_step_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({'p': np.zeros(3)}, {'p': np.zeros(4)}, lr=0.1)


def test_clip_by_global_norm():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    npt.assert_allclose([clipped['a'][0], clipped['b'][0]], [0.6, 0.8])

    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads
    same, _ = clip_by_global_norm(grads, 0.0)
    assert same is grads

    with pytest.raises(NumericError):
        clip_by_global_norm({'a': np.array([np.nan])}, 1.0)


# -----   gradient checks   -------
def test_grad_check_linear_is_exact(rng):
    x = rng.standard_normal((3, 5))
    params = {'w': rng.standard_normal((4, 5)), 'b': rng.standard_normal(4)}
    weights = rng.standard_normal((3, 4))

    fn = lambda: float(np.sum(weights * linear_forward(x, params['w'], params['b'])))
    grads = linear_backward(weights, x, params['w']).params
    assert grad_check(fn, params, grads, probes=50) <= 1e-9


def test_grad_check_conv(rng):
    params = {'x': rng.standard_normal((2, 3, 5, 5)),
              'w': rng.standard_normal((4, 3, 3, 3)),
              'b': rng.standard_normal(4)}
    weights = rng.standard_normal((2, 4, 5, 5))

    fn = lambda: float(np.sum(weights * conv3x3_forward(params['x'], params['w'], params['b'])))
    lg = conv3x3_backward(weights, params['x'], params['w'])
    grads = {'x': lg.dx, **lg.params}
    assert grad_check(fn, params, grads, probes=60) <= 1e-4


def test_grad_check_batchnorm_train(rng):
    params = {'x': rng.standard_normal((4, 3, 2, 2)) * 2.0 + 1.0,
              'gamma': rng.standard_normal(3),
              'beta': rng.standard_normal(3)}
    weights = rng.standard_normal((4, 3, 2, 2))

    def fn():
        out, _, _ = batchnorm_forward(params['x'], params['gamma'], params['beta'], BN_EPS, MODE.TRAIN)
        return float(np.sum(weights * out))

    _, cache, _ = batchnorm_forward(params['x'], params['gamma'], params['beta'], BN_EPS, MODE.TRAIN)
    lg = batchnorm_backward(weights, cache)
    grads = {'x': lg.dx, **lg.params}
    assert grad_check(fn, params, grads, probes=60) <= 1e-4


def test_grad_check_maxpool_and_relu(rng):
    # distinct values keep every block maximum away from ties under the h perturbation
    params = {'x': rng.permutation(96).reshape(1, 2, 6, 8) / 10.0 - 3.95}
    weights = rng.standard_normal((1, 2, 3, 4))

    def fn():
        out, _ = maxpool2_forward(relu_forward(params['x']))
        return float(np.sum(weights * out))

    out, argmax = maxpool2_forward(relu_forward(params['x']))
    dpool = maxpool2_backward(weights, argmax).dx
    grads = {'x': relu_backward(dpool, params['x']).dx}
    assert grad_check(fn, params, grads, probes=60) <= 1e-4


def test_grad_check_non_finite_is_an_error():
    params = {'x': np.array([1.0])}
    with pytest.raises(NumericError):
        grad_check(lambda: float('nan'), params, {'x': np.array([1.0])}, probes=1)
