"""
Dense-tensor numeric core for the DisCNN.
  Tensors are numpy ndarrays (C-order).  Five layer types are supported, each with a
  hand-written forward and backward pass:

    conv3x3   : 3x3 receptive field, zero same-padding, stride 1
    batchnorm : per-channel, train (batch stats + running EMA) or infer (running stats)
    relu      : max(0, x)
    maxpool2  : 2x2 window, stride 2, argmax kept for gradient routing
    linear    : x @ W.T + b

  Batched layouts are N x C x H x W for image tensors and N x D for vectors.  Backward
  functions return LayerGrads(dx, params) where params is keyed by parameter name.
"""
import logging
import numpy as np

from enum import IntEnum
from typing import Callable, Dict, Iterable, Optional, Tuple
from collections import namedtuple

from .errors import DisCNNError, NumericError, ShapeError

logger = logging.getLogger(__name__)

MODE = IntEnum('MODE', ['TRAIN', 'INFER'])
LayerGrads = namedtuple('LayerGrads', ['dx', 'params'])
RunningStats = namedtuple('RunningStats', ['mean', 'var'])

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-8


def _as_batch(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    """ Accept an unbatched tensor by adding a leading axis, returns (batch, was_single)
    """
    if x.ndim == ndim - 1:
        return x[np.newaxis], True
    if x.ndim != ndim:
        raise ShapeError('rank', ndim, x.ndim)
    return x, False


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


# -----   CONV 3x3   -------
def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError('kernel', '(O, C, 3, 3)', w.shape)
    if w.shape[1] != x.shape[1]:
        raise ShapeError('input channels', w.shape[1], x.shape[1])
    if b.shape != (w.shape[0],):
        raise ShapeError('bias', (w.shape[0],), b.shape)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError('H x W', '>= 1 x 1', x.shape[2:])


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ out[n,o,y,x] = b[o] + sum_{c,dy,dx} xpad[n, c, y+dy, x+dx] * w[o,c,dy,dx]
        Computed as 9 shifted (O x C) @ (C x N*H*W) products, so no im2col buffer is built.
    """
    x, single = _as_batch(x, 4)
    _check_conv(x, w, b)
    n, _, h, wd = x.shape

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], n, h, wd), dtype=np.result_type(x, w))
    for _dy in range(3):
        for _dx in range(3):
            out += np.tensordot(w[:, :, _dy, _dx], xp[:, :, _dy:_dy + h, _dx:_dx + wd], axes=([1], [1]))

    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + _channel_view(b, 4)
    return out[0] if single else out


def conv3x3_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray) -> LayerGrads:
    dout, single = _as_batch(dout, 4)
    x, _ = _as_batch(x, 4)
    n, c, h, wd = x.shape

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp, dtype=np.result_type(dout, w))
    dw = np.zeros_like(w, dtype=np.result_type(dout, x))
    for _dy in range(3):
        for _dx in range(3):
            dw[:, :, _dy, _dx] = np.tensordot(dout, xp[:, :, _dy:_dy + h, _dx:_dx + wd],
                                              axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, _dy:_dy + h, _dx:_dx + wd] += np.tensordot(w[:, :, _dy, _dx], dout,
                                                                 axes=([0], [1])).transpose(1, 0, 2, 3)

    dx = dxp[:, :, 1:-1, 1:-1]
    return LayerGrads(dx=dx[0] if single else dx,
                      params={'w': dw, 'b': dout.sum(axis=(0, 2, 3))})


# -----   BATCH NORMALIZATION   -------
def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      eps: float = BN_EPS,
                      mode: MODE = MODE.TRAIN,
                      running: Optional[RunningStats] = None,
                      momentum: float = BN_MOMENTUM):
    """ Normalize per channel (axis 1) over every other axis.
        Returns (out, cache, running); in TRAIN mode running is the EMA-updated RunningStats
        (started from mean 0 / var 1 when None), in INFER mode it is returned unchanged.
    """
    if x.ndim < 2:
        raise ShapeError('rank', '>= 2', x.ndim)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError('channels', (x.shape[1],), (gamma.shape, beta.shape))

    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // x.shape[1]

    if mode == MODE.TRAIN:
        if x.shape[0] < 1:
            raise ShapeError('N', '>= 1', x.shape[0])
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)

        if running is None:
            running = RunningStats(mean=np.zeros_like(mean), var=np.ones_like(var))
        unbiased = var * count / (count - 1) if count > 1 else var
        running = RunningStats(mean=(1.0 - momentum) * running.mean + momentum * mean,
                               var=(1.0 - momentum) * running.var + momentum * unbiased)
    else:
        if running is None:
            raise DisCNNError('batch-norm running statistics are uninitialized')
        mean, var = running.mean, running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    out = _channel_view(gamma, x.ndim) * xhat + _channel_view(beta, x.ndim)

    cache = (xhat, inv_std, gamma, axes, count, mode)
    return out.astype(x.dtype, copy=False), cache, running


def batchnorm_backward(dout: np.ndarray, cache) -> LayerGrads:
    xhat, inv_std, gamma, axes, count, mode = cache
    ndim = dout.ndim

    dxhat = dout * _channel_view(gamma, ndim)
    if mode == MODE.TRAIN:
        sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = _channel_view(inv_std, ndim) / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    else:
        dx = dxhat * _channel_view(inv_std, ndim)

    return LayerGrads(dx=dx, params={'gamma': (dout * xhat).sum(axis=axes),
                                     'beta': dout.sum(axis=axes)})


# -----   RELU   -------
def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> LayerGrads:
    return LayerGrads(dx=dout * (x > 0), params={})


# -----   MAX POOL 2x2   -------
def maxpool2_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ Returns (out, argmax); argmax holds the flat 2x2 block index k = 2*dy + dx of each max.
    """
    x, single = _as_batch(x, 4)
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError('H', 'even', h)
    if w % 2:
        raise ShapeError('W', 'even', w)

    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., np.newaxis], axis=-1)[..., 0]

    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2_backward(dout: np.ndarray, argmax: np.ndarray) -> LayerGrads:
    dout, single = _as_batch(dout, 4)
    argmax, _ = _as_batch(argmax, 4)
    n, c, h2, w2 = dout.shape

    routed = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(routed, argmax[..., np.newaxis], dout[..., np.newaxis], axis=-1)
    dx = routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return LayerGrads(dx=dx[0] if single else dx, params={})


# -----   LINEAR   -------
def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError('rank', 2, x.ndim)
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError('D_in', x.shape[1], w.shape[1:] if w.ndim == 2 else w.shape)
    if b.shape != (w.shape[0],):
        raise ShapeError('D_out', (w.shape[0],), b.shape)
    return x @ w.T + b


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray) -> LayerGrads:
    return LayerGrads(dx=dout @ w, params={'w': dout.T @ x, 'b': dout.sum(axis=0)})


# -----   OPTIMIZER   -------
def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: float, momentum: float = 0.9,
             velocity: Optional[Dict[str, np.ndarray]] = None):
    """ v <- momentum * v + g ;  p <- p - lr * v
        Returns (new_params, new_velocity); inputs are left untouched.
    """
    if velocity is None:
        velocity = {_k: np.zeros_like(_p) for _k, _p in params.items()}

    new_params, new_velocity = {}, {}
    for _key, _param in params.items():
        grad = grads[_key]
        if grad.shape != _param.shape:
            raise ShapeError(_key, _param.shape, grad.shape)
        if velocity[_key].shape != _param.shape:
            raise ShapeError(f'{_key} velocity', _param.shape, velocity[_key].shape)

        _v = momentum * velocity[_key] + grad
        new_velocity[_key] = _v.astype(_param.dtype, copy=False)
        new_params[_key] = (_param - lr * _v).astype(_param.dtype, copy=False)
    return new_params, new_velocity


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float):
    """ Scale every gradient by max_norm / ||g|| when the global L2 norm exceeds max_norm.
        max_norm <= 0 disables clipping.  Returns (grads, norm_before_clipping).
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(_g, dtype=np.float64))) for _g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError('non-finite gradient norm')
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm

    scale = max_norm / norm
    return {_k: (_g * scale).astype(_g.dtype, copy=False) for _k, _g in grads.items()}, norm


# -----   GRADIENT CHECK   -------
def grad_check(fn: Callable[[], float],
               params: Dict[str, np.ndarray],
               grads: Dict[str, np.ndarray],
               probes: int = 50,
               seed: int = 0,
               h: float = GRAD_CHECK_STEP,
               floor: float = GRAD_CHECK_FLOOR,
               names: Optional[Iterable[str]] = None) -> float:
    """ Compare analytic gradients against central finite differences.

        fn() evaluates the scalar composite from the arrays held in params; each probed
        coordinate is perturbed in place by +/- h and restored.  Probed coordinates are drawn
        uniformly over all entries of the (optionally restricted) parameter set.

        Returns max |analytic - fd| / max(|analytic|, |fd|, floor).
    """
    wanted = None if names is None else set(names)
    keys = [_k for _k in params if wanted is None or _k in wanted]
    if not keys:
        raise DisCNNError('grad_check: no parameters to probe')
    for _k in keys:
        if params[_k].dtype != np.float64:
            logger.warning(f'grad_check on {_k} with dtype {params[_k].dtype}, expect loose agreement')

    rng = np.random.default_rng(seed)
    sizes = np.array([params[_k].size for _k in keys], dtype=np.float64)

    worst = 0.0
    for _ in range(probes):
        key = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        arr = params[key]
        idx = np.unravel_index(rng.integers(arr.size), arr.shape)

        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = float(fn())
        arr[idx] = orig - h
        f_minus = float(fn())
        arr[idx] = orig

        fd = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[key][idx])
        if not (np.isfinite(fd) and np.isfinite(analytic)):
            raise NumericError(f'grad_check: non-finite value at {key}{list(idx)}')

        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
        if rel > worst:
            logger.debug(f'grad_check {key}{list(idx)} analytic={analytic:.6e} fd={fd:.6e} rel={rel:.3e}')
            worst = rel
    return worst
