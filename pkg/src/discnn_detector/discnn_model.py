"""
DisCNN: the lightweight one-positive-class network.

    input(96x96 RGB)
    4 x [Conv3-C, Batch Normalization, ReLU, Max pooling]   C = 64, 32, 16, 8
    FC-288, FC-128, FC-16                                    (linear, no softmax)

  Spatial trace 96 -> 48 -> 24 -> 12 -> 6, flatten width 8*6*6 = 288.
  The score of an image is the module (Euclidean norm) of its 16-d output vector.

  Checkpoint file layout, little-endian:
    b'DCNN1'
    uint16 input_size, uint8 in_channels,
    uint8 n_conv, n_conv x uint16 channels, uint8 n_fc, n_fc x uint16 widths
    uint32 n_tensors
    per tensor: uint8 name_len, name, uint8 ndim, ndim x uint32 dims, float32 data
  Tensor order: conv{i}.w conv{i}.b bn{i}.gamma bn{i}.beta bn{i}.mean bn{i}.var  (i = 1..4)
                fc{j}.w fc{j}.b                                                  (j = 1..3)
"""
import os
import struct
import logging
import numpy as np

from typing import Dict, List, Optional, Tuple

from .errors import CheckpointError, ShapeError
from .tensor_engine import (MODE, BN_EPS, RunningStats,
                            conv3x3_forward, conv3x3_backward,
                            batchnorm_forward, batchnorm_backward,
                            relu_forward, relu_backward,
                            maxpool2_forward, maxpool2_backward,
                            linear_forward, linear_backward)

logger = logging.getLogger(__name__)

INPUT_SIZE = 96
IN_CHANNELS = 3
CONV_CHANNELS = (64, 32, 16, 8)
FC_WIDTHS = (288, 128, 16)
FLATTEN_WIDTH = CONV_CHANNELS[-1] * (INPUT_SIZE // 2 ** len(CONV_CHANNELS)) ** 2
OUTPUT_WIDTH = FC_WIDTHS[-1]

CHECKPOINT_MAGIC = b'DCNN1'


def _expected_shapes() -> Dict[str, Tuple[int, ...]]:
    """ Parameter name -> shape, in checkpoint order (running stats excluded)
    """
    shapes = {}
    c_in = IN_CHANNELS
    for _i, _c in enumerate(CONV_CHANNELS, start=1):
        shapes[f'conv{_i}.w'] = (_c, c_in, 3, 3)
        shapes[f'conv{_i}.b'] = (_c,)
        shapes[f'bn{_i}.gamma'] = (_c,)
        shapes[f'bn{_i}.beta'] = (_c,)
        c_in = _c

    d_in = FLATTEN_WIDTH
    for _j, _d in enumerate(FC_WIDTHS, start=1):
        shapes[f'fc{_j}.w'] = (_d, d_in)
        shapes[f'fc{_j}.b'] = (_d,)
        d_in = _d
    return shapes


PARAM_SHAPES = _expected_shapes()
MODEL_PARAM_COUNT = sum(int(np.prod(_s)) for _s in PARAM_SHAPES.values())


class DisCNNModel:
    """ Parameters and batch-norm running statistics of one DisCNN.
          params  : ordered dict name -> ndarray (see PARAM_SHAPES)
          running : dict 'bn{i}' -> RunningStats

        In INFER mode a model is never mutated and may be shared by concurrent scorers.
        forward_train() updates the running statistics (single writer).
    """
    def __init__(self, params: Dict[str, np.ndarray], running: Dict[str, RunningStats]):
        for _name, _shape in PARAM_SHAPES.items():
            if _name not in params:
                raise ShapeError(_name, _shape, None)
            if params[_name].shape != _shape:
                raise ShapeError(_name, _shape, params[_name].shape)
        self.params = {_name: params[_name] for _name in PARAM_SHAPES}
        self.running = dict(running)

    @property
    def dtype(self):
        return self.params['conv1.w'].dtype

    @property
    def num_params(self) -> int:
        return sum(_p.size for _p in self.params.values())

    def copy(self) -> 'DisCNNModel':
        return self.astype(self.dtype)

    def astype(self, dtype) -> 'DisCNNModel':
        params = {_k: _p.astype(dtype, copy=True) for _k, _p in self.params.items()}
        running = {_k: RunningStats(_r.mean.astype(dtype, copy=True), _r.var.astype(dtype, copy=True))
                   for _k, _r in self.running.items()}
        return DisCNNModel(params, running)

    def _check_input(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1:] != (IN_CHANNELS, INPUT_SIZE, INPUT_SIZE):
            raise ShapeError('input', f'N x {IN_CHANNELS} x {INPUT_SIZE} x {INPUT_SIZE}', x.shape)

    def _run(self, x: np.ndarray, mode: MODE, keep_cache: bool, trace: Optional[List[int]] = None):
        p = self.params
        caches = []

        h = x
        for _i in range(1, len(CONV_CHANNELS) + 1):
            conv_in = h
            h = conv3x3_forward(h, p[f'conv{_i}.w'], p[f'conv{_i}.b'])
            h, bn_cache, running = batchnorm_forward(h, p[f'bn{_i}.gamma'], p[f'bn{_i}.beta'],
                                                     BN_EPS, mode, self.running.get(f'bn{_i}'))
            if mode == MODE.TRAIN:
                self.running[f'bn{_i}'] = RunningStats(running.mean.astype(self.dtype),
                                                       running.var.astype(self.dtype))
            pre_relu = h
            h, argmax = maxpool2_forward(relu_forward(h))
            if trace is not None:
                trace.append(h.shape[-1])
            if keep_cache:
                caches.append((conv_in, bn_cache, pre_relu, argmax))

        pooled_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        if trace is not None:
            trace.append(h.shape[1])

        fc_inputs = []
        for _j in range(1, len(FC_WIDTHS) + 1):
            fc_inputs.append(h)
            h = linear_forward(h, p[f'fc{_j}.w'], p[f'fc{_j}.b'])

        cache = (caches, pooled_shape, fc_inputs) if keep_cache else None
        return h, cache

    def forward(self, x: np.ndarray, mode: MODE = MODE.INFER, trace: Optional[List[int]] = None) -> np.ndarray:
        """ N x 3 x 96 x 96 -> N x 16.  INFER runs one sample at a time so every product has
            the same shape whatever the batch; a sample's output is bit-identical in any batch.
        """
        self._check_input(x)
        if mode == MODE.TRAIN:
            return self._run(x, MODE.TRAIN, keep_cache=False, trace=trace)[0]

        outputs = []
        for _i in range(x.shape[0]):
            out, _ = self._run(np.ascontiguousarray(x[_i:_i + 1]), MODE.INFER, keep_cache=False,
                               trace=trace if _i == 0 else None)
            outputs.append(out)
        if not outputs:
            return np.zeros((0, OUTPUT_WIDTH), dtype=self.dtype)
        return np.concatenate(outputs, axis=0)

    def forward_train(self, x: np.ndarray):
        """ TRAIN-mode forward keeping what backward() needs.  Returns (out, cache).
        """
        self._check_input(x)
        if x.shape[0] < 2:
            raise ShapeError('N', '>= 2 for batch statistics', x.shape[0])
        return self._run(x, MODE.TRAIN, keep_cache=True)

    def backward(self, dout: np.ndarray, cache) -> Dict[str, np.ndarray]:
        """ Gradients of every parameter given dLoss/dOutput (N x 16)
        """
        caches, pooled_shape, fc_inputs = cache
        p = self.params
        grads = {}

        dh = dout
        for _j in range(len(FC_WIDTHS), 0, -1):
            lg = linear_backward(dh, fc_inputs[_j - 1], p[f'fc{_j}.w'])
            grads[f'fc{_j}.w'], grads[f'fc{_j}.b'] = lg.params['w'], lg.params['b']
            dh = lg.dx

        dh = dh.reshape(pooled_shape)
        for _i in range(len(CONV_CHANNELS), 0, -1):
            conv_in, bn_cache, pre_relu, argmax = caches[_i - 1]
            dh = maxpool2_backward(dh, argmax).dx
            dh = relu_backward(dh, pre_relu).dx

            lg = batchnorm_backward(dh, bn_cache)
            grads[f'bn{_i}.gamma'], grads[f'bn{_i}.beta'] = lg.params['gamma'], lg.params['beta']

            lg = conv3x3_backward(lg.dx, conv_in, p[f'conv{_i}.w'])
            grads[f'conv{_i}.w'], grads[f'conv{_i}.b'] = lg.params['w'], lg.params['b']
            dh = lg.dx

        return {_k: grads[_k].astype(p[_k].dtype, copy=False) for _k in p}


def build_discnn(seed: int, dtype=np.float32) -> DisCNNModel:
    """ Deterministic He fan-in initialization:
          conv weights ~ N(0, 2 / (C_in * 9))     (followed by ReLU)
          fc weights   ~ N(0, 1 / D_in)           (linear layers, unit gain)
          biases = 0, gamma = 1, beta = 0, running mean 0 / var 1
    """
    rng = np.random.default_rng(seed)
    params = {}
    running = {}
    for _name, _shape in PARAM_SHAPES.items():
        if _name.endswith('.w'):
            fan_in = int(np.prod(_shape[1:]))
            gain = 2.0 if _name.startswith('conv') else 1.0
            values = rng.standard_normal(_shape) * np.sqrt(gain / fan_in)
        elif _name.endswith('.gamma'):
            values = np.ones(_shape)
        else:
            values = np.zeros(_shape)
        params[_name] = values.astype(dtype)

    for _i, _c in enumerate(CONV_CHANNELS, start=1):
        running[f'bn{_i}'] = RunningStats(np.zeros(_c, dtype=dtype), np.ones(_c, dtype=dtype))
    return DisCNNModel(params, running)


def forward(model: DisCNNModel, batch: np.ndarray, mode: MODE = MODE.INFER) -> np.ndarray:
    return model.forward(batch, mode)


def output_module(v: np.ndarray):
    """ Euclidean norm along the last axis: a float for one 16-vector, an array for N x 16
    """
    module = np.sqrt(np.sum(np.square(np.asarray(v, dtype=np.float64)), axis=-1))
    return float(module) if np.ndim(module) == 0 else module


def parameter_count(model: DisCNNModel) -> int:
    return model.num_params


# -----   CHECKPOINT   -------
def _checkpoint_tensors(model: DisCNNModel):
    for _i in range(1, len(CONV_CHANNELS) + 1):
        for _suffix in ('w', 'b'):
            yield f'conv{_i}.{_suffix}', model.params[f'conv{_i}.{_suffix}']
        yield f'bn{_i}.gamma', model.params[f'bn{_i}.gamma']
        yield f'bn{_i}.beta', model.params[f'bn{_i}.beta']
        yield f'bn{_i}.mean', model.running[f'bn{_i}'].mean
        yield f'bn{_i}.var', model.running[f'bn{_i}'].var
    for _j in range(1, len(FC_WIDTHS) + 1):
        yield f'fc{_j}.w', model.params[f'fc{_j}.w']
        yield f'fc{_j}.b', model.params[f'fc{_j}.b']


def _descriptor() -> bytes:
    desc = struct.pack('<HBB', INPUT_SIZE, IN_CHANNELS, len(CONV_CHANNELS))
    desc += struct.pack(f'<{len(CONV_CHANNELS)}H', *CONV_CHANNELS)
    desc += struct.pack('<B', len(FC_WIDTHS))
    desc += struct.pack(f'<{len(FC_WIDTHS)}H', *FC_WIDTHS)
    return desc


def save_model(model: DisCNNModel, path: str):
    tensors = list(_checkpoint_tensors(model))
    chunks = [CHECKPOINT_MAGIC, _descriptor(), struct.pack('<I', len(tensors))]
    for _name, _arr in tensors:
        name = _name.encode('ascii')
        chunks.append(struct.pack('<B', len(name)) + name)
        chunks.append(struct.pack(f'<B{_arr.ndim}I', _arr.ndim, *_arr.shape))
        chunks.append(np.ascontiguousarray(_arr, dtype='<f4').tobytes())

    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'wb') as wfp:
        wfp.write(b''.join(chunks))
    logger.debug(f'saved checkpoint {path} ({len(tensors)} tensors)')


class _Reader:
    """ Cursor over checkpoint bytes; any short read is a truncation
    """
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise CheckpointError(f'{self.path}: truncated checkpoint at byte {len(self.data)}')
        chunk = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path: str) -> DisCNNModel:
    with open(path, 'rb') as rfp:
        data = rfp.read()

    rd = _Reader(data, path)
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path}: not a checkpoint (bad magic)')
    rd.take(len(CHECKPOINT_MAGIC))

    descriptor = _descriptor()
    if rd.take(len(descriptor)) != descriptor:
        raise CheckpointError(f'{path}: unsupported architecture descriptor')

    expected = dict(PARAM_SHAPES)
    for _i, _c in enumerate(CONV_CHANNELS, start=1):
        expected[f'bn{_i}.mean'] = (_c,)
        expected[f'bn{_i}.var'] = (_c,)

    n_tensors, = rd.unpack('<I')
    if n_tensors != len(expected):
        raise CheckpointError(f'{path}: expected {len(expected)} tensors, found {n_tensors}')

    tensors = {}
    for _ in range(n_tensors):
        name_len, = rd.unpack('<B')
        name = rd.take(name_len).decode('ascii', errors='replace')
        ndim, = rd.unpack('<B')
        shape = rd.unpack(f'<{ndim}I')
        if expected.get(name) != tuple(shape):
            raise CheckpointError(f'{path}: unexpected tensor {name} {tuple(shape)}')
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(rd.take(4 * count), dtype='<f4').astype(np.float32).reshape(shape)

    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f'{path}: missing tensors {", ".join(missing)}')
    if rd.pos != len(data):
        raise CheckpointError(f'{path}: {len(data) - rd.pos} trailing bytes after last tensor')

    params = {_k: tensors[_k] for _k in PARAM_SHAPES}
    running = {f'bn{_i}': RunningStats(tensors[f'bn{_i}.mean'], tensors[f'bn{_i}.var'])
               for _i in range(1, len(CONV_CHANNELS) + 1)}
    return DisCNNModel(params, running)
