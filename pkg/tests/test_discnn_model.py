import numpy as np
import numpy.testing as npt
import pytest

from discnn_detector.errors import CheckpointError, ShapeError
from discnn_detector.tensor_engine import MODE, BN_EPS, grad_check
from discnn_detector.discnn_model import (MODEL_PARAM_COUNT, FLATTEN_WIDTH, OUTPUT_WIDTH, CHECKPOINT_MAGIC,
                                          build_discnn, forward, output_module, parameter_count,
                                          save_model, load_model)
from discnn_detector.n2o_trainer import n2o_batch_loss

from conftest import zero_discnn


def table_param_count():
    conv = (64 * 3 * 9 + 64) + (32 * 64 * 9 + 32) + (16 * 32 * 9 + 16) + (8 * 16 * 9 + 8)
    bn = 2 * (64 + 32 + 16 + 8)
    fc = (288 * 288 + 288) + (128 * 288 + 128) + (16 * 128 + 16)
    return conv + bn + fc


def reference_forward(model, x):
    """ Infer-mode forward written out with plain loops over layers
    """
    p, h = model.params, x.astype(np.float64)
    for _i in range(1, 5):
        w, b = p[f'conv{_i}.w'].astype(np.float64), p[f'conv{_i}.b'].astype(np.float64)
        n, c, hh, ww = h.shape
        padded = np.zeros((n, c, hh + 2, ww + 2))
        padded[:, :, 1:-1, 1:-1] = h
        conv = np.zeros((n, w.shape[0], hh, ww))
        for _dy in range(3):
            for _dx in range(3):
                window = padded[:, :, _dy:_dy + hh, _dx:_dx + ww]
                conv += np.einsum('oc,nchw->nohw', w[:, :, _dy, _dx], window)
        conv += b[None, :, None, None]

        stats = model.running[f'bn{_i}']
        norm = (conv - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + BN_EPS)
        norm = norm * p[f'bn{_i}.gamma'][None, :, None, None] + p[f'bn{_i}.beta'][None, :, None, None]
        act = np.maximum(norm, 0.0)
        h = act.reshape(n, w.shape[0], hh // 2, 2, ww // 2, 2).max(axis=(3, 5))

    h = h.reshape(h.shape[0], -1)
    for _j in range(1, 4):
        h = h @ p[f'fc{_j}.w'].T.astype(np.float64) + p[f'fc{_j}.b']
    return h


def test_parameter_count_matches_table():
    assert table_param_count() == MODEL_PARAM_COUNT == 148568
    assert parameter_count(build_discnn(0)) == MODEL_PARAM_COUNT


def test_build_is_deterministic():
    a, b = build_discnn(11), build_discnn(11)
    for _k in a.params:
        npt.assert_array_equal(a.params[_k], b.params[_k])
    c = build_discnn(12)
    assert any(not np.array_equal(a.params[_k], c.params[_k]) for _k in a.params)


def test_spatial_trace(seeded_model, rng):
    trace = []
    out = seeded_model.forward(rng.uniform(size=(2, 3, 96, 96)).astype(np.float32), trace=trace)
    assert trace == [48, 24, 12, 6, FLATTEN_WIDTH]
    assert FLATTEN_WIDTH == 288
    assert out.shape == (2, OUTPUT_WIDTH)


def test_zero_model_outputs_zero(zero_model, rng):
    out = forward(zero_model, rng.uniform(size=(3, 3, 96, 96)).astype(np.float32))
    npt.assert_array_equal(out, 0.0)


def test_forward_matches_reference(seeded_model, rng):
    x = rng.uniform(size=(2, 3, 96, 96)).astype(np.float32)
    npt.assert_allclose(forward(seeded_model, x), reference_forward(seeded_model, x), rtol=1e-3, atol=1e-4)


def test_infer_is_batch_independent(seeded_model, rng):
    x = rng.uniform(size=(40, 3, 96, 96)).astype(np.float32)
    whole = seeded_model.forward(x)
    single = np.concatenate([seeded_model.forward(x[_i:_i + 1]) for _i in range(40)])
    npt.assert_array_equal(whole, single)
    npt.assert_array_equal(seeded_model.forward(x[5:29]), whole[5:29])
    npt.assert_array_equal(seeded_model.forward(x[::-1])[::-1], whole)
    npt.assert_array_equal(seeded_model.forward(x), whole)


def test_wrong_input_shape(seeded_model):
    with pytest.raises(ShapeError):
        seeded_model.forward(np.zeros((1, 3, 64, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        seeded_model.forward_train(np.zeros((1, 3, 96, 96), dtype=np.float32))


def test_train_mode_updates_running_stats(rng):
    model = build_discnn(5)
    before = model.running['bn1'].mean.copy()
    model.forward_train(rng.uniform(size=(2, 3, 96, 96)).astype(np.float32))
    assert not np.array_equal(model.running['bn1'].mean, before)


def test_output_module_cases(rng):
    assert output_module(np.zeros(16)) == 0.0
    assert output_module(np.eye(16)[3]) == 1.0
    assert output_module(np.array([3.0, 4.0] + [0.0] * 14)) == 5.0

    u, v = rng.standard_normal((2, 16))
    assert output_module(u) >= 0.0
    assert output_module(-2.5 * u) == pytest.approx(2.5 * output_module(u))
    assert output_module(u + v) <= output_module(u) + output_module(v) + 1e-12
    npt.assert_allclose(output_module(np.stack([u, v])), [output_module(u), output_module(v)])


def test_full_model_gradient(rng):
    model = build_discnn(2, dtype=np.float64)
    x = rng.uniform(size=(2, 3, 96, 96))
    y = np.array([1, 0])
    running = dict(model.running)

    def loss():
        model.running = dict(running)
        out = model.forward(x, MODE.TRAIN)
        return n2o_batch_loss(out, y, 1.0)[0]

    out, cache = model.forward_train(x)
    _, dz = n2o_batch_loss(out, y, 1.0)
    grads = model.backward(dz, cache)
    model.running = dict(running)

    # conv biases feed batch-norm, which cancels them; their gradient is ~0 on both sides
    names = [_k for _k in model.params if not (_k.startswith('conv') and _k.endswith('.b'))]
    assert grad_check(loss, model.params, grads, probes=50, names=names) <= 1e-4
    npt.assert_allclose(grads['conv1.b'], 0.0, atol=1e-8)


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_discnn(9)
    model.forward_train(rng.uniform(size=(2, 3, 96, 96)).astype(np.float32))
    path = tmp_path / 'model.dcnn'
    save_model(model, str(path))

    loaded = load_model(str(path))
    for _k in model.params:
        npt.assert_array_equal(loaded.params[_k], model.params[_k])
        assert loaded.params[_k].dtype == np.float32
    for _k in model.running:
        npt.assert_array_equal(loaded.running[_k].mean, model.running[_k].mean)
        npt.assert_array_equal(loaded.running[_k].var, model.running[_k].var)

    again = tmp_path / 'again.dcnn'
    save_model(loaded, str(again))
    assert again.read_bytes() == path.read_bytes()
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / 'model.dcnn'
    save_model(build_discnn(1), str(path))
    data = path.read_bytes()
    for _cut in (len(CHECKPOINT_MAGIC) + 3, 200, len(data) - 1):
        path.write_bytes(data[:_cut])
        with pytest.raises(CheckpointError):
            load_model(str(path))


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / 'model.dcnn'
    save_model(build_discnn(1), str(path))
    path.write_bytes(path.read_bytes() + b'\0')
    with pytest.raises(CheckpointError, match='trailing'):
        load_model(str(path))


def test_wrong_magic(tmp_path):
    path = tmp_path / 'notes.txt'
    path.write_bytes(b'hello, this is not a model')
    with pytest.raises(CheckpointError, match='not a checkpoint'):
        load_model(str(path))


def test_zero_model_factory_is_valid():
    assert zero_discnn().num_params == MODEL_PARAM_COUNT
