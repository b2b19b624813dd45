import json
import numpy as np
import pytest

from discnn_detector.errors import CheckpointError, ConfigError, RegistryError
from discnn_detector.image_io import Box
from discnn_detector.dataset import SceneSpec, make_scene
from discnn_detector.discnn_model import build_discnn, save_model
from discnn_detector.detector import DetectConfig, detect, iou
from discnn_detector.orchestrator import (ClassRegistry, detect_multi, load_registry, multi_document,
                                          register_class_model)

SMALL = DetectConfig(thr=0.0, min_sws=80, link_distance=30.0)


@pytest.fixture(scope='module')
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp('models')
    paths = {}
    for _name, _seed in (('car', 1), ('bird', 2)):
        paths[_name] = str(root / f'{_name}.dcnn')
        save_model(build_discnn(_seed), paths[_name])
    return paths


@pytest.fixture(scope='module')
def two_class_scene():
    image, _ = make_scene(SceneSpec(120, 120, Box(8, 8, 56, 56), seed=4, extra=(('beacon', Box(64, 64, 112, 112)),)))
    return image


def test_register_two_classes(checkpoints):
    registry = ClassRegistry()
    register_class_model(registry, 'car', checkpoints['car'], SMALL)
    register_class_model(registry, 'bird', checkpoints['bird'], SMALL)
    assert len(registry) == 2
    assert registry.names() == ['bird', 'car']
    assert 'car' in registry and registry['car'].checkpoint == checkpoints['car']


def test_duplicate_class(checkpoints):
    registry = register_class_model(ClassRegistry(), 'car', checkpoints['car'], SMALL)
    with pytest.raises(RegistryError, match='already registered'):
        register_class_model(registry, 'car', checkpoints['bird'], SMALL)
    assert len(registry) == 1


def test_corrupt_checkpoint_leaves_registry_unchanged(checkpoints, tmp_path):
    registry = register_class_model(ClassRegistry(), 'car', checkpoints['car'], SMALL)
    broken = tmp_path / 'broken.dcnn'
    with open(checkpoints['bird'], 'rb') as rfp:
        broken.write_bytes(rfp.read()[:500])
    with pytest.raises(CheckpointError):
        register_class_model(registry, 'bird', str(broken), SMALL)
    with pytest.raises(CheckpointError):
        register_class_model(registry, 'bird', str(tmp_path / 'missing.dcnn'), SMALL)
    assert registry.names() == ['car']


def test_bad_names_and_configs(seeded_model):
    registry = ClassRegistry()
    with pytest.raises(RegistryError):
        registry.add_model(' ', seeded_model, SMALL)
    with pytest.raises(ConfigError):
        registry.add_model('car', seeded_model, DetectConfig(thr=-1.0))
    assert len(registry) == 0


def test_empty_registry(two_class_scene):
    with pytest.raises(RegistryError, match='no classes registered'):
        detect_multi(two_class_scene, ClassRegistry())


def test_parallel_equals_sequential(two_class_scene):
    registry = ClassRegistry()
    registry.add_model('wagon', build_discnn(5), SMALL)
    registry.add_model('beacon', build_discnn(6), SMALL)

    sequential = detect_multi(two_class_scene, registry, parallelism=1)
    parallel = detect_multi(two_class_scene, registry, parallelism=4)
    assert list(sequential) == ['beacon', 'wagon']
    assert parallel == sequential
    assert json.dumps(multi_document('scene', registry, parallel), sort_keys=True) == \
        json.dumps(multi_document('scene', registry, sequential), sort_keys=True)

    for _name, _result in sequential.items():
        assert _result.error is None
        assert _result.clusters == detect(two_class_scene, registry[_name].model, registry[_name].config)


def test_failing_class_is_reported(two_class_scene, seeded_model):
    registry = ClassRegistry()
    registry.add_model('ok', seeded_model, SMALL)
    # min_sws above the image side makes the schedule invalid for this class only
    registry.add_model('broken', seeded_model, SMALL._replace(min_sws=500))
    results = detect_multi(two_class_scene, registry)
    assert results['broken'].error.startswith('ConfigError')
    assert results['broken'].clusters == []
    assert results['ok'].error is None and results['ok'].clusters

    document = multi_document('scene', registry, results)
    assert 'error' in document['classes']['broken'] and 'error' not in document['classes']['ok']


def test_load_registry(checkpoints, tmp_path):
    path = tmp_path / 'classes.ini'
    path.write_text(f'[car]\ncheckpoint = {checkpoints["car"]}\nthr = 4.5\n\n'
                    f'[bird]\ncheckpoint = {checkpoints["bird"]}\nthr = 2\nsws_range = 220,180\n')
    registry = load_registry(str(path), base=DetectConfig(thr=None, min_sws=60))
    assert registry.names() == ['bird', 'car']
    assert registry['car'].config.thr == 4.5 and registry['car'].config.min_sws == 60
    assert registry['bird'].config.sws_range == (220, 180)


def test_load_registry_relative_checkpoint(tmp_path):
    (tmp_path / 'models').mkdir()
    save_model(build_discnn(0), str(tmp_path / 'models' / 'car.dcnn'))
    path = tmp_path / 'classes.ini'
    path.write_text('[car]\ncheckpoint = models/car.dcnn\nthr = 1\n')
    assert load_registry(str(path)).names() == ['car']


@pytest.mark.parametrize('content, error', [
    ('', RegistryError),
    ('[car]\nthr = 1\n', ConfigError),
    ('[car]\ncheckpoint = car.dcnn\n', ConfigError),
    ('[car]\ncheckpoint = car.dcnn\nthr = 1\ncolour = red\n', ConfigError),
    ('thr = 1\n', ConfigError),
])
def test_load_registry_errors(tmp_path, checkpoints, content, error):
    save_model(build_discnn(0), str(tmp_path / 'car.dcnn'))
    path = tmp_path / 'classes.ini'
    path.write_text(content)
    with pytest.raises(error):
        load_registry(str(path))


@pytest.mark.slow
def test_two_trained_classes_find_their_own_glyph(trained_pair):
    wagon_box, beacon_box = Box(40, 40, 104, 104), Box(120, 100, 184, 164)
    image, _ = make_scene(SceneSpec(224, 224, wagon_box, seed=31, extra=(('beacon', beacon_box),)))

    registry = ClassRegistry()
    for _name, (_model, _, _thr) in trained_pair.items():
        registry.add_model(_name, _model, DetectConfig(thr=_thr, min_sws=40, sws_range=(96, 56)))
    results = detect_multi(image, registry, parallelism=2)

    for _name, _own, _other in (('wagon', wagon_box, beacon_box), ('beacon', beacon_box, wagon_box)):
        boxes = [_c.box for _c in results[_name].clusters]
        assert any(iou(_b, _own) >= 0.5 for _b in boxes)
        assert not any(iou(_b, _other) >= 0.5 for _b in boxes)
