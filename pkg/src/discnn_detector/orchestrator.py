"""
Multi-class detection: one independent DisCNN per positive class, run side by side.

  Registry file (ini), one section per class:
      [car]
      checkpoint = models/car.dcnn      ; relative to the registry file
      thr = 4.5
      min_sws = 40                      ; optional, any detect key
"""
import os
import logging
import multiprocessing
import numpy as np

from typing import Dict, Iterator, Optional, Tuple
from collections import namedtuple
from configparser import RawConfigParser, Error as ConfigParserError

from .errors import CheckpointError, ConfigError, RegistryError
from .discnn_model import DisCNNModel, load_model
from .detector import (DetectConfig, DETECT_KEYS, check_detect_config, detect,
                       detect_config_from_strings, detection_document)

logger = logging.getLogger(__name__)

REGISTRY_KEYS = {'checkpoint'} | {_k for _k, _ in DETECT_KEYS}

RegistryEntry = namedtuple('RegistryEntry', ['checkpoint', 'config', 'model'])
ClassResult = namedtuple('ClassResult', ['error', 'clusters'])


class ClassRegistry:
    """ class name -> RegistryEntry.  Models are loaded at registration and never mutated afterwards.
    """
    def __init__(self):
        self._entries: Dict[str, RegistryEntry] = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> RegistryEntry:
        return self._entries[name]

    def names(self):
        return sorted(self._entries)

    def items(self) -> Iterator[Tuple[str, RegistryEntry]]:
        """ Entries in class-name order
        """
        for _name in self.names():
            yield _name, self._entries[_name]

    def add_model(self, name: str, model: DisCNNModel, config: DetectConfig,
                  checkpoint: str = '<memory>') -> 'ClassRegistry':
        if not name or not name.strip():
            raise RegistryError('class name must not be empty')
        if name in self._entries:
            raise RegistryError(f'class "{name}" already registered')
        check_detect_config(config)
        self._entries[name] = RegistryEntry(checkpoint, config, model)
        logger.debug(f'registered class {name} ({checkpoint})')
        return self

    def register(self, name: str, checkpoint: str, config: DetectConfig) -> 'ClassRegistry':
        if name in self._entries:
            raise RegistryError(f'class "{name}" already registered')
        try:
            model = load_model(checkpoint)
        except OSError as err:
            raise CheckpointError(f'{checkpoint}: {err.strerror or err}')
        return self.add_model(name, model, config, checkpoint)


def register_class_model(registry: ClassRegistry, name: str, checkpoint: str,
                         config: DetectConfig) -> ClassRegistry:
    return registry.register(name, checkpoint, config)


def load_registry(path: str, base: Optional[DetectConfig] = None) -> ClassRegistry:
    parser = RawConfigParser()
    try:
        with open(path) as rfp:
            parser.read_file(rfp)
    except ConfigParserError as err:
        raise ConfigError(f'{path}: {err}')

    if not parser.sections():
        raise RegistryError(f'{path}: no classes registered')

    registry = ClassRegistry()
    root = os.path.dirname(os.path.abspath(path))
    for _name in parser.sections():
        section = parser[_name]
        unknown = sorted(set(section) - REGISTRY_KEYS)
        if unknown:
            raise ConfigError(f'{path} [{_name}]: unknown keys {", ".join(unknown)}')
        if not section.get('checkpoint'):
            raise ConfigError(f'{path} [{_name}]: checkpoint is required')

        config = detect_config_from_strings(section, base)
        if config.thr is None:
            raise ConfigError(f'{path} [{_name}]: thr is required')
        registry.register(_name, os.path.join(root, section['checkpoint']), config)
    return registry


# -----   DETECTION   -------
def _detect_one(task) -> Tuple[str, ClassResult]:
    name, image, model, config = task
    try:
        return name, ClassResult(None, detect(image, model, config))
    except Exception as err:
        logger.error(f'class {name}: {err}')
        return name, ClassResult(f'{type(err).__name__}: {err}', [])


def detect_multi(image: np.ndarray, registry: ClassRegistry, parallelism: int = 1) -> Dict[str, ClassResult]:
    """ detect() for every registered class; results keyed in class-name order.
        parallelism > 1 spreads classes over that many worker processes; each class's
        result is the same as running it alone.  A failing class is reported in its
        ClassResult.error and does not stop the others.
    """
    if not len(registry):
        raise RegistryError('no classes registered')
    if parallelism < 1:
        raise ConfigError(f'parallelism must be >= 1, got {parallelism}')

    tasks = [(_name, image, _entry.model, _entry.config) for _name, _entry in registry.items()]
    if parallelism > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context('spawn')
        with ctx.Pool(processes=min(parallelism, len(tasks))) as pool:
            results = pool.map(_detect_one, tasks, chunksize=1)
    else:
        results = [_detect_one(_t) for _t in tasks]
    return dict(results)


def multi_document(image_id: str, registry: ClassRegistry, results: Dict[str, ClassResult]) -> dict:
    classes = {}
    for _name, _result in results.items():
        doc = detection_document(image_id, registry[_name].config, _result.clusters)
        if _result.error:
            doc['error'] = _result.error
        classes[_name] = doc
    return {'image': image_id, 'classes': classes}
