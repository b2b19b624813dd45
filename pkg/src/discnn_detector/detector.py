"""
Multi-scale sliding-window detection with a trained DisCNN.

  1. sws = min(l, m)  (or the high end of a configured window range)
  2. stride = sws // 3, window attenuation wa = sws // 20   (both >= 1)
  3. cut the image into sws x sws patches on the stride grid (plus an edge-clamped last row/column)
  4. resize every patch to 96 x 96 and take the module of its output vector
  5. keep patches whose module > thr, with their location
  6. sws -= wa; repeat from 2 while sws > min_sws (or the low end of the range)
  7. cluster the centres of all kept patches and draw one max-boundary box per cluster
"""
import logging
import numpy as np

from itertools import islice
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError, DatasetError, DisCNNError, ShapeError
from .dataset import Sample
from .image_io import Box, box_area, box_center, check_image, resize_bilinear, to_unit_float
from .discnn_model import INPUT_SIZE, DisCNNModel, output_module
from .n2o_trainer import score_samples

logger = logging.getLogger(__name__)

ScheduleEntry = namedtuple('ScheduleEntry', ['sws', 'stride', 'wa'])
WindowSchedule = namedtuple('WindowSchedule', ['entries', 'min_sws'])
PatchRecord = namedtuple('PatchRecord', ['xmin', 'ymin', 'xmax', 'ymax', 'sws', 'module'])
DetectionCluster = namedtuple('DetectionCluster', ['members', 'box', 'count', 'max_module'])
DetectConfig = namedtuple('DetectConfig', ['thr', 'min_sws', 'link_distance', 'batch_cap', 'sws_range',
                                           'stride_div', 'wa_div', 'workers'],
                          defaults=(40, None, 512, None, 3, 20, 1))


def parse_sws_range(text: str) -> Tuple[int, int]:
    """ '220,180' or '[220, 180)' -> (220, 180)
    """
    parts = [_p for _p in text.strip().strip('[]()').split(',') if _p.strip()]
    if len(parts) != 2:
        raise ConfigError(f'window range "{text}" must be hi,lo')
    try:
        return _check_range(int(_p) for _p in parts)
    except ValueError:
        raise ConfigError(f'window range "{text}" must hold two integers')


# ini / command-line key -> parser, in DetectConfig field order
DETECT_KEYS = [('thr',           float),
               ('min_sws',       int),
               ('link_distance', float),
               ('batch_cap',     int),
               ('sws_range',     parse_sws_range),
               ('stride_div',    int),
               ('wa_div',        int),
               ('workers',       int)]


def detect_config_from_strings(values, base: Optional[DetectConfig] = None) -> DetectConfig:
    """ Build a DetectConfig from a str -> str mapping (ini section); keys not in DETECT_KEYS are ignored
    """
    fields = (base or DetectConfig(thr=None))._asdict()
    for _key, _parse in DETECT_KEYS:
        raw = values.get(_key)
        if raw is None or str(raw).strip() == '':
            continue
        try:
            fields[_key] = _parse(str(raw).strip())
        except ValueError as err:
            raise ConfigError(f'{_key} = "{raw}": {err}')
    return DetectConfig(**fields)


def check_detect_config(config: DetectConfig) -> DetectConfig:
    if config.thr is None or config.thr < 0:
        raise ConfigError(f'thr must be >= 0, got {config.thr}')
    if config.min_sws < 1:
        raise ConfigError(f'min_sws must be >= 1, got {config.min_sws}')
    if config.batch_cap < 1:
        raise ConfigError(f'batch_cap must be >= 1, got {config.batch_cap}')
    if config.link_distance is not None and config.link_distance <= 0:
        raise ConfigError(f'link_distance must be > 0, got {config.link_distance}')
    if config.stride_div < 1 or config.wa_div < 1:
        raise ConfigError(f'stride_div and wa_div must be >= 1, got {config.stride_div}, {config.wa_div}')
    if config.workers < 1:
        raise ConfigError(f'workers must be >= 1, got {config.workers}')
    if config.sws_range is not None:
        _check_range(config.sws_range)
    return config


def _check_range(sws_range) -> Tuple[int, int]:
    try:
        hi, lo = (int(_v) for _v in sws_range)
    except (TypeError, ValueError):
        # also reached for ranges with more or fewer than two values
        raise ConfigError(f'window range must be a pair (hi, lo), got {sws_range!r}')
    if hi < 1 or lo < 0 or hi <= lo:
        raise ConfigError(f'window range [{hi}, {lo}) is empty or negative')
    return hi, lo


# -----   SCHEDULE / PATCHES   -------
def window_schedule(l: int, m: int, min_sws: int,
                    sws_range: Optional[Tuple[int, int]] = None,
                    stride_div: int = 3, wa_div: int = 20) -> WindowSchedule:
    """ Window sizes for an l (rows) x m (columns) image, largest first.
        sws_range = (hi, lo) replaces the start min(l, m) by hi and the stop min_sws by lo.
        The first window is always emitted; later ones only while sws > stop.
    """
    if sws_range is None:
        if min_sws < 1:
            raise ConfigError(f'min_sws must be >= 1, got {min_sws}')
        if min_sws > min(l, m):
            raise ConfigError(f'min_sws {min_sws} exceeds the smaller image side {min(l, m)}')
        sws, stop = min(l, m), min_sws
    else:
        sws, stop = _check_range(sws_range)

    entries = []
    while True:
        wa = max(1, sws // wa_div)
        entries.append(ScheduleEntry(sws, max(1, sws // stride_div), wa))
        sws -= wa
        if sws <= stop:
            break
    return WindowSchedule(entries, stop)


def _positions(extent: int, sws: int, stride: int) -> List[int]:
    """ Grid origins 0, stride, ... with origin + sws <= extent, plus extent - sws if the grid misses the edge
    """
    grid = list(range(0, extent - sws + 1, stride))
    if grid[-1] + sws < extent:
        grid.append(extent - sws)
    return grid


def count_patches(width: int, height: int, schedule: WindowSchedule) -> int:
    total = 0
    for _entry in schedule.entries:
        if _entry.sws > min(width, height):
            continue
        total += len(_positions(width, _entry.sws, _entry.stride)) * len(_positions(height, _entry.sws, _entry.stride))
    return total


def iter_patches(image: np.ndarray, sws: int, stride: int) -> Iterator[Tuple[Box, np.ndarray]]:
    """ (Box, view) pairs, rows top to bottom, columns left to right
    """
    height, width = image.shape[:2]
    if sws > min(height, width):
        raise ShapeError('sws', f'<= {min(height, width)}', sws)
    if sws < 1 or stride < 1:
        raise ShapeError('sws/stride', '>= 1', (sws, stride))

    xs = _positions(width, sws, stride)
    for _y in _positions(height, sws, stride):
        for _x in xs:
            yield Box(_x, _y, _x + sws, _y + sws), image[_y:_y + sws, _x:_x + sws]


def extract_patches(image: np.ndarray, sws: int, stride: int) -> List[Tuple[Box, np.ndarray]]:
    return list(iter_patches(image, sws, stride))


# -----   SCORING   -------
def score_patches(model: DisCNNModel, patches, batch_cap: int = 512, n: int = INPUT_SIZE) -> List[PatchRecord]:
    """ Module of every (Box, patch) pair, batch_cap patches resident at a time; input order kept
    """
    if batch_cap < 1:
        raise ConfigError(f'batch_cap must be >= 1, got {batch_cap}')

    records = []
    patches = iter(patches)
    while True:
        chunk = list(islice(patches, batch_cap))
        if not chunk:
            break
        resized = np.stack([resize_bilinear(_patch, n) for _, _patch in chunk])
        modules = output_module(model.forward(to_unit_float(resized).astype(model.dtype, copy=False)))
        for (_box, _), _module in zip(chunk, modules):
            records.append(PatchRecord(*_box, _box.xmax - _box.xmin, float(_module)))
    return records


def threshold_filter(records: Sequence[PatchRecord], thr: float) -> List[PatchRecord]:
    if not thr >= 0:
        raise ConfigError(f'thr must be >= 0, got {thr}')
    return [_r for _r in records if _r.module > thr]


# -----   CLUSTERING   -------
class _UnionFind:
    def __init__(self, n: int):
        self._id = list(range(n))

    def root(self, i: int) -> int:
        while i != self._id[i]:
            self._id[i] = self._id[self._id[i]]
            i = self._id[i]
        return i

    def join(self, p: int, q: int):
        rp, rq = self.root(p), self.root(q)
        if rp != rq:
            self._id[max(rp, rq)] = min(rp, rq)


def _canonical_key(record: PatchRecord):
    return -record.sws, record.ymin, record.xmin, record.module


def record_box(record: PatchRecord) -> Box:
    return Box(record.xmin, record.ymin, record.xmax, record.ymax)


def max_boundary_box(cluster: Union[DetectionCluster, Sequence[PatchRecord]]) -> Box:
    members = cluster.members if isinstance(cluster, DetectionCluster) else cluster
    if not members:
        raise DisCNNError('max_boundary_box of an empty cluster')
    return Box(min(_r.xmin for _r in members), min(_r.ymin for _r in members),
               max(_r.xmax for _r in members), max(_r.ymax for _r in members))


def cluster_records(records: Sequence[PatchRecord], link_distance: float) -> List[DetectionCluster]:
    """ Single-linkage components over patch centres: two records are linked when their
        centres are at most link_distance apart.  Members and clusters follow the canonical
        record order (larger windows first, then top to bottom, left to right), so the result
        does not depend on the input order.
    """
    if link_distance <= 0:
        raise ConfigError(f'link_distance must be > 0, got {link_distance}')

    ordered = sorted(records, key=_canonical_key)
    if not ordered:
        return []

    centers = np.array([box_center(record_box(_r)) for _r in ordered], dtype=np.float64)
    link2 = float(link_distance) ** 2
    union = _UnionFind(len(ordered))
    for _i in range(len(ordered) - 1):
        d2 = np.sum(np.square(centers[_i + 1:] - centers[_i]), axis=1)
        for _j in np.nonzero(d2 <= link2)[0]:
            union.join(_i, _i + 1 + int(_j))

    groups: Dict[int, List[PatchRecord]] = {}
    for _i, _r in enumerate(ordered):
        groups.setdefault(union.root(_i), []).append(_r)

    clusters = []
    for _root in sorted(groups):
        members = groups[_root]
        clusters.append(DetectionCluster(members, max_boundary_box(members), len(members),
                                         max(_r.module for _r in members)))
    return clusters


def iou(a: Box, b: Box) -> float:
    inter = box_area(Box(max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))
    union = box_area(Box(*a)) + box_area(Box(*b)) - inter
    return inter / union if union > 0 else 0.0


# -----   DETECTION   -------
def _scan_scale(image: np.ndarray, model: DisCNNModel, entry: ScheduleEntry,
                config: DetectConfig) -> List[PatchRecord]:
    records = score_patches(model, iter_patches(image, entry.sws, entry.stride), config.batch_cap)
    kept = threshold_filter(records, config.thr)
    logger.debug(f'sws={entry.sws} stride={entry.stride}: {len(records)} patches, {len(kept)} above thr')
    return kept


def detect(image: np.ndarray, model: DisCNNModel, config: DetectConfig) -> List[DetectionCluster]:
    """ Scan every scale of the window schedule, keep patches above config.thr across all
        scales, then cluster them once.  Scales may be scanned by config.workers threads;
        records are merged in schedule order, so the result equals the sequential one.
    """
    check_detect_config(config)
    check_image(image)
    height, width = image.shape[:2]
    schedule = window_schedule(height, width, config.min_sws, config.sws_range,
                               config.stride_div, config.wa_div)

    entries = []
    for _entry in schedule.entries:
        if _entry.sws > min(height, width):
            logger.info(f'sws {_entry.sws} skipped, image is {width} x {height}')
        else:
            entries.append(_entry)

    if config.workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            per_scale = list(pool.map(lambda _e: _scan_scale(image, model, _e, config), entries))
    else:
        per_scale = [_scan_scale(image, model, _e, config) for _e in entries]

    records = [_r for _scale in per_scale for _r in _scale]
    link = config.link_distance if config.link_distance is not None else config.min_sws
    clusters = cluster_records(records, link)
    logger.info(f'{len(entries)} scales, {len(records)} positive patches, {len(clusters)} clusters')
    return clusters


def calibrate_threshold(model: DisCNNModel, samples: Sequence[Sample]) -> float:
    """ Midpoint between the mean positive and the mean negative module
    """
    labels = np.array([_s.label for _s in samples])
    if not np.any(labels == 1) or not np.any(labels != 1):
        raise DatasetError('threshold calibration needs positive and negative samples')
    modules = output_module(score_samples(model, samples))
    pos_mean, neg_mean = float(modules[labels == 1].mean()), float(modules[labels != 1].mean())
    thr = (pos_mean + neg_mean) / 2.0
    logger.info(f'calibration: mean positive module {pos_mean:.4f}, mean negative {neg_mean:.4f}, thr {thr:.4f}')
    return thr


def inspect_scales(model: DisCNNModel, image: np.ndarray, sws_list: Sequence[int],
                   top_k: Optional[int] = None, batch_cap: int = 512,
                   stride_div: int = 3) -> Dict[int, List[PatchRecord]]:
    """ Per fixed window size, all patches sorted by module (highest first)
    """
    check_image(image)
    ranked = {}
    for _sws in sws_list:
        records = score_patches(model, iter_patches(image, _sws, max(1, _sws // stride_div)), batch_cap)
        records.sort(key=lambda _r: (-_r.module, _r.ymin, _r.xmin))
        ranked[_sws] = records[:top_k] if top_k else records
    return ranked


def detection_document(image_id: str, config: DetectConfig, clusters: Sequence[DetectionCluster]) -> dict:
    config_echo = config._asdict()
    if config.sws_range is not None:
        config_echo['sws_range'] = [int(_v) for _v in config.sws_range]
    return {
        'image': image_id,
        'config': config_echo,
        'clusters': [{'box': [int(_v) for _v in _c.box],
                      'member_count': _c.count,
                      'max_module': _c.max_module,
                      'scales_present': sorted({_r.sws for _r in _c.members}, reverse=True)}
                     for _c in clusters],
    }
