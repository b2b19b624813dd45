"""
Training data for a one-positive-class DisCNN.

  STL-10 binary files: per image 3 x 96 x 96 unsigned bytes, channels R, G, B, each channel
  stored column-major; labels are 1-byte values 1..10.  Samples are converted to
  row-major H x W x 3 uint8.

  Synthetic data: compositional glyphs (e.g. a 'wagon' = body + two wheels + plate) are the
  positive class; negatives are textures built from none of the glyph parts (noise, stripes,
  blank, checker).  Scenes are large noise/blank backgrounds with glyphs planted at known boxes.
"""
import os
import logging
import numpy as np

from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
from collections import namedtuple

from .errors import DatasetError
from .image_io import Box, new_image, to_unit_float

logger = logging.getLogger(__name__)

STL10_CLASSES = ('airplane', 'bird', 'car', 'cat', 'deer', 'dog', 'horse', 'monkey', 'ship', 'truck')
STL10_SIZE = 96
STL10_IMAGE_BYTES = 3 * STL10_SIZE * STL10_SIZE

SAMPLE_SIZE = 96
POSITIVE_TAG = 0
SOURCE = IntEnum('SOURCE', ['NOISE', 'STRIPES', 'BLANK', 'CHECKER', 'OTHER_GLYPH'])
NEGATIVE_TEXTURES = (SOURCE.NOISE, SOURCE.STRIPES, SOURCE.BLANK, SOURCE.CHECKER)

Sample = namedtuple('Sample', ['image', 'label', 'source_class', 'box'], defaults=(None,))
SceneSpec = namedtuple('SceneSpec', ['width', 'height', 'box', 'seed', 'glyph', 'extra'],
                       defaults=('wagon', ()))
DataReport = namedtuple('DataReport', ['n_pos', 'n_neg', 'pos_classes', 'neg_classes', 'ratio', 'warnings'])

# Glyph parts in unit coordinates (u = across, v = down) of the glyph box
#   rect     : (u0, v0, u1, v1)
#   disk     : (cu, cv, r)
#   ring     : (cu, cv, r_out, r_in)
#   triangle : (apex_u, apex_v, base_u0, base_v, base_u1)
GLYPH_PARTS = {
    'wagon': (('body',        'rect',     (0.05, 0.20, 0.95, 0.72),       (200, 40, 40)),
              ('wheel_left',  'disk',     (0.27, 0.78, 0.15),             (25, 25, 25)),
              ('wheel_right', 'disk',     (0.73, 0.78, 0.15),             (25, 25, 25)),
              ('plate',       'rect',     (0.40, 0.48, 0.60, 0.60),       (240, 240, 240))),
    'beacon': (('lamp',       'ring',     (0.50, 0.25, 0.20, 0.10),       (240, 200, 40)),
               ('cone',       'triangle', (0.50, 0.48, 0.15, 0.95, 0.85), (40, 90, 220))),
}
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


# -----   STL-10   -------
def _stl10_class_id(cls: Union[int, str]) -> int:
    if isinstance(cls, str):
        try:
            return STL10_CLASSES.index(cls.strip().lower()) + 1
        except ValueError:
            raise DatasetError(f'unknown STL-10 class "{cls}", choose from {", ".join(STL10_CLASSES)}')
    if not 1 <= int(cls) <= len(STL10_CLASSES):
        raise DatasetError(f'STL-10 label {cls} outside 1..{len(STL10_CLASSES)}')
    return int(cls)


def load_stl10_split(images_path: str, labels_path: str,
                     class_filter: Iterable[Union[int, str]],
                     positive_class: Union[int, str],
                     limit: Optional[int] = None) -> List[Sample]:
    """ Read an STL-10 X/y file pair, keeping classes in class_filter.
        label = 1 iff the STL-10 class is positive_class; source_class = STL-10 label (1..10).
    """
    filter_ids = {_stl10_class_id(_c) for _c in class_filter}
    positive_id = _stl10_class_id(positive_class)

    image_bytes = os.path.getsize(images_path)
    if image_bytes % STL10_IMAGE_BYTES:
        raise DatasetError(f'{images_path}: size {image_bytes} bytes is not a multiple of {STL10_IMAGE_BYTES}')
    n_images = image_bytes // STL10_IMAGE_BYTES

    labels = np.fromfile(labels_path, dtype=np.uint8)
    if labels.size != n_images:
        raise DatasetError(f'{labels_path}: expected {n_images} label bytes for {image_bytes} image bytes, '
                           f'found {labels.size}')
    if not filter_ids:
        return []

    if limit is not None:
        n_images = min(n_images, int(limit))
    raw = np.fromfile(images_path, dtype=np.uint8, count=n_images * STL10_IMAGE_BYTES)
    images = raw.reshape(n_images, 3, STL10_SIZE, STL10_SIZE).transpose(0, 3, 2, 1)  # [c][x][y] -> [y][x][c]

    samples = []
    for _idx in range(n_images):
        cls = int(labels[_idx])
        if cls in filter_ids:
            samples.append(Sample(image=np.ascontiguousarray(images[_idx]),
                                  label=int(cls == positive_id),
                                  source_class=cls))
    logger.info(f'{images_path}: {len(samples)} of {n_images} images kept, '
                f'{sum(_s.label for _s in samples)} positive')
    return samples


# -----   DATA REQUIREMENTS   -------
def validate_lemma_requirements(samples: Sequence[Sample],
                                min_ratio: float = 2.0,
                                min_neg_classes: int = 2) -> DataReport:
    """ Structural checks only: the positive class must share no features with the negatives,
        which cannot be verified from data, so only the presence of several negative source
        classes and enough negatives per positive are checked.  Never raises.
    """
    n_pos = sum(1 for _s in samples if _s.label == 1)
    n_neg = len(samples) - n_pos
    pos_classes = sorted({_s.source_class for _s in samples if _s.label == 1})
    neg_classes = sorted({_s.source_class for _s in samples if _s.label != 1})
    ratio = n_neg / n_pos if n_pos else float('inf')

    warnings = []
    if not samples:
        warnings.append('dataset is empty')
    if n_pos == 0:
        warnings.append('no positive samples')
    if n_neg == 0:
        warnings.append('no negative samples')
    if len(neg_classes) < min_neg_classes:
        warnings.append(f'{len(neg_classes)} negative source classes, need at least {min_neg_classes}')
    if n_pos and ratio < min_ratio:
        warnings.append(f'negative:positive ratio {ratio:.2f} below minimum {min_ratio:.2f}')

    for _w in warnings:
        logger.warning(f'data requirements: {_w}')
    return DataReport(n_pos, n_neg, pos_classes, neg_classes, ratio, warnings)


# -----   GLYPHS   -------
def _part_mask(shape: str, geom: tuple, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == 'rect':
        u0, v0, u1, v1 = geom
        return (u >= u0) & (u < u1) & (v >= v0) & (v < v1)
    if shape == 'disk':
        cu, cv, r = geom
        return (u - cu) ** 2 + (v - cv) ** 2 <= r ** 2
    if shape == 'ring':
        cu, cv, r_out, r_in = geom
        d2 = (u - cu) ** 2 + (v - cv) ** 2
        return (d2 <= r_out ** 2) & (d2 >= r_in ** 2)
    if shape == 'triangle':
        au, av, bu0, bv, bu1 = geom
        half = (v - av) / (bv - av) * (bu1 - bu0) / 2.0
        return (v >= av) & (v <= bv) & (np.abs(u - au) <= half)
    raise DatasetError(f'unknown glyph part shape "{shape}"')


def _part_extent(shape: str, geom: tuple) -> Tuple[float, float, float, float]:
    if shape == 'rect':
        return geom
    if shape == 'disk':
        cu, cv, r = geom
        return cu - r, cv - r, cu + r, cv + r
    if shape == 'ring':
        cu, cv, r_out, _ = geom
        return cu - r_out, cv - r_out, cu + r_out, cv + r_out
    au, av, bu0, bv, bu1 = geom
    return bu0, av, bu1, bv


def _glyph_parts(kind: str):
    try:
        return GLYPH_PARTS[kind]
    except KeyError:
        raise DatasetError(f'unknown glyph "{kind}", choose from {", ".join(GLYPH_PARTS)}')


def default_colors(kind: str) -> Dict[str, Tuple[int, int, int]]:
    return {_name: _color for _name, _, _, _color in _glyph_parts(kind)}


def jitter_colors(kind: str, rng: np.random.Generator, spread: int = 25) -> Dict[str, Tuple[int, ...]]:
    colors = {}
    for _name, _color in default_colors(kind).items():
        shifted = np.clip(np.asarray(_color) + rng.integers(-spread, spread + 1, size=3), 0, 255)
        colors[_name] = tuple(int(_c) for _c in shifted)
    return colors


def glyph_components(kind: str, box: Box) -> Dict[str, Box]:
    """ Pixel boxes of every glyph part when the glyph is drawn in box
    """
    width, height = box.xmax - box.xmin, box.ymax - box.ymin
    components = {}
    for _name, _shape, _geom, _ in _glyph_parts(kind):
        u0, v0, u1, v1 = _part_extent(_shape, _geom)
        components[_name] = Box(box.xmin + int(np.floor(u0 * width)), box.ymin + int(np.floor(v0 * height)),
                                box.xmin + int(np.ceil(u1 * width)), box.ymin + int(np.ceil(v1 * height)))
    return components


def render_glyph(canvas: np.ndarray, kind: str, box: Box,
                 colors: Optional[Dict[str, Sequence[int]]] = None) -> np.ndarray:
    """ Draw the glyph into canvas (in place) scaled to box; parts are sampled at pixel centres.
        Returns the boolean mask of painted pixels (canvas-sized).
    """
    colors = colors or default_colors(kind)
    height, width = canvas.shape[:2]
    x0, y0 = max(0, box.xmin), max(0, box.ymin)
    x1, y1 = min(width, box.xmax), min(height, box.ymax)

    ys, xs = np.mgrid[y0:y1, x0:x1]
    u = (xs + 0.5 - box.xmin) / (box.xmax - box.xmin)
    v = (ys + 0.5 - box.ymin) / (box.ymax - box.ymin)

    painted = np.zeros((height, width), dtype=bool)
    region = canvas[y0:y1, x0:x1]
    for _name, _shape, _geom, _ in _glyph_parts(kind):
        mask = _part_mask(_shape, _geom, u, v)
        region[mask] = np.asarray(colors[_name], dtype=np.uint8)
        painted[y0:y1, x0:x1] |= mask
    return painted


def glyph_template(kind: str, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """ Gray-level template (float64, size x size) and its glyph mask, default colors
    """
    canvas = new_image(size, size)
    mask = render_glyph(canvas, kind, Box(0, 0, size, size))
    return canvas.astype(np.float64) @ GRAY_WEIGHTS, mask


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """ Pearson correlation of two equally shaped arrays (optionally over mask); 0 when flat
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


def glyph_correlation(image: np.ndarray, kind: str, box: Box) -> float:
    """ Masked gray-level correlation between image[box] and the glyph template of the box size.
            Box must be square and inside the image.
    """
    size = box.xmax - box.xmin
    template, mask = glyph_template(kind, size)
    patch = image[box.ymin:box.ymax, box.xmin:box.xmax].astype(np.float64) @ GRAY_WEIGHTS
    return normalized_cross_correlation(patch, template, mask)


# -----   TEXTURES   -------
def _texture(source: SOURCE, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    if source == SOURCE.NOISE:
        mean = rng.uniform(60, 190, size=3)
        amplitude = rng.uniform(5, 35)
        pixels = mean + rng.uniform(-amplitude, amplitude, size=(height, width, 3))

    elif source == SOURCE.BLANK:
        pixels = rng.uniform(30, 220, size=3) + rng.uniform(-3, 3, size=(height, width, 3))

    elif source == SOURCE.STRIPES:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10)
        phase = rng.uniform(0, 2 * np.pi)
        c1, c2 = rng.uniform(20, 235, size=(2, 3))
        ys, xs = np.mgrid[0:height, 0:width]
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period + phase)
        pixels = c1 + (c2 - c1) * wave[..., np.newaxis]

    elif source == SOURCE.CHECKER:
        period = int(rng.integers(4, 9))
        c1, c2 = rng.uniform(20, 235, size=(2, 3))
        ys, xs = np.mgrid[0:height, 0:width]
        cells = ((xs // period + ys // period) % 2)[..., np.newaxis]
        pixels = np.where(cells == 1, c2, c1)
    else:
        raise DatasetError(f'no texture for source {source!r}')

    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def _background(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    source = SOURCE.NOISE if rng.uniform() < 0.7 else SOURCE.BLANK
    return _texture(source, width, height, rng)


def _random_glyph_box(rng: np.random.Generator, frame: int = SAMPLE_SIZE) -> Box:
    """ Object-centred placement: edge 70-95 % of the frame, anywhere it fits
    """
    size = int(rng.integers(int(0.7 * frame), int(0.95 * frame) + 1))
    x0 = int(rng.integers(0, frame - size + 1))
    y0 = int(rng.integers(0, frame - size + 1))
    return Box(x0, y0, x0 + size, y0 + size)


def generate_synthetic_dataset(seed: int, n_pos: int, n_neg: int,
                               glyph: str = 'wagon',
                               other_glyphs: Sequence[str] = ()) -> List[Sample]:
    """ n_pos glyph samples followed by n_neg negatives, deterministic from seed.
        Negatives cycle through the texture families (and other_glyphs drawn over a
        background, tagged OTHER_GLYPH) so every family is equally represented.
    """
    if n_pos < 0 or n_neg < 0:
        raise DatasetError(f'sample counts must be >= 0, got n_pos={n_pos} n_neg={n_neg}')
    _glyph_parts(glyph)
    for _other in other_glyphs:
        if _other == glyph:
            raise DatasetError(f'glyph "{glyph}" cannot be its own negative')
        _glyph_parts(_other)

    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_pos):
        image = _background(SAMPLE_SIZE, SAMPLE_SIZE, rng)
        box = _random_glyph_box(rng)
        render_glyph(image, glyph, box, jitter_colors(glyph, rng))
        samples.append(Sample(image, 1, POSITIVE_TAG, box))

    families = list(NEGATIVE_TEXTURES) + [SOURCE.OTHER_GLYPH] * bool(other_glyphs)
    for _idx in range(n_neg):
        family = families[_idx % len(families)]
        if family == SOURCE.OTHER_GLYPH:
            kind = other_glyphs[(_idx // len(families)) % len(other_glyphs)]
            image = _background(SAMPLE_SIZE, SAMPLE_SIZE, rng)
            render_glyph(image, kind, _random_glyph_box(rng), jitter_colors(kind, rng))
        else:
            image = _texture(family, SAMPLE_SIZE, SAMPLE_SIZE, rng)
        samples.append(Sample(image, 0, int(family)))
    return samples


def to_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """ float32 N x 3 x 96 x 96 in [0, 1] and int labels
    """
    images = np.stack([_s.image for _s in samples]) if samples else \
        np.zeros((0, SAMPLE_SIZE, SAMPLE_SIZE, 3), dtype=np.uint8)
    return to_unit_float(images), np.array([_s.label for _s in samples], dtype=np.int64)


# -----   SCENES   -------
def make_scene(spec: SceneSpec) -> Tuple[np.ndarray, Optional[Box]]:
    """ Background of spec.width x spec.height with spec.glyph planted at spec.box (None = blank
        scene) and any extra (glyph, box) plants.  Glyphs use their default colors.
        Returns (image, spec.box).
    """
    plants = ([(spec.glyph, spec.box)] if spec.box is not None else []) + list(spec.extra)
    for _kind, _box in plants:
        _glyph_parts(_kind)
        _box = Box(*_box)
        if _box.xmin < 0 or _box.ymin < 0 or _box.xmax > spec.width or _box.ymax > spec.height \
                or _box.xmin >= _box.xmax or _box.ymin >= _box.ymax:
            raise DatasetError(f'glyph box {tuple(_box)} out of bounds for {spec.width} x {spec.height} scene')

    rng = np.random.default_rng(spec.seed)
    image = _background(spec.width, spec.height, rng)
    for _kind, _box in plants:
        render_glyph(image, _kind, Box(*_box))
    return image, (Box(*spec.box) if spec.box is not None else None)


def random_scene_spec(seed: int, width: int, height: int, glyph_size: int,
                      glyph: str = 'wagon', blank: bool = False) -> SceneSpec:
    """ Scene with one glyph of glyph_size at a seeded position (or none when blank)
    """
    if blank:
        return SceneSpec(width, height, None, seed, glyph)
    if glyph_size > min(width, height):
        raise DatasetError(f'glyph size {glyph_size} does not fit a {width} x {height} scene')
    rng = np.random.default_rng([seed, glyph_size])
    x0 = int(rng.integers(0, width - glyph_size + 1))
    y0 = int(rng.integers(0, height - glyph_size + 1))
    return SceneSpec(width, height, Box(x0, y0, x0 + glyph_size, y0 + glyph_size), seed, glyph)
