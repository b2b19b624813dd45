"""
Image plumbing: PPM/PNG files, bilinear resizing to the network input size, box rendering.

  An image is an H x W x 3 uint8 ndarray; x = column, y = row, origin top-left.
  A Box is half-open: pixels xmin <= x < xmax, ymin <= y < ymax.
"""
import os
import logging
import numpy as np

from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple, Union
from collections import namedtuple

from .errors import ImageFormatError

logger = logging.getLogger(__name__)

Box = namedtuple('Box', ['xmin', 'ymin', 'xmax', 'ymax'])

PPM_MAGIC = b'P6'
PPM_MAXVAL = 255
DEFAULT_BOX_COLOR = (255, 0, 0)


def new_image(width: int, height: int, color: Sequence[int] = (0, 0, 0)) -> np.ndarray:
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[...] = np.asarray(color, dtype=np.uint8)
    return image


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f'expected H x W x 3 uint8 image, got {image.shape} {image.dtype}')
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ImageFormatError(f'empty image {image.shape}')
    return image


def box_center(box: Box) -> Tuple[float, float]:
    return (box.xmin + box.xmax) / 2.0, (box.ymin + box.ymax) / 2.0


def box_area(box: Box) -> int:
    return max(0, box.xmax - box.xmin) * max(0, box.ymax - box.ymin)


def clamp_box(box: Box, width: int, height: int) -> Optional[Box]:
    """ Intersect box with the image rectangle, None when nothing is left
    """
    clamped = Box(max(0, box.xmin), max(0, box.ymin), min(width, box.xmax), min(height, box.ymax))
    if clamped.xmin >= clamped.xmax or clamped.ymin >= clamped.ymax:
        return None
    return clamped


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    return image[box.ymin:box.ymax, box.xmin:box.xmax]


def to_unit_float(images: np.ndarray) -> np.ndarray:
    """ uint8 (..., H, W, 3) -> float32 (..., 3, H, W) scaled to [0, 1]
    """
    return np.moveaxis(images, -1, -3).astype(np.float32) / np.float32(255.0)


# -----   PPM / PNG   -------
def _ppm_header(data: bytes, path: str) -> Tuple[list, int]:
    """ Returns the 4 header tokens (magic, width, height, maxval) and the pixel offset.
        '#' starts a comment running to end of line; one whitespace byte follows maxval.
    """
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageFormatError(f'{path}: truncated PPM header')
        ch = data[pos:pos + 1]
        if ch == b'#':
            eol = data.find(b'\n', pos)
            if eol < 0:
                raise ImageFormatError(f'{path}: truncated PPM header')
            pos = eol + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
                pos += 1
            tokens.append(data[start:pos])
            if len(tokens) == 1 and tokens[0] != PPM_MAGIC:
                raise ImageFormatError(f'{path}: not a binary PPM (P6) file')

    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f'{path}: malformed PPM header')
    return tokens, pos + 1


def read_ppm(path: str) -> np.ndarray:
    with open(path, 'rb') as rfp:
        data = rfp.read()

    tokens, offset = _ppm_header(data, path)
    try:
        width, height, maxval = [int(_t) for _t in tokens[1:]]
    except ValueError:
        raise ImageFormatError(f'{path}: malformed PPM header {tokens[1:]}')

    if width < 1 or height < 1:
        raise ImageFormatError(f'{path}: bad PPM size {width} x {height}')
    if maxval != PPM_MAXVAL:
        raise ImageFormatError(f'{path}: PPM maxval {maxval} unsupported, need {PPM_MAXVAL}')

    nbytes = width * height * 3
    if len(data) - offset < nbytes:
        raise ImageFormatError(f'{path}: truncated pixel data, expected {nbytes} bytes, '
                               f'found {len(data) - offset}')
    pixels = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
    return pixels.reshape(height, width, 3).copy()


def write_ppm(image: np.ndarray, path: str):
    check_image(image)
    height, width = image.shape[:2]
    with open(path, 'wb') as wfp:
        wfp.write(f'P6\n{width} {height}\n{PPM_MAXVAL}\n'.encode('ascii'))
        wfp.write(np.ascontiguousarray(image).tobytes())


def read_png(path: str) -> np.ndarray:
    import matplotlib.image as mpimg

    try:
        pixels = mpimg.imread(path, format='png')
    except (OSError, ValueError, SyntaxError) as err:
        raise ImageFormatError(f'{path}: unreadable PNG ({err})')

    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    pixels = pixels[..., :3]
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.ascontiguousarray(pixels)


def write_png(image: np.ndarray, path: str):
    import matplotlib.image as mpimg

    check_image(image)
    mpimg.imsave(path, image, format='png')


def load_image(path: str) -> np.ndarray:
    suffix = os.path.splitext(path)[1].lower()
    if suffix == '.ppm':
        return read_ppm(path)
    if suffix == '.png':
        return read_png(path)
    raise ImageFormatError(f'{path}: unsupported image type "{suffix}", use .ppm or .png')


def save_image(image: np.ndarray, path: str):
    suffix = os.path.splitext(path)[1].lower()
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)

    if suffix == '.ppm':
        write_ppm(image, path)
    elif suffix == '.png':
        write_png(image, path)
    else:
        raise ImageFormatError(f'{path}: unsupported image type "{suffix}", use .ppm or .png')


# -----   RESIZE   -------
@lru_cache(maxsize=256)
def _sample_grid(n_src: int, n_dst: int):
    """ Corner-aligned source coordinates: dst 0 -> src 0, dst n_dst-1 -> src n_src-1.
        Returns (lo index, hi index, fraction) arrays.
    """
    if n_dst == 1:
        coords = np.array([(n_src - 1) / 2.0])
    else:
        coords = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.minimum(np.floor(coords).astype(np.intp), n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, target: Union[int, Tuple[int, int]]) -> np.ndarray:
    """ Bilinear resize to target (n -> n x n, or (height, width)).
        uint8 input is rounded to nearest and returned as uint8.
    """
    th, tw = (target, target) if isinstance(target, (int, np.integer)) else target
    src = np.asarray(image)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., np.newaxis]
    h, w = src.shape[:2]

    if (h, w) == (th, tw):
        out = src.copy()
    else:
        y0, y1, fy = _sample_grid(h, th)
        x0, x1, fx = _sample_grid(w, tw)
        f = src.astype(np.float64)
        wy = fy[:, np.newaxis, np.newaxis]
        wx = fx[np.newaxis, :, np.newaxis]

        top = f[y0[:, None], x0[None, :]] * (1.0 - wx) + f[y0[:, None], x1[None, :]] * wx
        bottom = f[y1[:, None], x0[None, :]] * (1.0 - wx) + f[y1[:, None], x1[None, :]] * wx
        out = top * (1.0 - wy) + bottom * wy

        if src.dtype == np.uint8:
            out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        else:
            out = out.astype(src.dtype)

    return out[..., 0] if squeeze else out


# -----   ANNOTATION   -------
def draw_boxes(image: np.ndarray, boxes: Iterable[Box],
               color: Sequence[int] = DEFAULT_BOX_COLOR, thickness: int = 2) -> np.ndarray:
    """ Paint the border band (thickness px, inside the box) of every box onto a copy of image.
        Parts of a box outside the image are skipped; interiors are untouched.
    """
    out = image.copy()
    height, width = out.shape[:2]
    paint = np.asarray(color, dtype=out.dtype)

    for _box in boxes:
        outer = clamp_box(Box(*_box), width, height)
        if outer is None:
            continue
        mask = np.zeros((height, width), dtype=bool)
        mask[outer.ymin:outer.ymax, outer.xmin:outer.xmax] = True

        inner = clamp_box(Box(_box[0] + thickness, _box[1] + thickness,
                              _box[2] - thickness, _box[3] - thickness), width, height)
        if inner is not None:
            mask[inner.ymin:inner.ymax, inner.xmin:inner.xmax] = False
        out[mask] = paint
    return out
