""" Report figures: training curves, positive/negative module histograms and the
    sorted-patch strips produced by `discnn inspect`.
"""
import os
import numpy as np

from typing import Sequence

from matplotlib.figure import Figure
from matplotlib.backends.backend_pdf import PdfPages

from .image_io import crop, new_image, resize_bilinear
from .n2o_trainer import EpochMetrics

pltcolor_pos = 'firebrick'
pltcolor_neg = 'navy'
pltcolor_loss = 'dimgray'
pltcolor_thr = 'darkorange'
gridcolor = 'whitesmoke'

STRIP_TILE = 64
STRIP_GAP = 2


def write_figure(fig: Figure, path: str):
    """ .pdf through PdfPages (no creation date, so reruns give identical files), anything else via savefig
    """
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)

    if os.path.splitext(path)[1].lower() == '.pdf':
        with PdfPages(path, metadata={'CreationDate': None}) as pdfObj:
            pdfObj.savefig(fig)
    else:
        fig.savefig(path, metadata={'Software': None})


def plot_training(history: Sequence[EpochMetrics], path: str):
    epochs = np.arange(1, len(history) + 1)
    fig = Figure(figsize=(8, 6), dpi=100)
    ax0 = fig.add_subplot(211)
    ax1 = fig.add_subplot(212, sharex=ax0)

    ax0.plot(epochs, [_m.loss for _m in history], color=pltcolor_loss, label='loss')
    ax0.set_ylabel('mean n2o loss')
    ax0.set_title('DisCNN training')
    ax0.grid(color=gridcolor)
    ax0.legend(loc='upper right')

    ax1.plot(epochs, [_m.pos_mean for _m in history], color=pltcolor_pos, label='positive mean module')
    ax1.plot(epochs, [_m.neg_mean for _m in history], color=pltcolor_neg, label='negative mean module')
    ax1.plot(epochs, [_m.neg_max for _m in history], color=pltcolor_neg, linestyle=':', label='negative max module')
    ax1.set_xlabel('epoch')
    ax1.set_ylabel('module')
    ax1.grid(color=gridcolor)
    ax1.legend(loc='upper left')

    write_figure(fig, path)


def plot_module_histogram(pos_modules: np.ndarray, neg_modules: np.ndarray, thr: float, path: str):
    """ Overlaid histograms of positive and negative modules with the threshold marked
    """
    fig = Figure(figsize=(8, 4), dpi=100)
    ax0 = fig.add_subplot(111)

    top = max([thr] + [float(np.max(_m)) for _m in (pos_modules, neg_modules) if len(_m)])
    bins = np.linspace(0.0, top * 1.05 if top > 0 else 1.0, 41)
    ax0.hist(neg_modules, bins=bins, color=pltcolor_neg, alpha=0.6, label=f'negatives ({len(neg_modules)})')
    ax0.hist(pos_modules, bins=bins, color=pltcolor_pos, alpha=0.6, label=f'positives ({len(pos_modules)})')
    ax0.axvline(thr, color=pltcolor_thr, linestyle='--', label=f'thr {thr:.3f}')

    ax0.set_xlabel('module')
    ax0.set_ylabel('samples')
    ax0.set_title('output module by label')
    ax0.legend(loc='upper right')
    write_figure(fig, path)


def compose_strip(image: np.ndarray, boxes: Sequence, tile: int = STRIP_TILE, gap: int = STRIP_GAP) -> np.ndarray:
    """ Crops of image at boxes, resized to tile x tile, laid left to right on a white strip
    """
    count = max(1, len(boxes))
    strip = new_image(count * tile + (count - 1) * gap, tile, color=(255, 255, 255))
    for _idx, _box in enumerate(boxes):
        x0 = _idx * (tile + gap)
        strip[:, x0:x0 + tile] = resize_bilinear(crop(image, _box), tile)
    return strip
