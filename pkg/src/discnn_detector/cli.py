"""
DisCNN Detector command line.
  Train a one-positive-class DisCNN and localize its class in large images by multi-scale
  sliding windows.

  Commands:
    train               : dataset (synthetic glyphs or STL-10 binaries) -> checkpoint + training log
    detect              : checkpoint + image -> JSON clusters + annotated image
    detect-multi        : class registry (ini) + image -> multi-class JSON + annotated image
    inspect             : checkpoint + image + fixed sws list -> strips of patches sorted by module
    eval                : checkpoint + scene directory (truth.json) -> IoU table and hit rate
    calibrate-threshold : checkpoint + labeled validation samples -> suggested thr
    scenes              : write seeded synthetic scenes and truth.json for eval

  Any flag may instead come from the [discnn] section of --config <ini>; flags win.
"""
import os
import sys
import json
import logging
import numpy as np
from configparser import RawConfigParser, Error as ConfigParserError

from discnn_detector import __version__
from discnn_detector.errors import ConfigError, DatasetError, DisCNNError
from discnn_detector.image_io import Box, draw_boxes, load_image, save_image
from discnn_detector.dataset import (STL10_CLASSES, GLYPH_PARTS, generate_synthetic_dataset,
                                     load_stl10_split, make_scene, random_scene_spec,
                                     validate_lemma_requirements)
from discnn_detector.discnn_model import build_discnn, load_model, output_module, save_model
from discnn_detector.n2o_trainer import N2OConfig, format_metrics, score_samples, train
from discnn_detector.detector import (DETECT_KEYS, DetectConfig, calibrate_threshold, detect,
                                      detection_document, inspect_scales, iou, parse_sws_range,
                                      record_box)
from discnn_detector.orchestrator import detect_multi, load_registry, multi_document
from discnn_detector.plot_report import compose_strip, plot_module_histogram, plot_training

logger = logging.getLogger(__name__)

CONFIG_SECTION = 'discnn'
TRUTH_FILE = 'truth.json'
DEFAULT_STL_CLASSES = 'car,bird,cat,deer,dog,horse,monkey'
CLASS_COLORS = [(255, 0, 0), (0, 200, 0), (0, 80, 255), (255, 200, 0), (255, 0, 255), (0, 220, 220)]
EXIT_OK, EXIT_ERROR = 0, 1


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ('1', 'yes', 'true', 'on'):
        return True
    if value in ('0', 'no', 'false', 'off'):
        return False
    raise ValueError(f'not a boolean: "{text}"')


# [discnn] key -> parser
CONFIG_KEYS = {'seed': int, 'synthetic': _bool, 'n_pos': int, 'n_neg': int, 'glyph': str,
               'negative_glyphs': str, 'stl_images': str, 'stl_labels': str, 'positive_class': str,
               'classes': str, 'limit': int,
               'lam': float, 'lr': float, 'momentum': float, 'epochs': int, 'batch_size': int,
               'clip_norm': float,
               **dict(DETECT_KEYS),
               'checkpoint': str, 'train_log': str}

DEFAULTS = {'seed': 0, 'synthetic': False, 'n_pos': 64, 'n_neg': 128, 'glyph': 'wagon',
            'negative_glyphs': '', 'classes': DEFAULT_STL_CLASSES, **N2OConfig()._asdict()}


def load_run_config(path: str) -> dict:
    """ Parsed [discnn] values of an ini file; unknown keys are an error
    """
    parser = RawConfigParser()
    try:
        with open(path) as rfp:
            parser.read_file(rfp)
    except ConfigParserError as err:
        raise ConfigError(f'{path}: {err}')

    if not parser.has_section(CONFIG_SECTION):
        raise ConfigError(f'{path}: missing [{CONFIG_SECTION}] section')
    unknown = sorted(set(parser[CONFIG_SECTION]) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f'{path}: unknown keys {", ".join(unknown)}')

    settings = {}
    for _key, _raw in parser[CONFIG_SECTION].items():
        try:
            settings[_key] = CONFIG_KEYS[_key](_raw.strip())
        except ValueError as err:
            raise ConfigError(f'{path}: {_key} = "{_raw}": {err}')
    return settings


def _apply_settings(args, settings: dict):
    """ Config values fill only the flags the running command defines and were not given
    """
    for _key, _value in settings.items():
        if not hasattr(args, _key):
            continue
        current = getattr(args, _key, None)
        if current is None or current is False:
            setattr(args, _key, _value)
    for _key, _value in DEFAULTS.items():
        if getattr(args, _key, None) is None:
            setattr(args, _key, _value)


def _setup_logging(verbose: bool):
    root = logging.getLogger()
    for _h in [_h for _h in root.handlers if getattr(_h, '_discnn_console', False)]:
        root.removeHandler(_h)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter('%(asctime)s %(message)s', "%Y-%m-%d %H:%M"))
    sh._discnn_console = True
    root.addHandler(sh)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _require(args, *keys):
    missing = [_k for _k in keys if getattr(args, _k, None) in (None, '')]
    if missing:
        raise ConfigError('missing ' + ', '.join(f'--{_k.replace("_", "-")}' for _k in missing))


def _detect_config(args) -> DetectConfig:
    _require(args, 'thr')
    fields = {_k: getattr(args, _k) for _k, _ in DETECT_KEYS if getattr(args, _k, None) is not None}
    return DetectConfig(**fields)


def _n2o_config(args) -> N2OConfig:
    return N2OConfig(**{_k: getattr(args, _k) for _k in N2OConfig._fields})


def _split(text: str):
    return [_t.strip() for _t in text.split(',') if _t.strip()]


def _load_samples(args):
    if args.synthetic:
        return generate_synthetic_dataset(args.seed, args.n_pos, args.n_neg, args.glyph,
                                          _split(args.negative_glyphs))
    _require(args, 'stl_images', 'stl_labels', 'positive_class')
    return load_stl10_split(args.stl_images, args.stl_labels, _split(args.classes),
                            args.positive_class, args.limit)


def _write_json(doc: dict, path: str):
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, 'w') as wfp:
        json.dump(doc, wfp, indent=2)
        wfp.write('\n')


def load_truth(scenes_dir: str):
    """ (image name, Box or None) per entry of <scenes_dir>/truth.json
    """
    path = os.path.join(scenes_dir, TRUTH_FILE)
    with open(path) as rfp:
        try:
            truth = json.load(rfp)
        except json.JSONDecodeError as err:
            raise DatasetError(f'{path}: not valid JSON ({err})')

    entries = []
    try:
        for _entry in truth['scenes']:
            box = _entry['box']
            entries.append((str(_entry['image']), None if box is None else Box(*(int(_v) for _v in box))))
    except KeyError as err:
        raise DatasetError(f'{path}: missing key {err}')
    except (TypeError, ValueError) as err:
        raise DatasetError(f'{path}: malformed scene entry ({err})')
    return entries


def _derived_path(image_path: str, tag: str, suffix: str = None) -> str:
    stem, ext = os.path.splitext(image_path)
    return f'{stem}{tag}{suffix or ext}'


# -----   COMMANDS   -------
def cmd_train(args) -> int:
    _require(args, 'checkpoint')
    config = _n2o_config(args)
    samples = _load_samples(args)
    report = validate_lemma_requirements(samples)
    print(f'samples {report.n_pos} positive / {report.n_neg} negative, '
          f'{len(report.neg_classes)} negative classes')

    log_path = args.train_log or _derived_path(args.checkpoint, '', '.log')
    model, history = train(build_discnn(args.seed), samples, config, log_path)
    save_model(model, args.checkpoint)

    if history:
        print(format_metrics(len(history), history[-1]))
    if args.plot:
        plot_training(history, args.plot)
    print(f'checkpoint {args.checkpoint}  log {log_path}')
    return EXIT_OK


def cmd_detect(args) -> int:
    config = _detect_config(args)
    model = load_model(args.model)
    image = load_image(args.image)

    clusters = detect(image, model, config)
    doc = detection_document(os.path.basename(args.image), config, clusters)
    out = args.out or _derived_path(args.image, '', '.json')
    _write_json(doc, out)

    annotated = args.annotated or _derived_path(args.image, '_detect')
    save_image(draw_boxes(image, [_c.box for _c in clusters]), annotated)

    for _idx, _c in enumerate(clusters):
        print(f'  [{_idx:>2d}] box {tuple(_c.box)}  members {_c.count:>4d}  max module {_c.max_module:.4f}')
    print(f'{len(clusters)} clusters -> {out}, {annotated}')
    return EXIT_OK


def cmd_detect_multi(args) -> int:
    registry = load_registry(args.registry)
    image = load_image(args.image)

    results = detect_multi(image, registry, args.parallelism)
    doc = multi_document(os.path.basename(args.image), registry, results)
    out = args.out or _derived_path(args.image, '_multi', '.json')
    _write_json(doc, out)

    annotated = image
    for _idx, (_name, _result) in enumerate(results.items()):
        color = CLASS_COLORS[_idx % len(CLASS_COLORS)]
        annotated = draw_boxes(annotated, [_c.box for _c in _result.clusters], color)
        status = _result.error or f'{len(_result.clusters)} clusters'
        print(f'  {_name:<16} {status}')
    annotated_path = args.annotated or _derived_path(args.image, '_multi')
    save_image(annotated, annotated_path)

    print(f'{len(results)} classes -> {out}, {annotated_path}')
    return EXIT_ERROR if any(_r.error for _r in results.values()) else EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    image = load_image(args.image)
    try:
        sws_list = [int(_s) for _s in _split(args.sws)]
    except ValueError:
        raise ConfigError(f'--sws "{args.sws}" must be a comma separated list of integers')

    ranked = inspect_scales(model, image, sws_list, args.top, args.batch_cap or 512, args.stride_div or 3)
    stem, ext = os.path.splitext(args.out or _derived_path(args.image, '_inspect', '.png'))
    for _sws, _records in ranked.items():
        path = f'{stem}_sws{_sws}{ext or ".png"}'
        save_image(compose_strip(image, [record_box(_r) for _r in _records]), path)
        modules = ' '.join(f'{_r.module:.3f}' for _r in _records)
        print(f'sws {_sws:>4d}: {modules}  -> {path}')
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    samples = _load_samples(args)
    thr = calibrate_threshold(model, samples)

    if args.plot:
        modules = output_module(score_samples(model, samples))
        labels = np.array([_s.label for _s in samples])
        plot_module_histogram(modules[labels == 1], modules[labels != 1], thr, args.plot)
    print(f'thr = {thr:.6f}')
    return EXIT_OK


def cmd_scenes(args) -> int:
    _require(args, 'out')
    if args.glyph not in GLYPH_PARTS:
        raise ConfigError(f'unknown glyph "{args.glyph}"')

    entries = []
    for _idx in range(args.count + args.blank):
        blank = _idx >= args.count
        spec = random_scene_spec(args.seed + _idx, args.width, args.height, args.glyph_size, args.glyph, blank)
        image, box = make_scene(spec)
        name = f'{"blank" if blank else "scene"}_{_idx:03d}.ppm'
        save_image(image, os.path.join(args.out, name))
        entries.append({'image': name, 'box': list(box) if box else None, 'glyph': args.glyph})

    _write_json({'scenes': entries}, os.path.join(args.out, TRUTH_FILE))
    print(f'{args.count} planted + {args.blank} blank scenes -> {args.out}')
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _detect_config(args)
    model = load_model(args.model)
    truth = load_truth(args.scenes)

    rows = []
    print(f'{"image":<20} {"clusters":>8} {"best IoU":>9}  hit')
    for _name, _gt in truth:
        image = load_image(os.path.join(args.scenes, _name))
        clusters = detect(image, model, config)
        if _gt is None:
            best, hit = None, not clusters
        else:
            best = max((iou(_c.box, _gt) for _c in clusters), default=0.0)
            hit = len(clusters) == 1 and best >= 0.5
        rows.append({'image': _name, 'clusters': len(clusters), 'best_iou': best, 'hit': hit})
        iou_text = '-' if best is None else f'{best:.3f}'
        print(f'{_name:<20} {len(clusters):>8d} {iou_text:>9}  {"yes" if hit else "no"}')

    hits = sum(_r['hit'] for _r in rows)
    print(f'hit rate {hits}/{len(rows)}')
    if args.out:
        _write_json({'config': detection_document('', config, [])['config'], 'scenes': rows,
                     'hits': hits, 'total': len(rows)}, args.out)
    return EXIT_OK


# -----   ARGUMENTS   -------
def _add_detect_flags(parser):
    parser.add_argument('--thr', type=float, help='module threshold, patches with module > thr are positive')
    parser.add_argument('--min-sws', dest='min_sws', type=int, help='smallest window size (default 40)')
    parser.add_argument('--sws-range', dest='sws_range', type=parse_sws_range,
                        help='hi,lo  scan windows hi down to (excluding) lo instead of min(l,m)..min_sws')
    parser.add_argument('--link-distance', dest='link_distance', type=float,
                        help='centre distance linking two patches (default min_sws)')
    parser.add_argument('--batch-cap', dest='batch_cap', type=int, help='patches scored per batch (default 512)')
    parser.add_argument('--stride-div', dest='stride_div', type=int, help='stride = sws // stride_div (default 3)')
    parser.add_argument('--wa-div', dest='wa_div', type=int, help='wa = sws // wa_div (default 20)')
    parser.add_argument('--workers', type=int, help='threads scanning scales (default 1)')


def _add_data_flags(parser):
    parser.add_argument('--synthetic', action='store_true', default=None, help='use generated glyph samples')
    parser.add_argument('--seed', type=int, help='seed for data, initialization and shuffling')
    parser.add_argument('--n-pos', dest='n_pos', type=int, help='synthetic positives (default 64)')
    parser.add_argument('--n-neg', dest='n_neg', type=int, help='synthetic negatives (default 128)')
    parser.add_argument('--glyph', help=f'positive glyph: {", ".join(GLYPH_PARTS)}')
    parser.add_argument('--negative-glyphs', dest='negative_glyphs', help='other glyphs used as negatives')
    parser.add_argument('--stl-images', dest='stl_images', help='STL-10 *_X.bin')
    parser.add_argument('--stl-labels', dest='stl_labels', help='STL-10 *_y.bin')
    parser.add_argument('--positive-class', dest='positive_class', help=f'one of {", ".join(STL10_CLASSES)}')
    parser.add_argument('--classes', help=f'STL-10 classes kept (default {DEFAULT_STL_CLASSES})')
    parser.add_argument('--limit', type=int, help='read only the first N STL-10 images')


def build_parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='ini file with a [discnn] section')
    common.add_argument('-v', '--verbose', action='store_true', default=False, help='debug logging')

    parser = argparse.ArgumentParser(prog='discnn',
                                     description='  \033[32mDisCNN: train a one-positive-class CNN and localize\n'
                                                 '  positives with multi-scale sliding windows\n'
                                                 '\033[37m\n',
                                     formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument('--version', action='version', version=f'Version: {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('train', parents=[common], help='train a DisCNN with the n2o loss')
    _add_data_flags(p)
    p.add_argument('--lam', type=float, help='extra origin pull on negatives (default 1.0)')
    p.add_argument('--lr', type=float, help='learning rate (default 0.01)')
    p.add_argument('--momentum', type=float, help='SGD momentum (default 0.9)')
    p.add_argument('--epochs', type=int, help='epochs (default 30)')
    p.add_argument('--batch-size', dest='batch_size', type=int, help='mini-batch size (default 16)')
    p.add_argument('--clip-norm', dest='clip_norm', type=float, help='global gradient norm cap, 0 = off (default 5)')
    p.add_argument('--out', '--checkpoint', dest='checkpoint', help='checkpoint path')
    p.add_argument('--log', '--train-log', dest='train_log', help='training log (default <checkpoint>.log)')
    p.add_argument('--plot', help='training curves (.pdf / .png)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('detect', parents=[common], help='detect positives in one image')
    p.add_argument('--model', required=True, help='checkpoint')
    p.add_argument('--image', required=True, help='.ppm / .png image')
    _add_detect_flags(p)
    p.add_argument('--out', help='JSON result (default <image>.json)')
    p.add_argument('--annotated', help='annotated image (default <image>_detect.<ext>)')
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('detect-multi', parents=[common], help='one DisCNN per class over one image')
    p.add_argument('--registry', required=True, help='ini file, one [class] section each')
    p.add_argument('--image', required=True, help='.ppm / .png image')
    p.add_argument('--parallelism', type=int, default=1, help='worker processes (default 1)')
    p.add_argument('--out', help='JSON result (default <image>_multi.json)')
    p.add_argument('--annotated', help='annotated image (default <image>_multi.<ext>)')
    p.set_defaults(func=cmd_detect_multi)

    p = sub.add_parser('inspect', parents=[common], help='patches at fixed window sizes sorted by module')
    p.add_argument('--model', required=True, help='checkpoint')
    p.add_argument('--image', required=True, help='.ppm / .png image')
    p.add_argument('--sws', required=True, help='comma separated window sizes, e.g. 280,180,50')
    p.add_argument('--top', type=int, default=8, help='patches per strip (default 8)')
    p.add_argument('--batch-cap', dest='batch_cap', type=int, help='patches scored per batch (default 512)')
    p.add_argument('--stride-div', dest='stride_div', type=int, help='stride = sws // stride_div (default 3)')
    p.add_argument('--out', help='strip path prefix, _sws<N> is appended (default <image>_inspect.png)')
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser('eval', parents=[common], help='IoU and hit rate over a scene directory')
    p.add_argument('--model', required=True, help='checkpoint')
    p.add_argument('--scenes', required=True, help=f'directory holding the images and {TRUTH_FILE}')
    _add_detect_flags(p)
    p.add_argument('--out', help='JSON report')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('calibrate-threshold', parents=[common], help='suggest thr from labeled samples')
    p.add_argument('--model', required=True, help='checkpoint')
    _add_data_flags(p)
    p.add_argument('--plot', help='module histogram (.pdf / .png)')
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser('scenes', parents=[common], help='write synthetic scenes and truth.json')
    p.add_argument('--out', help='output directory')
    p.add_argument('--seed', type=int, help='first scene seed (default 0)')
    p.add_argument('--count', type=int, default=20, help='scenes with a planted glyph (default 20)')
    p.add_argument('--blank', type=int, default=20, help='scenes without glyph (default 20)')
    p.add_argument('--width', type=int, default=512, help='scene width (default 512)')
    p.add_argument('--height', type=int, default=512, help='scene height (default 512)')
    p.add_argument('--glyph-size', dest='glyph_size', type=int, default=64, help='glyph edge (default 64)')
    p.add_argument('--glyph', help='planted glyph (default wagon)')
    p.set_defaults(func=cmd_scenes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)

    try:
        settings = load_run_config(args.config) if args.config else {}
        _apply_settings(args, settings)
        return args.func(args)

    except DisCNNError as err:
        print(f'error: {err}', file=sys.stderr)
    except OSError as err:
        where = f'{err.filename}: ' if err.filename else ''
        print(f'error: {where}{err.strerror or err}', file=sys.stderr)
    return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
