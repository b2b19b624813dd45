"""
Negatives-to-Origin training of a DisCNN.

  With s^2 = ||z||^2 and p = 1 - exp(-s^2):
      loss(z, y) = -y * log(max(p, P_FLOOR)) + (1 - y) * (1 + lam) * s^2
  For y = 0, -log(1 - p) = s^2, so the negative branch is the cross-entropy term plus the
  lam-weighted pull of the output vector to the origin.  Positives are pushed away from it.
"""
import logging
import numpy as np

from typing import Callable, Dict, List, Optional, Sequence, Tuple
from collections import namedtuple

from .errors import ConfigError, DatasetError, NumericError
from .dataset import Sample, to_batch
from .discnn_model import DisCNNModel, output_module
from .tensor_engine import sgd_step, clip_by_global_norm

logger = logging.getLogger(__name__)
trainlog = logging.getLogger(__package__ + '.trainlog')

P_FLOOR = 1e-12
SCORE_CHUNK = 256

N2OConfig = namedtuple('N2OConfig', ['lam', 'lr', 'momentum', 'epochs', 'batch_size', 'seed', 'loss', 'clip_norm'],
                       defaults=(1.0, 0.01, 0.9, 30, 16, 0, 'n2o', 5.0))
EpochMetrics = namedtuple('EpochMetrics', ['loss', 'pos_mean', 'pos_max', 'neg_mean', 'neg_max', 'ratio'])


def check_n2o_config(config: N2OConfig) -> N2OConfig:
    if config.lam < 0:
        raise ConfigError(f'lam must be >= 0, got {config.lam}')
    if config.batch_size < 2:
        raise ConfigError(f'batch_size must be >= 2 for batch statistics, got {config.batch_size}')
    if config.epochs < 0:
        raise ConfigError(f'epochs must be >= 0, got {config.epochs}')
    if config.lr < 0:
        raise ConfigError(f'lr must be >= 0, got {config.lr}')
    if not 0 <= config.momentum < 1:
        raise ConfigError(f'momentum must be in [0, 1), got {config.momentum}')
    if config.clip_norm < 0:
        raise ConfigError(f'clip_norm must be >= 0, got {config.clip_norm}')
    if config.loss not in LOSS_VARIANTS:
        raise ConfigError(f'unknown loss "{config.loss}", choose from {", ".join(LOSS_VARIANTS)}')
    return config


# -----   LOSS   -------
def n2o_loss(z: np.ndarray, y: int, lam: float) -> Tuple[float, np.ndarray]:
    """ Loss and dLoss/dz for one output vector
    """
    z64 = np.asarray(z, dtype=np.float64)
    s2 = float(np.dot(z64, z64))
    if y:
        p = -np.expm1(-s2)
        if p <= P_FLOOR:
            return -np.log(P_FLOOR), np.zeros_like(z64)
        grad = -2.0 * np.exp(-s2) / p * z64
        loss = -np.log(p)
    else:
        grad = 2.0 * (1.0 + lam) * z64
        loss = (1.0 + lam) * s2
    return float(loss), grad


def n2o_batch_loss(z: np.ndarray, y: np.ndarray, lam: float) -> Tuple[float, np.ndarray]:
    """ Mean loss over an N x 16 batch and its gradient (already divided by N)
    """
    z64 = np.asarray(z, dtype=np.float64)
    positive = np.asarray(y) == 1
    s2 = np.sum(np.square(z64), axis=1)
    p = -np.expm1(-s2)
    p_safe = np.maximum(p, P_FLOOR)

    losses = np.where(positive, -np.log(p_safe), (1.0 + lam) * s2)
    coef = np.where(positive,
                    np.where(p > P_FLOOR, -2.0 * np.exp(-s2) / p_safe, 0.0),
                    2.0 * (1.0 + lam))
    n = max(1, z64.shape[0])
    return float(losses.sum() / n), coef[:, np.newaxis] * z64 / n


LOSS_VARIANTS: Dict[str, Callable[[np.ndarray, np.ndarray, float], Tuple[float, np.ndarray]]] = {
    'n2o': n2o_batch_loss,
}


# -----   METRICS   -------
def score_samples(model: DisCNNModel, samples: Sequence[Sample], chunk: int = SCORE_CHUNK) -> np.ndarray:
    """ Infer-mode output vectors (N x 16, float64) for samples, chunk at a time
    """
    outputs = []
    for _start in range(0, len(samples), chunk):
        x, _ = to_batch(samples[_start:_start + chunk])
        outputs.append(model.forward(x.astype(model.dtype, copy=False)).astype(np.float64))
    return np.concatenate(outputs) if outputs else np.zeros((0, 16))


def separation_ratio(pos_mean: float, neg_mean: float) -> float:
    """ neg_mean / pos_mean; inf when only pos_mean is 0, NaN when both are
    """
    if pos_mean > 0:
        return neg_mean / pos_mean
    return float('inf') if neg_mean > 0 else float('nan')


def separation_report(model: DisCNNModel, samples: Sequence[Sample], lam: float = 1.0) -> EpochMetrics:
    """ Infer-mode module statistics per label; loss is the n2o loss of the same outputs.
        ratio is separation_ratio(pos_mean, neg_mean).
    """
    outputs = score_samples(model, samples)
    labels = np.array([_s.label for _s in samples], dtype=np.int64)
    modules = output_module(outputs) if len(samples) else np.zeros(0)
    loss = n2o_batch_loss(outputs, labels, lam)[0] if len(samples) else 0.0

    pos, neg = modules[labels == 1], modules[labels != 1]
    pos_mean = float(pos.mean()) if pos.size else 0.0
    neg_mean = float(neg.mean()) if neg.size else 0.0
    ratio = separation_ratio(pos_mean, neg_mean)
    return EpochMetrics(loss=loss,
                        pos_mean=pos_mean, pos_max=float(pos.max()) if pos.size else 0.0,
                        neg_mean=neg_mean, neg_max=float(neg.max()) if neg.size else 0.0,
                        ratio=ratio)


def format_ratio(ratio: float) -> str:
    return 'undefined' if np.isnan(ratio) else f'{ratio:.6f}'


def format_metrics(epoch: int, metrics: EpochMetrics) -> str:
    return (f'epoch={epoch} loss={metrics.loss:.6f} '
            f'pos_mean={metrics.pos_mean:.6f} pos_max={metrics.pos_max:.6f} '
            f'neg_mean={metrics.neg_mean:.6f} neg_max={metrics.neg_max:.6f} '
            f'ratio={format_ratio(metrics.ratio)}')


# -----   TRAINER   -------
def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[_i:_i + batch_size] for _i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


class N2OTrainer:
    """ Single-writer training state: a private copy of the model plus SGD momentum.
        Shuffling for epoch k is drawn from default_rng((seed, k)), so a run is a pure
        function of (model, samples, config).
    """
    def __init__(self, model: DisCNNModel, config: N2OConfig = N2OConfig()):
        self.config = check_n2o_config(config)
        self.model = model.copy()
        self.velocity = None
        self.epoch = 0
        self._loss_fn = LOSS_VARIANTS[config.loss]

    def train_epoch(self, samples: Sequence[Sample]) -> EpochMetrics:
        cfg = self.config
        labels = {_s.label for _s in samples}
        if labels != {0, 1}:
            raise DatasetError(f'training needs positive and negative samples, found labels {sorted(labels)}')

        self.epoch += 1
        rng = np.random.default_rng((cfg.seed, self.epoch))
        model = self.model

        total_loss = 0.0
        for _batch in _minibatches(len(samples), cfg.batch_size, rng):
            x, y = to_batch([samples[_i] for _i in _batch])
            out, cache = model.forward_train(x.astype(model.dtype, copy=False))
            loss, dz = self._loss_fn(out, y, cfg.lam)
            if not np.isfinite(loss):
                raise NumericError(f'loss diverged in epoch {self.epoch}')

            grads = model.backward(dz.astype(model.dtype), cache)
            grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
            model.params, self.velocity = sgd_step(model.params, grads, cfg.lr, cfg.momentum, self.velocity)
            total_loss += loss * len(_batch)
            logger.debug(f'epoch {self.epoch} batch of {len(_batch)} loss={loss:.6f} grad_norm={norm:.4f}')

        report = separation_report(model, samples, cfg.lam)
        return report._replace(loss=total_loss / len(samples))


def train_epoch(model: DisCNNModel, samples: Sequence[Sample], config: N2OConfig = N2OConfig(),
                epoch: int = 0) -> Tuple[DisCNNModel, EpochMetrics]:
    """ One pass as epoch+1 of a run with fresh momentum; the input model is left untouched
    """
    trainer = N2OTrainer(model, config)
    trainer.epoch = epoch
    metrics = trainer.train_epoch(samples)
    return trainer.model, metrics


def train(model: DisCNNModel, samples: Sequence[Sample], config: N2OConfig = N2OConfig(),
          log_path: Optional[str] = None) -> Tuple[DisCNNModel, List[EpochMetrics]]:
    """ Run config.epochs epochs.  Each epoch's metrics line goes to the training log
        (log_path, message-only lines) and to the package logger at INFO.
    """
    trainer = N2OTrainer(model, config)
    handler = None
    if log_path:
        handler = logging.FileHandler(log_path, mode='w')
        handler.setFormatter(logging.Formatter('%(message)s'))
        trainlog.addHandler(handler)
        trainlog.setLevel(logging.INFO)

    history = []
    try:
        for _ in range(trainer.config.epochs):
            metrics = trainer.train_epoch(samples)
            history.append(metrics)
            trainlog.info(format_metrics(trainer.epoch, metrics))
    finally:
        if handler is not None:
            trainlog.removeHandler(handler)
            handler.close()
    return trainer.model, history
