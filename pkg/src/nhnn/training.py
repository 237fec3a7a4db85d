"""Mini-batch Adam training with validation-loss early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import neural as nn
from .dataio import Corpus, fit_norm_stats
from .dcnn import (Architecture, DcnnModel, MtlCnnModel, PaddedFrames,
                   batch_loss, init_aux_params, init_params, loss_and_grads)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    patience: int = 5
    max_epochs: int = 50
    validation_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def split_train_val(n: int, fraction: float, rng: np.random.Generator):
    """Random train/validation index split; validation gets ``round(n * fraction)``."""
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(n * fraction))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_early_stopping(params: dict, dilations, data: PaddedFrames, labels, trainable,
                       config: TrainingConfig, seed: int, start: str = "frames",
                       aux_labels=None, aux_weight: float = 1.0):
    """Train ``params`` in place and return ``(best_params, log)``.

    A ``validation_fraction`` share of the examples is held out at random.
    Training stops once the validation loss has not improved for
    ``patience`` epochs; the parameters from the best epoch are returned.
    Only names in ``trainable`` are updated.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("need at least 2 training examples")
    rng_split = np.random.default_rng([seed, 1])
    rng_shuffle = np.random.default_rng([seed, 2])
    train_idx, val_idx = split_train_val(n, config.validation_fraction, rng_split)
    trainable = frozenset(trainable)
    opt = nn.Adam(learning_rate=config.learning_rate)

    # early stopping always monitors the main-task loss
    def val_loss():
        total = 0.0
        for lo in range(0, len(val_idx), 256):
            idx = val_idx[lo:lo + 256]
            x, lengths = data.take(idx)
            total += batch_loss(params, dilations, x, lengths, labels[idx], start) * len(idx)
        return total / len(val_idx)

    best = {k: v.copy() for k, v in params.items()}
    best_loss = val_loss()
    log = {"epochs": [], "initial_val_loss": best_loss, "best_epoch": 0,
           "n_train": int(len(train_idx)), "n_val": int(len(val_idx))}
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng_shuffle.permutation(train_idx)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x, lengths = data.take(idx)
            aux = None if aux_labels is None else aux_labels[idx]
            loss, grads = loss_and_grads(params, dilations, x, lengths, labels[idx], trainable,
                                         start, aux, aux_weight)
            opt.step(params, grads)
            losses.append(loss * len(idx))
        vl = val_loss()
        log["epochs"].append({"epoch": epoch, "train_loss": float(sum(losses) / len(order)),
                              "val_loss": float(vl)})
        if vl < best_loss:
            best_loss = vl
            best = {k: v.copy() for k, v in params.items()}
            log["best_epoch"] = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    log["best_val_loss"] = float(best_loss)
    log["stopped_epoch"] = log["epochs"][-1]["epoch"]
    return best, log


def train_base_dcnn(corpus: Corpus, config: TrainingConfig = TrainingConfig(),
                    arch: Architecture | None = None):
    """Train the dilated CNN on every labelled utterance of ``corpus``.

    Framed features are z-normalized with statistics fitted on ``corpus``.
    Returns ``(model, log)``.
    """
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    labels = corpus.labels
    if len(np.unique(labels)) < 2:
        logger.warning("training corpus %s contains a single class", corpus.name)
    arch = arch or Architecture(n_mel=corpus.utterances[0].n_mel)
    stats = fit_norm_stats(corpus.utterances)
    model = DcnnModel.initialize(arch, config.seed, stats)
    data = model.prepare(corpus.utterances)
    best, log = fit_early_stopping(model.params, arch.dilations, data, labels,
                                   model.params.keys(), config, config.seed)
    model.params = best
    return model, log


def train_mtl_cnn(corpus: Corpus, aux_attr: str = "gender",
                  config: TrainingConfig = TrainingConfig(),
                  arch: Architecture | None = None, aux_weight: float = 1.0):
    """Valence classifier with an auxiliary attribute-classification stack.

    Loss is ``CE_valence + aux_weight * CE_aux``; early stopping monitors the
    valence loss on the validation split. Returns ``(model, log)``.
    """
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    missing = [u.id for u in corpus.utterances if aux_attr not in u.attrs]
    if missing:
        raise ValueError(f"{len(missing)} utterances lack attribute {aux_attr!r}")
    labels = corpus.labels
    values = tuple(sorted({u.attrs[aux_attr] for u in corpus.utterances}))
    aux_labels = np.array([values.index(u.attrs[aux_attr]) for u in corpus.utterances])
    arch = arch or Architecture(n_mel=corpus.utterances[0].n_mel)
    stats = fit_norm_stats(corpus.utterances)

    params = init_params(arch, np.random.default_rng([config.seed, 0]))
    params.update(init_aux_params(arch, len(values), np.random.default_rng([config.seed, 3])))
    model = MtlCnnModel(arch, params, stats, aux_attr=aux_attr, aux_values=values)
    data = model.prepare(corpus.utterances)
    best, log = fit_early_stopping(model.params, arch.dilations, data, labels,
                                   model.params.keys(), config, config.seed,
                                   aux_labels=aux_labels, aux_weight=aux_weight)
    model.params = best
    return model, log
