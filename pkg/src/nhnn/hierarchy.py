"""Nonparametric hierarchical network: shared encoder, per-cluster heads.

Pipeline:

1. train the base DCNN on all training utterances,
2. fit the DP mixture to standardized summary features and prune small
   components,
3. clone the base model's trainable part once per surviving component and
   fine-tune each clone on the utterances hard-assigned to that component,
4. at inference, mix the heads' softmax outputs with the mixture
   responsibilities of the utterance's summary features.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import dpgmm as dp
from . import neural as nn
from .dataio import Corpus, NormStats
from .dcnn import (CLASSIFIER_PARAMS, Architecture, DcnnModel, PaddedFrames, classify,
                   conv1_stage, encode)
from .training import TrainingConfig, fit_early_stopping

VARIANCE_FLOOR = 1e-8


class Variant(str, Enum):
    FC = "fc"
    FC_CONV = "fc_conv"

    @property
    def head_param_names(self) -> tuple:
        if self is Variant.FC:
            return CLASSIFIER_PARAMS
        return ("conv2.weight", "conv2.bias", *CLASSIFIER_PARAMS)

    @property
    def stage(self) -> str:
        """First stage whose input does not depend on head parameters."""
        return "pooled" if self is Variant.FC else "h1"


@dataclass(frozen=True)
class SummaryScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> SummaryScaler:
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), VARIANCE_FLOOR))

    def transform(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.mean) / self.std


@dataclass
class ClusterFit:
    """Result of clustering the training summary features."""
    model: dp.DpGmmModel          # pruned
    unpruned: dp.DpGmmModel
    scaler: SummaryScaler
    assignments: np.ndarray       # positions within model.active_indices
    initial_assignments: np.ndarray


def fit_summary_clusters(corpus: Corpus, alpha0: float = 1.0, truncation: int = 10,
                         threshold: float = 0.10, seed: int = 0, tol: float = 1e-6,
                         max_iter: int = 500, n_init: int = 10) -> ClusterFit:
    """Standardize summary features, fit the DP mixture and prune it."""
    X = corpus.summary_matrix()
    scaler = SummaryScaler.fit(X)
    Z = scaler.transform(X)
    model = dp.fit_cavi(Z, truncation=truncation, seed=seed, tol=tol, max_iter=max_iter,
                        alpha0=alpha0, n_init=n_init)
    initial = dp.hard_assign(model, Z)
    pruned, assign = dp.prune_and_reassign(model, Z, threshold)
    return ClusterFit(pruned, model, scaler, assign, initial)


@dataclass
class NhnnModel:
    base: DcnnModel
    heads: list
    dpgmm: dp.DpGmmModel
    scaler: SummaryScaler
    variant: Variant
    head_logs: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.heads)

    @property
    def arch(self) -> Architecture:
        return self.base.arch

    @property
    def n_class(self) -> int:
        return self.arch.n_class

    @property
    def shared_names(self) -> tuple:
        return tuple(n for n in self.base.params if n not in self.variant.head_param_names)

    def head_params(self, i: int) -> dict:
        params = {n: self.base.params[n] for n in self.shared_names}
        params.update(self.heads[i])
        return params

    def head_model(self, i: int) -> DcnnModel:
        return DcnnModel(self.arch, self.head_params(i), self.base.norm_stats)

    def param_count(self) -> int:
        shared = sum(self.base.params[n].size for n in self.shared_names)
        return int(shared + sum(nn.param_count(h) for h in self.heads))

    def cluster_responsibilities(self, utterances) -> np.ndarray:
        X = np.stack([u.summary_features for u in utterances])
        return dp.responsibilities(self.dpgmm, self.scaler.transform(X))

    def head_probs(self, utterances, batch_size: int = 256) -> np.ndarray:
        """Softmax output of every head, shape ``(k, n, n_class)``."""
        data = self.base.prepare(utterances)
        dil = self.arch.dilations
        out = np.empty((self.k, len(utterances), self.n_class))
        for lo in range(0, len(utterances), batch_size):
            sl = np.arange(lo, min(lo + batch_size, len(utterances)))
            x, lengths = data.take(sl)
            if self.variant is Variant.FC:
                pooled, _ = encode(self.base.params, dil, x, lengths)
                for i, head in enumerate(self.heads):
                    out[i, sl] = nn.softmax(classify(head, pooled)[0])
            else:
                h1 = conv1_stage(self.base.params, dil, x, lengths)
                for i in range(self.k):
                    pooled, _ = encode(self.head_params(i), dil, h1, lengths, start="h1")
                    out[i, sl] = nn.softmax(classify(self.heads[i], pooled)[0])
        return out

    def predict_proba(self, utterances) -> np.ndarray:
        return predict_weighted(self, utterances)

    def predict(self, utterances) -> np.ndarray:
        return predict_label(self, utterances)


def build_nhnn(base: DcnnModel, cluster_model: dp.DpGmmModel, variant: Variant | str,
               scaler: SummaryScaler) -> NhnnModel:
    """One head per active mixture component, each a copy of the base head."""
    variant = Variant(variant)
    k = cluster_model.n_active
    if k == 0:
        raise ValueError("mixture model has no active components")
    heads = [{n: base.params[n].copy() for n in variant.head_param_names} for _ in range(k)]
    return NhnnModel(base=base, heads=heads, dpgmm=cluster_model, scaler=scaler, variant=variant)


def _stage_data(model: NhnnModel, utterances) -> PaddedFrames:
    """Inputs of the first head-dependent layer for every utterance."""
    data = model.base.prepare(utterances)
    dil = model.arch.dilations
    if model.variant is Variant.FC:
        chunks = []
        for lo in range(0, len(utterances), 256):
            x, lengths = data.take(np.arange(lo, min(lo + 256, len(utterances))))
            chunks.append(encode(model.base.params, dil, x, lengths)[0])
        return PaddedFrames(np.concatenate(chunks), data.lengths)
    h1 = np.zeros((len(utterances), model.arch.channels, data.x.shape[2]))
    for lo in range(0, len(utterances), 256):
        sl = np.arange(lo, min(lo + 256, len(utterances)))
        x, lengths = data.take(sl)
        h1[sl, :, :x.shape[2]] = conv1_stage(model.base.params, dil, x, lengths)
    return PaddedFrames(h1, data.lengths)


def finetune_heads(model: NhnnModel, corpus: Corpus, config: TrainingConfig = TrainingConfig(),
                   min_cluster_size: int | None = None) -> NhnnModel:
    """Fine-tune each head on the training utterances hard-assigned to its cluster.

    Clusters with fewer than ``min_cluster_size`` utterances (default twice
    the batch size) keep the base head unchanged. Shared parameters are never
    touched. Each head gets its own validation split drawn from its cluster.
    A single cluster holds the whole training set the base model was fitted
    on, so its head is left equal to the base model.
    """
    if model.k == 1:
        model.head_logs = [{"cluster": 0, "n": len(corpus), "finetuned": False}]
        return model
    if min_cluster_size is None:
        min_cluster_size = 2 * config.batch_size
    utts = corpus.utterances
    labels = corpus.labels
    X = np.stack([u.summary_features for u in utts])
    assign = dp.hard_assign(model.dpgmm, model.scaler.transform(X))
    data = _stage_data(model, utts)
    names = model.variant.head_param_names
    logs = []
    for i in range(model.k):
        idx = np.flatnonzero(assign == i)
        if len(idx) < min_cluster_size:
            logs.append({"cluster": i, "n": int(len(idx)), "finetuned": False})
            continue
        params = model.head_params(i)
        params.update({n: params[n].copy() for n in names})
        sub = PaddedFrames(data.x[idx], data.lengths[idx])
        best, log = fit_early_stopping(params, model.arch.dilations, sub, labels[idx], names,
                                       config, seed=config.seed * 1000 + 101 + i,
                                       start=model.variant.stage)
        model.heads[i] = {n: best[n] for n in names}
        log.update(cluster=i, n=int(len(idx)), finetuned=True)
        logs.append(log)
    model.head_logs = logs
    return model


def predict_weighted(model: NhnnModel, utterances) -> np.ndarray:
    """Class probabilities ``sum_i head_i(x) * r_i(x)``, shape ``(n, n_class)``."""
    resp = model.cluster_responsibilities(utterances)
    probs = model.head_probs(utterances)
    return np.einsum("nk,knc->nc", resp, probs)


def predict_label(model: NhnnModel, utterances) -> np.ndarray:
    """Argmax class of the mixed distribution; ties go to the lowest index."""
    return np.argmax(predict_weighted(model, utterances), axis=1)


def train_nhnn(corpus: Corpus, variant: Variant | str = Variant.FC,
               config: TrainingConfig = TrainingConfig(), arch: Architecture | None = None,
               base: DcnnModel | None = None, clusters: ClusterFit | None = None,
               alpha0: float = 1.0, truncation: int = 10, threshold: float = 0.10) -> NhnnModel:
    """Full pipeline; ``base`` and ``clusters`` may be supplied to reuse work."""
    from .training import train_base_dcnn
    if base is None:
        base, _ = train_base_dcnn(corpus, config, arch)
    if clusters is None:
        clusters = fit_summary_clusters(corpus, alpha0, truncation, threshold, seed=config.seed)
    model = build_nhnn(base, clusters.model, variant, clusters.scaler)
    return finetune_heads(model, corpus, config)


# --------------------------------------------------------------------------
# Checkpoint bundle


def save_nhnn(model: NhnnModel, directory: str | os.PathLike, extra_meta: dict | None = None):
    """Write ``dpgmm.json``, ``base.npz``, ``head_<i>.npz`` and ``metadata.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dp.save_model(model.dpgmm, directory / "dpgmm.json")
    nn.save_params(model.base.params, directory / "base.npz")
    for i, head in enumerate(model.heads):
        nn.save_params(head, directory / f"head_{i}.npz")
    meta = {
        "format_version": 1,
        "variant": model.variant.value,
        "cluster_ids": model.dpgmm.active_indices.tolist(),
        "architecture": model.arch.to_dict(),
        "norm_stats": {"mean": model.base.norm_stats.mean.tolist(),
                       "std": model.base.norm_stats.std.tolist()},
        "summary_scaler": {"mean": model.scaler.mean.tolist(), "std": model.scaler.std.tolist()},
        **(extra_meta or {}),
    }
    with open(directory / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_nhnn(directory: str | os.PathLike) -> NhnnModel:
    directory = Path(directory)
    with open(directory / "metadata.json") as fh:
        meta = json.load(fh)
    arch = Architecture.from_dict(meta["architecture"])
    variant = Variant(meta["variant"])
    template = DcnnModel.initialize(arch, 0)
    shapes = {k: v.shape for k, v in template.params.items()}
    base_params, _ = nn.load_params(directory / "base.npz", shapes)
    stats = NormStats(np.array(meta["norm_stats"]["mean"]), np.array(meta["norm_stats"]["std"]))
    base = DcnnModel(arch, base_params, stats)
    cluster_model = dp.load_model(directory / "dpgmm.json")
    head_shapes = {n: shapes[n] for n in variant.head_param_names}
    heads = [nn.load_params(directory / f"head_{i}.npz", head_shapes)[0]
             for i in range(cluster_model.n_active)]
    scaler = SummaryScaler(np.array(meta["summary_scaler"]["mean"]),
                           np.array(meta["summary_scaler"]["std"]))
    return NhnnModel(base=base, heads=heads, dpgmm=cluster_model, scaler=scaler, variant=variant)
