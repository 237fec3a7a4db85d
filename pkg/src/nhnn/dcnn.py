"""Dilated CNN emotion classifier and its multitask variant.

The network is

    frames -> conv1 -> ReLU -> conv2 -> ReLU -> masked global max pool
           -> fc1 -> ReLU -> fc2 -> softmax

Parameters live in a flat ``{name: array}`` dict (``conv1.weight``,
``fc2.bias``, ...) so that freezing, cloning and checkpointing are plain
dict operations. The forward pass can start from a cached intermediate
stage (``"frames"``, ``"h1"`` or ``"pooled"``); the hierarchical model uses
this to skip frozen layers during head fine-tuning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural as nn
from .dataio import NormStats, Utterance, apply_znorm, pad_batch

STAGES = ("frames", "h1", "pooled")
ENCODER_PARAMS = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias")
CLASSIFIER_PARAMS = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")


@dataclass(frozen=True)
class Architecture:
    n_mel: int = 40
    channels: int = 128
    kernel_size: int = 8
    dilations: tuple[int, int] = (2, 4)
    hidden: int = 128
    n_class: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"n_mel": self.n_mel, "channels": self.channels,
                "kernel_size": self.kernel_size, "dilations": list(self.dilations),
                "hidden": self.hidden, "n_class": self.n_class}


def init_params(arch: Architecture, rng: np.random.Generator) -> dict:
    c1 = nn.DilatedConv1d.init(arch.n_mel, arch.channels, arch.kernel_size, arch.dilations[0], rng)
    c2 = nn.DilatedConv1d.init(arch.channels, arch.channels, arch.kernel_size,
                               arch.dilations[1], rng)
    f1 = nn.Dense.init(arch.channels, arch.hidden, rng)
    f2 = nn.Dense.init(arch.hidden, arch.n_class, rng)
    params = {}
    for name, layer in (("conv1", c1), ("conv2", c2), ("fc1", f1), ("fc2", f2)):
        for k, v in layer.params().items():
            params[f"{name}.{k}"] = v
    return params


def init_aux_params(arch: Architecture, n_aux: int, rng: np.random.Generator) -> dict:
    a1 = nn.Dense.init(arch.channels, arch.hidden, rng)
    a2 = nn.Dense.init(arch.hidden, n_aux, rng)
    return {"aux1.weight": a1.weight, "aux1.bias": a1.bias,
            "aux2.weight": a2.weight, "aux2.bias": a2.bias}


# --------------------------------------------------------------------------
# Forward / backward


def encode(params, dilations, x, lengths, start="frames"):
    """Run the encoder from ``start`` and return ``(pooled, cache)``."""
    cache = {"start": start, "lengths": lengths}
    if start == "pooled":
        return x, cache
    T = x.shape[2]
    mask = nn.frame_mask(lengths, T)[:, None, :]
    cache["mask"] = mask
    if start == "frames":
        z1, cols1 = nn.conv1d_forward(x, params["conv1.weight"], params["conv1.bias"], dilations[0])
        h1 = np.maximum(z1, 0.0) * mask
        cache.update(z1=z1, cols1=cols1)
    elif start == "h1":
        h1 = x
    else:
        raise ValueError(f"unknown stage {start!r}")
    z2, cols2 = nn.conv1d_forward(h1, params["conv2.weight"], params["conv2.bias"], dilations[1])
    h2 = np.maximum(z2, 0.0) * mask
    pooled, idx = nn.global_max_pool(h2, lengths)
    cache.update(h1=h1, z2=z2, cols2=cols2, idx=idx, T=T)
    return pooled, cache


def encode_backward(params, dilations, dpooled, cache, trainable) -> dict:
    grads = {}
    if cache["start"] == "pooled":
        return grads
    need_conv1 = cache["start"] == "frames" and (
        "conv1.weight" in trainable or "conv1.bias" in trainable)
    need_conv2 = "conv2.weight" in trainable or "conv2.bias" in trainable
    if not (need_conv1 or need_conv2):
        return grads
    mask = cache["mask"]
    dh2 = nn.global_max_pool_backward(dpooled, cache["idx"], cache["T"])
    dz2 = dh2 * mask * (cache["z2"] > 0)
    dh1, dw2, db2 = nn.conv1d_backward(dz2, cache["cols2"], params["conv2.weight"],
                                       dilations[1], need_dx=need_conv1)
    grads["conv2.weight"], grads["conv2.bias"] = dw2, db2
    if need_conv1:
        dz1 = dh1 * mask * (cache["z1"] > 0)
        _, dw1, db1 = nn.conv1d_backward(dz1, cache["cols1"], params["conv1.weight"],
                                         dilations[0], need_dx=False)
        grads["conv1.weight"], grads["conv1.bias"] = dw1, db1
    return grads


def classify(params, pooled, prefix=("fc1", "fc2")):
    """Two-layer classifier on pooled features; returns ``(logits, cache)``."""
    p1, p2 = prefix
    a1 = nn.dense_forward(pooled, params[f"{p1}.weight"], params[f"{p1}.bias"])
    g1 = np.maximum(a1, 0.0)
    logits = nn.dense_forward(g1, params[f"{p2}.weight"], params[f"{p2}.bias"])
    return logits, (pooled, a1, g1)


def classify_backward(params, dlogits, cache, prefix=("fc1", "fc2")):
    p1, p2 = prefix
    pooled, a1, g1 = cache
    dg1, dw2, db2 = nn.dense_backward(dlogits, g1, params[f"{p2}.weight"])
    da1 = dg1 * (a1 > 0)
    dpooled, dw1, db1 = nn.dense_backward(da1, pooled, params[f"{p1}.weight"])
    grads = {f"{p1}.weight": dw1, f"{p1}.bias": db1, f"{p2}.weight": dw2, f"{p2}.bias": db2}
    return dpooled, grads


def loss_and_grads(params, dilations, x, lengths, labels, trainable, start="frames",
                   aux_labels=None, aux_weight=1.0):
    """Mean cross-entropy (plus weighted auxiliary loss) and its gradients.

    Gradients are returned only for names in ``trainable``.
    """
    pooled, enc_cache = encode(params, dilations, x, lengths, start)
    logits, cls_cache = classify(params, pooled)
    loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    dpooled, grads = classify_backward(params, dlogits, cls_cache)
    if aux_labels is not None:
        aux_logits, aux_cache = classify(params, pooled, ("aux1", "aux2"))
        aux_loss, daux = nn.softmax_cross_entropy(aux_logits, aux_labels)
        dpooled_aux, aux_grads = classify_backward(params, aux_weight * daux, aux_cache,
                                                   ("aux1", "aux2"))
        dpooled = dpooled + dpooled_aux
        grads.update(aux_grads)
        loss = loss + aux_weight * aux_loss
    grads.update(encode_backward(params, dilations, dpooled, enc_cache, trainable))
    return loss, {k: v for k, v in grads.items() if k in trainable}


def batch_loss(params, dilations, x, lengths, labels, start="frames") -> float:
    pooled, _ = encode(params, dilations, x, lengths, start)
    logits, _ = classify(params, pooled)
    logp = nn.log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def forward_probs(params, dilations, x, lengths, start="frames"):
    pooled, _ = encode(params, dilations, x, lengths, start)
    logits, _ = classify(params, pooled)
    return nn.softmax(logits)


def conv1_stage(params, dilations, x, lengths):
    """Masked, rectified output of the first convolution (the ``"h1"`` stage)."""
    mask = nn.frame_mask(lengths, x.shape[2])[:, None, :]
    z1, _ = nn.conv1d_forward(x, params["conv1.weight"], params["conv1.bias"], dilations[0])
    return np.maximum(z1, 0.0) * mask


# --------------------------------------------------------------------------
# Models


@dataclass
class PaddedFrames:
    """Normalized framed features of a set of utterances, zero-padded."""
    x: np.ndarray
    lengths: np.ndarray

    def take(self, idx):
        idx = np.asarray(idx)
        lengths = self.lengths[idx]
        if self.x.ndim == 2:  # already pooled
            return self.x[idx], lengths
        return self.x[idx, :, :int(lengths.max())], lengths


def prepare_frames(utterances, stats: NormStats | None) -> PaddedFrames:
    frames = [u.framed_features if stats is None else apply_znorm(u.framed_features, stats)
              for u in utterances]
    x, lengths = pad_batch(frames)
    return PaddedFrames(x, lengths)


@dataclass
class DcnnModel:
    arch: Architecture
    params: dict
    norm_stats: NormStats | None = None
    frozen: frozenset = field(default_factory=frozenset)

    @classmethod
    def initialize(cls, arch: Architecture, seed: int, norm_stats=None) -> DcnnModel:
        return cls(arch, init_params(arch, np.random.default_rng([seed, 0])), norm_stats)

    def param_count(self) -> int:
        return nn.param_count(self.params)

    def copy(self) -> DcnnModel:
        return DcnnModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                         self.norm_stats, self.frozen)

    def prepare(self, utterances) -> PaddedFrames:
        return prepare_frames(utterances, self.norm_stats)

    def predict_proba(self, utterances, batch_size: int = 256) -> np.ndarray:
        data = self.prepare(utterances)
        return predict_padded(self.params, self.arch.dilations, data, batch_size)

    def predict(self, utterances) -> np.ndarray:
        return np.argmax(self.predict_proba(utterances), axis=1)


@dataclass
class MtlCnnModel(DcnnModel):
    """DCNN with an auxiliary classifier stack on the shared encoder.

    Prediction uses the valence stack only.
    """
    aux_attr: str = "gender"
    aux_values: tuple = ()

    def copy(self) -> MtlCnnModel:
        return MtlCnnModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                           self.norm_stats, self.frozen, self.aux_attr, self.aux_values)

    def predict_aux_proba(self, utterances) -> np.ndarray:
        data = self.prepare(utterances)
        pooled, _ = encode(self.params, self.arch.dilations, data.x, data.lengths)
        logits, _ = classify(self.params, pooled, ("aux1", "aux2"))
        return nn.softmax(logits)


def predict_padded(params, dilations, data: PaddedFrames, batch_size=256, start="frames"):
    out = []
    for lo in range(0, len(data.lengths), batch_size):
        x, lengths = data.take(np.arange(lo, min(lo + batch_size, len(data.lengths))))
        out.append(forward_probs(params, dilations, x, lengths, start))
    return np.concatenate(out) if out else np.zeros((0, params["fc2.bias"].size))


def encode_padded(params, dilations, data: PaddedFrames, batch_size=256) -> np.ndarray:
    out = []
    for lo in range(0, len(data.lengths), batch_size):
        x, lengths = data.take(np.arange(lo, min(lo + batch_size, len(data.lengths))))
        out.append(encode(params, dilations, x, lengths)[0])
    return np.concatenate(out)


def utterance_probs(model: DcnnModel, utt: Utterance) -> np.ndarray:
    return model.predict_proba([utt])[0]


# --------------------------------------------------------------------------
# Checkpoints


def save_dcnn(model: DcnnModel, directory, extra_meta: dict | None = None):
    """Write ``params.npz`` and ``metadata.json`` for a DCNN or MTL-CNN."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_params(model.params, directory / "params.npz")
    meta = {"format_version": 1,
            "kind": "mtl" if isinstance(model, MtlCnnModel) else "dcnn",
            "architecture": model.arch.to_dict(),
            "norm_stats": {"mean": model.norm_stats.mean.tolist(),
                           "std": model.norm_stats.std.tolist()},
            **(extra_meta or {})}
    if isinstance(model, MtlCnnModel):
        meta.update(aux_attr=model.aux_attr, aux_values=list(model.aux_values))
    with open(directory / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_dcnn(directory) -> DcnnModel:
    directory = Path(directory)
    with open(directory / "metadata.json") as fh:
        meta = json.load(fh)
    arch = Architecture.from_dict(meta["architecture"])
    shapes = {k: v.shape for k, v in init_params(arch, np.random.default_rng(0)).items()}
    stats = NormStats(np.array(meta["norm_stats"]["mean"]), np.array(meta["norm_stats"]["std"]))
    if meta["kind"] == "mtl":
        values = tuple(meta["aux_values"])
        shapes.update({k: v.shape for k, v in
                       init_aux_params(arch, len(values), np.random.default_rng(0)).items()})
        params, _ = nn.load_params(directory / "params.npz", shapes)
        return MtlCnnModel(arch, params, stats, aux_attr=meta["aux_attr"], aux_values=values)
    params, _ = nn.load_params(directory / "params.npz", shapes)
    return DcnnModel(arch, params, stats)
