"""Corpus representation, on-disk formats, label binning and normalization.

A corpus on disk is a directory holding

* ``manifest.json`` -- corpus name, rating scale, and one record per
  utterance (id, speaker, attributes, annotations, framed-feature path),
* ``summary.csv`` -- utterance-level summary features, one row per
  utterance keyed by ``id``, header = feature names,
* ``frames/<id>.csv`` -- framed features of one utterance, rows are mel
  coefficients and columns are frames.

Floats are written with 17 significant digits so a save/load round trip
is bit-exact.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
VARIANCE_FLOOR = 1e-8


class LabelBin(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2


class CorpusError(ValueError):
    """Base class for corpus loading and validation failures."""


class ManifestError(CorpusError):
    pass


class MissingFeatureFileError(CorpusError):
    pass


class DimensionMismatchError(CorpusError):
    pass


class NonFiniteFeatureError(CorpusError):
    pass


def bin_annotation(rating: int, scale_mid: int, scale_max: int | None = None) -> LabelBin:
    """Map one ordinal rating to Low / Medium / High around the scale midpoint."""
    if scale_max is None:
        scale_max = 2 * scale_mid - 1
    if not 1 <= rating <= scale_max:
        raise ValueError(f"rating {rating} outside scale [1, {scale_max}]")
    if rating < scale_mid:
        return LabelBin.LOW
    if rating > scale_mid:
        return LabelBin.HIGH
    return LabelBin.MEDIUM


def majority_label(annotations: Sequence[int], scale_mid: int,
                   scale_max: int | None = None) -> LabelBin | None:
    """Majority bin over all annotations; ``None`` when the top count is tied."""
    if len(annotations) == 0:
        raise ValueError("annotations must be nonempty")
    counts = Counter(bin_annotation(r, scale_mid, scale_max) for r in annotations)
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    speaker_id: str
    annotations: tuple[int, ...]
    summary_features: np.ndarray
    framed_features: np.ndarray
    attrs: Mapping[str, str] = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return self.framed_features.shape[1]

    @property
    def n_mel(self) -> int:
        return self.framed_features.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-mel-coefficient mean and (floored, population) standard deviation."""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("normalization std entries must be positive")


@dataclass(frozen=True, eq=False)
class Corpus:
    name: str
    utterances: tuple[Utterance, ...]
    scale_mid: int
    scale_max: int | None = None
    norm_stats: NormStats | None = None
    n_excluded: int = 0
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise CorpusError("utterance ids must be unique")
        if self.scale_max is None:
            object.__setattr__(self, "scale_max", 2 * self.scale_mid - 1)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def labels(self) -> np.ndarray:
        out = np.empty(len(self.utterances), dtype=np.int64)
        for i, u in enumerate(self.utterances):
            lab = majority_label(u.annotations, self.scale_mid, self.scale_max)
            if lab is None:
                raise CorpusError(f"utterance {u.id} has no majority label")
            out[i] = int(lab)
        return out

    @property
    def speakers(self) -> list[str]:
        return [u.speaker_id for u in self.utterances]

    def summary_matrix(self) -> np.ndarray:
        return np.stack([u.summary_features for u in self.utterances])

    def subset(self, ids: Sequence[str], name: str | None = None) -> Corpus:
        """Corpus restricted to ``ids`` (in the given order)."""
        by_id = {u.id: u for u in self.utterances}
        return replace(self, name=name or self.name,
                       utterances=tuple(by_id[i] for i in ids))

    def with_norm_stats(self, stats: NormStats) -> Corpus:
        return replace(self, norm_stats=stats)


# --------------------------------------------------------------------------
# Normalization and padding


def fit_norm_stats(utterances: Sequence[Utterance], eps: float = VARIANCE_FLOOR) -> NormStats:
    """Per-coefficient mean/std over every frame of every training utterance.

    Uses the population (1/N) convention. Standard deviations below ``eps``
    are floored so constant coefficients normalize to zero.
    """
    if len(utterances) == 0:
        raise ValueError("cannot fit normalization statistics on an empty set")
    frames = np.concatenate([u.framed_features for u in utterances], axis=1)
    if frames.shape[1] < 2:
        raise ValueError("need at least 2 training frames per coefficient")
    mean = frames.mean(axis=1)
    std = frames.std(axis=1)
    return NormStats(mean=mean, std=np.maximum(std, eps))


def apply_znorm(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-normalize an ``n_mel x T`` frame matrix with fitted statistics."""
    return (frames - stats.mean[:, None]) / stats.std[:, None]


def pad_batch(frames: Sequence[np.ndarray], max_T: int | None = None):
    """Stack variable-length ``n_mel x T`` matrices into a zero-padded batch.

    Returns
    -------
    batch : ndarray, shape (n, n_mel, max_T)
    lengths : ndarray of int, shape (n,)
    """
    lengths = np.array([f.shape[1] for f in frames], dtype=np.int64)
    if max_T is None:
        max_T = int(lengths.max())
    if np.any(lengths > max_T):
        raise ValueError("max_T is shorter than an utterance")
    n_mel = frames[0].shape[0]
    batch = np.zeros((len(frames), n_mel, max_T))
    for i, f in enumerate(frames):
        batch[i, :, :f.shape[1]] = f
    return batch, lengths


# --------------------------------------------------------------------------
# Disk format


def _fmt(x: float) -> str:
    return repr(float(x))


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteFeatureError(f"non-finite values in {what}")


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    """Write manifest, summary CSV and per-utterance frame CSVs."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    d_s = len(corpus.utterances[0].summary_features) if corpus.utterances else 0
    names = corpus.metadata.get("feature_names") or [f"f{j}" for j in range(d_s)]

    records = []
    for u in corpus.utterances:
        rel = f"frames/{u.id}.csv"
        with open(directory / rel, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in u.framed_features:
                w.writerow([_fmt(v) for v in row])
        records.append({
            "id": u.id,
            "speaker_id": u.speaker_id,
            "attrs": dict(u.attrs),
            "annotations": [int(a) for a in u.annotations],
            "framed_features": rel,
        })

    with open(directory / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for u in corpus.utterances:
            w.writerow([u.id, *(_fmt(v) for v in u.summary_features)])

    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": corpus.name,
        "scale_mid": corpus.scale_mid,
        "scale_max": corpus.scale_max,
        "summary_features": "summary.csv",
        "d_s": d_s,
        "n_mel": corpus.utterances[0].n_mel if corpus.utterances else 0,
        "metadata": {k: v for k, v in corpus.metadata.items() if k != "feature_names"},
        "utterances": records,
    }
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _read_float_rows(path: Path) -> list[list[float]]:
    with open(path, newline="") as fh:
        return [[float(v) for v in row] for row in csv.reader(fh) if row]


def load_corpus(manifest_path: str | os.PathLike, drop_excluded: bool = True) -> Corpus:
    """Load and validate a corpus written by :func:`save_corpus`.

    Utterances without a majority label bin are dropped (count kept in
    ``Corpus.n_excluded``) unless ``drop_excluded`` is False.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise MissingFeatureFileError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc

    for key in ("name", "scale_mid", "summary_features", "utterances"):
        if key not in manifest:
            raise ManifestError(f"manifest missing key {key!r}")
    if manifest.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest['format_version']}")
    scale_mid = int(manifest["scale_mid"])
    scale_max = int(manifest.get("scale_max", 2 * scale_mid - 1))
    d_s = manifest.get("d_s")
    n_mel = manifest.get("n_mel")

    summary_path = root / manifest["summary_features"]
    if not summary_path.exists():
        raise MissingFeatureFileError(f"summary feature file not found: {summary_path}")
    with open(summary_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        feature_names = header[1:]
        summary = {}
        for row in reader:
            if not row:
                continue
            summary[row[0]] = np.array([float(v) for v in row[1:]])
    if d_s is None:
        d_s = len(feature_names)

    utterances = []
    n_excluded = 0
    for rec in manifest["utterances"]:
        uid = rec["id"]
        if uid not in summary:
            raise ManifestError(f"utterance {uid} has no row in {summary_path.name}")
        svec = summary[uid]
        if svec.shape != (d_s,):
            raise DimensionMismatchError(
                f"utterance {uid}: summary vector has {svec.size} entries, expected {d_s}")
        _check_finite(svec, f"summary features of {uid}")

        fpath = root / rec["framed_features"]
        if not fpath.exists():
            raise MissingFeatureFileError(f"framed feature file not found: {fpath}")
        frames = np.array(_read_float_rows(fpath))
        if frames.ndim != 2 or frames.shape[1] == 0:
            raise DimensionMismatchError(f"utterance {uid}: framed features are not a matrix")
        if n_mel is not None and frames.shape[0] != n_mel:
            raise DimensionMismatchError(
                f"utterance {uid}: {frames.shape[0]} mel coefficients, expected {n_mel}")
        if "frame_count" in rec and frames.shape[1] != rec["frame_count"]:
            raise DimensionMismatchError(
                f"utterance {uid}: {frames.shape[1]} frames, manifest says {rec['frame_count']}")
        _check_finite(frames, f"framed features of {uid}")

        annotations = tuple(int(a) for a in rec["annotations"])
        if not annotations:
            raise ManifestError(f"utterance {uid} has no annotations")
        if drop_excluded and majority_label(annotations, scale_mid, scale_max) is None:
            n_excluded += 1
            continue
        utterances.append(Utterance(
            id=uid, speaker_id=str(rec["speaker_id"]), annotations=annotations,
            summary_features=svec, framed_features=frames,
            attrs={str(k): str(v) for k, v in rec.get("attrs", {}).items()},
        ))

    if n_excluded:
        logger.info("excluded %d utterances without a majority label", n_excluded)
    metadata = dict(manifest.get("metadata", {}))
    metadata["feature_names"] = feature_names
    return Corpus(name=manifest["name"], utterances=tuple(utterances),
                  scale_mid=scale_mid, scale_max=scale_max,
                  n_excluded=n_excluded, metadata=metadata)


# --------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic corpus generator.

    Summary features of group ``g`` are drawn from ``N(c_g, I)`` with group
    centers pairwise ``group_separation`` apart. Framed features are standard
    normal noise plus a constant ``signal_strength`` offset on one of mel
    coefficients 0, 1, 2; the index of that raised band is the label-bearing
    statistic (its "level"). With ``label_map_mode="group_flipped"``
    odd-numbered groups use the reversed level order, so the framed
    features alone cannot tell Low from High without knowing the group.
    """
    n_groups: int = 2
    n_speakers_per_group: int = 10
    utterances_per_speaker: int = 100
    d_s: int = 88
    n_mel: int = 40
    T_range: tuple[int, int] = (20, 40)
    group_separation: float = 6.0
    label_map_mode: str = "shared"
    seed: int = 0
    n_labels: int = 3
    signal_strength: float = 1.5
    speaker_spread: float = 0.0

    def validate(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.n_speakers_per_group < 1 or self.utterances_per_speaker < 1:
            raise ValueError("need at least one speaker and one utterance")
        if self.group_separation < 0:
            raise ValueError("group_separation must be >= 0")
        if self.label_map_mode not in ("shared", "group_flipped"):
            raise ValueError(f"unknown label_map_mode {self.label_map_mode!r}")
        if self.n_labels not in (2, 3):
            raise ValueError("n_labels must be 2 or 3")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ValueError("T_range must satisfy 1 <= lo <= hi")
        if self.d_s < 1 or self.n_mel < 3:
            raise ValueError("need d_s >= 1 and n_mel >= 3")


# rating written for each label on a 5-point scale with midpoint 3
_LABEL_RATING = {0: 2, 1: 3, 2: 4}


def signal_level(label: int, group: int, mode: str) -> int:
    """Level (0, 1, 2) of the label-bearing frame statistic."""
    if mode == "group_flipped" and group % 2 == 1:
        return 2 - label
    return label


def group_centers(n_groups: int, d_s: int, separation: float) -> np.ndarray:
    """Centers with pairwise Euclidean distance ``separation``."""
    if n_groups > d_s:
        raise ValueError("need d_s >= n_groups to place equidistant centers")
    centers = np.zeros((n_groups, d_s))
    centers[:, :n_groups] = np.eye(n_groups) * (separation / np.sqrt(2.0))
    return centers - centers.mean(axis=0)


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = group_centers(spec.n_groups, spec.d_s, spec.group_separation)
    label_set = [0, 1, 2] if spec.n_labels == 3 else [0, 2]
    lo, hi = spec.T_range

    utterances = []
    for g in range(spec.n_groups):
        for s in range(spec.n_speakers_per_group):
            spk = f"g{g}s{s:02d}"
            offset = spec.speaker_spread * rng.standard_normal(spec.d_s)
            for k in range(spec.utterances_per_speaker):
                label = label_set[rng.integers(len(label_set))]
                level = signal_level(label, g, spec.label_map_mode)
                T = int(rng.integers(lo, hi + 1))
                frames = rng.standard_normal((spec.n_mel, T))
                frames[level] += spec.signal_strength
                summary = centers[g] + offset + rng.standard_normal(spec.d_s)
                utterances.append(Utterance(
                    id=f"{spk}_u{k:03d}", speaker_id=spk,
                    annotations=(_LABEL_RATING[label],),
                    summary_features=summary, framed_features=frames,
                    attrs={"group": str(g), "gender": "F" if g % 2 == 0 else "M"},
                ))

    level_map = {str(g): [signal_level(lab, g, spec.label_map_mode) for lab in range(3)]
                 for g in range(spec.n_groups)}
    metadata = {
        "generator": "synthetic",
        "spec": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in spec.__dict__.items()},
        "label_to_level": level_map,
        "signal_coefficients": [0, 1, 2],
    }
    return Corpus(name=f"synthetic-{spec.seed}", utterances=tuple(utterances),
                  scale_mid=3, scale_max=5, metadata=metadata)
