"""Metrics, statistical tests and the LOSO / cross-corpus experiment protocols.

Per-subject UAR drops classes that are absent from the subject's test
utterances, so a speaker with only two observed classes is scored on those
two.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from .dataio import Corpus
from .dcnn import Architecture
from .hierarchy import Variant, build_nhnn, finetune_heads, fit_summary_clusters
from .training import TrainingConfig, train_base_dcnn, train_mtl_cnn

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MODEL_NAMES = ("dcnn", "mtl", "nhnn_fc", "nhnn_fc_conv")


# --------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    """Integer counts; rows are true classes, columns predicted classes."""
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(c < 0):
            raise ValueError("confusion counts must be nonnegative")

    @property
    def n_class(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(y_true, y_pred, n_class: int = 3) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n_class):
        raise ValueError("class index out of range")
    counts = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; ``nan`` for classes with no true examples."""
    rows = cm.counts.sum(axis=1)
    diag = np.diag(cm.counts).astype(float)
    out = np.full(cm.n_class, np.nan)
    present = rows > 0
    out[present] = diag[present] / rows[present]
    return out


def uar(cm: ConfusionMatrix) -> float:
    """Unweighted average recall over classes present in the true labels."""
    rec = per_class_recall(cm)
    present = ~np.isnan(rec)
    if not present.any():
        raise ValueError("confusion matrix has no true examples")
    return float(rec[present].mean())


def uar_from_labels(y_true, y_pred, n_class: int = 3) -> float:
    return uar(confusion_matrix(y_true, y_pred, n_class))


# --------------------------------------------------------------------------
# Leave-one-subject-out plan


@dataclass(frozen=True)
class LosoFold:
    speaker: str
    train_ids: tuple
    test_ids: tuple


@dataclass(frozen=True)
class LosoPlan:
    folds: tuple

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def loso_split(corpus: Corpus) -> LosoPlan:
    """One fold per speaker, ordered by speaker id.

    Utterance order inside each id list follows the corpus order.
    """
    speakers = sorted(set(corpus.speakers))
    if len(speakers) < 2:
        raise ValueError("LOSO needs at least 2 speakers")
    folds = []
    for spk in speakers:
        test = tuple(u.id for u in corpus.utterances if u.speaker_id == spk)
        train = tuple(u.id for u in corpus.utterances if u.speaker_id != spk)
        folds.append(LosoFold(spk, train, test))
    return LosoPlan(tuple(folds))


# --------------------------------------------------------------------------
# Paired t-test


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value_two_sided: float
    n_pairs: int
    mean_difference: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {k: _json_float(v) if isinstance(v, float) else v
                for k, v in asdict(self).items()}


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t.

    Uses ``I_{df/(df+t^2)}(df/2, 1/2)``, the regularized incomplete beta.
    """
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(1.0, special.betainc(0.5 * df, 0.5, x)))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on ``d = a - b``.

    Zero spread in the differences is flagged as degenerate: identical inputs
    give ``t = 0, p = 1``; a constant nonzero shift gives ``t = +-inf, p = 0``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, df, 1.0, n, mean, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), df, 0.0, n, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), df, student_t_sf2(t, df), n, mean)


# --------------------------------------------------------------------------
# Group and cluster analysis


@dataclass
class Predictions:
    """Per-utterance predictions of one model, aligned with ``ids``."""
    ids: list
    speakers: list
    attrs: list
    y_true: np.ndarray
    y_pred: np.ndarray

    def extend(self, other: Predictions):
        self.ids += other.ids
        self.speakers += other.speakers
        self.attrs += other.attrs
        self.y_true = np.concatenate([self.y_true, other.y_true])
        self.y_pred = np.concatenate([self.y_pred, other.y_pred])

    def subset(self, mask) -> Predictions:
        idx = np.flatnonzero(mask)
        return Predictions([self.ids[i] for i in idx], [self.speakers[i] for i in idx],
                           [self.attrs[i] for i in idx], self.y_true[idx], self.y_pred[idx])


def make_predictions(utterances, y_true, y_pred) -> Predictions:
    return Predictions([u.id for u in utterances], [u.speaker_id for u in utterances],
                       [dict(u.attrs) for u in utterances],
                       np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64))


def group_breakdown(results: Predictions, attr: str, reference: Predictions | None = None,
                    n_class: int = 3) -> dict:
    """UAR per value of ``attr``; with ``reference`` also the UAR delta.

    Each group's UAR uses that group's rows only. Group UARs weighted by group
    size do not in general recombine to the overall UAR.
    """
    if any(attr not in a for a in results.attrs):
        raise KeyError(f"attribute {attr!r} missing on evaluated utterances")
    values = np.array([a[attr] for a in results.attrs])
    out = {}
    for v in sorted(set(values.tolist())):
        sub = results.subset(values == v)
        cm = confusion_matrix(sub.y_true, sub.y_pred, n_class)
        entry = {"n": int(len(sub.ids)), "uar": uar(cm), "confusion": cm.counts.tolist()}
        if reference is not None:
            ref_vals = np.array([a[attr] for a in reference.attrs])
            ref = reference.subset(ref_vals == v)
            entry["reference_uar"] = uar_from_labels(ref.y_true, ref.y_pred, n_class)
            entry["delta_uar"] = entry["uar"] - entry["reference_uar"]
        out[v] = entry
    return out


@dataclass(frozen=True)
class Ratio:
    """``numerator / denominator`` that stays readable when the denominator is 0."""
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        if self.denominator == 0:
            return math.inf if self.numerator > 0 else math.nan
        return self.numerator / self.denominator

    def to_dict(self) -> dict:
        return {"value": _json_float(self.value), "numerator": self.numerator,
                "denominator": self.denominator}


def _attribute_ratio(utts, attr, values) -> Ratio:
    a, b = values
    return Ratio(sum(u.attrs.get(attr) == a for u in utts),
                 sum(u.attrs.get(attr) == b for u in utts))


def _subject_dispersion(utts) -> Ratio:
    counts = {}
    for u in utts:
        counts[u.speaker_id] = counts.get(u.speaker_id, 0) + 1
    if not counts:
        return Ratio(0, 0)
    return Ratio(max(counts.values()), min(counts.values()))


def cluster_attribute_ratios(corpus: Corpus, assignments, attrs: dict | None = None) -> dict:
    """Attribute ratios and subject dispersion per cluster and overall.

    ``attrs`` maps an attribute name to the ``(numerator, denominator)``
    values, e.g. ``{"gender": ("F", "M")}``. Dispersion is the largest
    per-subject segment count divided by the smallest, over subjects present
    in the cluster.
    """
    assignments = np.asarray(assignments)
    if assignments.shape != (len(corpus),):
        raise ValueError("assignments must cover the corpus")
    attrs = {"gender": ("F", "M")} if attrs is None else attrs

    def describe(utts):
        entry = {"n": len(utts), "subject_dispersion": _subject_dispersion(utts).to_dict()}
        for name, values in attrs.items():
            entry[f"{name}_ratio"] = _attribute_ratio(utts, name, values).to_dict()
        return entry

    clusters = {}
    for c in sorted(set(assignments.tolist())):
        clusters[str(c)] = describe([u for u, a in zip(corpus.utterances, assignments) if a == c])
    return {"ratio_definitions": {k: f"{v[0]}/{v[1]}" for k, v in attrs.items()},
            "clusters": clusters, "overall": describe(list(corpus.utterances))}


# --------------------------------------------------------------------------
# Experiment protocol


@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple = ("dcnn", "nhnn_fc")
    seeds: tuple = (0, 1, 2, 3, 4)
    training: TrainingConfig = TrainingConfig()
    arch: Architecture | None = None
    alpha0: float = 1.0
    truncation: int = 10
    threshold: float = 0.10
    tol: float = 1e-6
    max_iter: int = 500
    n_init: int = 10
    aux_attr: str = "gender"
    aux_weight: float = 1.0
    baseline: str = "dcnn"
    group_attrs: tuple = ()

    def __post_init__(self):
        unknown = [m for m in self.models if m not in MODEL_NAMES]
        if unknown:
            raise ValueError(f"unknown models {unknown}; choose from {MODEL_NAMES}")
        if not self.models:
            raise ValueError("at least one model is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.models)) != len(self.models):
            raise ValueError("duplicate model names")

    def to_dict(self) -> dict:
        return {"models": list(self.models), "seeds": list(self.seeds),
                "training": self.training.to_dict(),
                "arch": None if self.arch is None else self.arch.to_dict(),
                "alpha0": self.alpha0, "truncation": self.truncation,
                "threshold": self.threshold, "tol": self.tol, "max_iter": self.max_iter,
                "n_init": self.n_init, "aux_attr": self.aux_attr,
                "aux_weight": self.aux_weight, "baseline": self.baseline,
                "group_attrs": list(self.group_attrs)}


def train_models(train: Corpus, config: ExperimentConfig, seed: int) -> dict:
    """Train every requested model on ``train``; the NHNN variants share one base."""
    tcfg = replace(config.training, seed=seed)
    arch = config.arch or Architecture(n_mel=train.utterances[0].n_mel)
    models, info = {}, {}
    need_base = any(m in ("dcnn", "nhnn_fc", "nhnn_fc_conv") for m in config.models)
    if need_base:
        base, _ = train_base_dcnn(train, tcfg, arch)
        if "dcnn" in config.models:
            models["dcnn"] = base
    if "mtl" in config.models:
        models["mtl"], _ = train_mtl_cnn(train, config.aux_attr, tcfg, arch, config.aux_weight)
    nhnn_names = [m for m in config.models if m.startswith("nhnn")]
    if nhnn_names:
        clusters = fit_summary_clusters(train, config.alpha0, config.truncation, config.threshold,
                                        seed=seed, tol=config.tol, max_iter=config.max_iter,
                                        n_init=config.n_init)
        info["n_clusters"] = int(clusters.model.n_active)
        for name in nhnn_names:
            variant = Variant.FC if name == "nhnn_fc" else Variant.FC_CONV
            model = build_nhnn(base, clusters.model, variant, clusters.scaler)
            models[name] = finetune_heads(model, train, tcfg)
    return {m: models[m] for m in config.models}, info


def check_compatible(train: Corpus, test: Corpus):
    u, v = train.utterances[0], test.utterances[0]
    if u.n_mel != v.n_mel or u.summary_features.shape != v.summary_features.shape:
        raise ValueError(
            f"feature dimensions differ: train (d_s={u.summary_features.size}, n_mel={u.n_mel})"
            f" vs test (d_s={v.summary_features.size}, n_mel={v.n_mel})")


def evaluate_models(models: dict, test: Corpus) -> dict:
    y = test.labels
    return {name: make_predictions(test.utterances, y, m.predict(test.utterances))
            for name, m in models.items()}


# Corpus shared with worker processes, set once per worker.
_WORKER_CORPUS = {}


def _init_worker(corpora):
    _WORKER_CORPUS.clear()
    _WORKER_CORPUS.update(corpora)


def _loso_task(args):
    seed, fold, config = args
    corpus = _WORKER_CORPUS["corpus"]
    models, info = train_models(corpus.subset(fold.train_ids), config, seed)
    preds = evaluate_models(models, corpus.subset(fold.test_ids))
    return seed, fold.speaker, preds, info


def _cross_task(args):
    seed, config = args
    models, info = train_models(_WORKER_CORPUS["train"], config, seed)
    return seed, evaluate_models(models, _WORKER_CORPUS["test"]), info


def _map(fn, tasks, corpora, jobs):
    if jobs <= 1:
        _init_worker(corpora)
        try:
            return [fn(t) for t in tasks]
        finally:
            _WORKER_CORPUS.clear()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(corpora,)) as ex:
        return list(ex.map(fn, tasks))


@dataclass
class WithinCorpusResult:
    """LOSO outcome.

    ``subject_uar[model][seed]`` lists one UAR per speaker in fold order;
    ``subject_mean[model]`` averages those over seeds.
    """
    config: ExperimentConfig
    corpus: str
    speakers: list
    subject_uar: dict
    predictions: dict
    n_clusters: dict = field(default_factory=dict)

    @property
    def subject_mean(self) -> dict:
        return {m: np.mean([v[s] for s in self.config.seeds], axis=0).tolist()
                for m, v in self.subject_uar.items()}

    @property
    def mean_uar(self) -> dict:
        return {m: float(np.mean(v)) for m, v in self.subject_mean.items()}

    @property
    def seed_mean_uar(self) -> dict:
        return {m: {s: float(np.mean(v[s])) for s in self.config.seeds}
                for m, v in self.subject_uar.items()}

    def t_tests(self) -> dict:
        base = self.config.baseline
        if base not in self.subject_uar or len(self.speakers) < 2:
            return {}
        ref = self.subject_mean[base]
        return {m: paired_t_test(v, ref) for m, v in self.subject_mean.items() if m != base}


def run_within_corpus(corpus: Corpus, config: ExperimentConfig = ExperimentConfig(),
                      jobs: int = 1) -> WithinCorpusResult:
    """LOSO evaluation of every model in ``config.models`` over ``config.seeds``.

    Each (seed, fold) task trains the full pipeline on the fold's training
    speakers and scores the held-out speaker. Results are collected in
    (seed, fold) order regardless of ``jobs``.
    """
    plan = loso_split(corpus)
    tasks = [(s, f, config) for s in config.seeds for f in plan]
    logger.info("LOSO on %s: %d folds x %d seeds, %d jobs", corpus.name, len(plan),
                len(config.seeds), jobs)
    outputs = _map(_loso_task, tasks, {"corpus": corpus}, jobs)
    subject_uar = {m: {s: [] for s in config.seeds} for m in config.models}
    preds = {m: {s: None for s in config.seeds} for m in config.models}
    n_clusters = {s: [] for s in config.seeds}
    for seed, speaker, fold_preds, info in outputs:
        for m, p in fold_preds.items():
            subject_uar[m][seed].append(uar_from_labels(p.y_true, p.y_pred))
            if preds[m][seed] is None:
                preds[m][seed] = p
            else:
                preds[m][seed].extend(p)
        if "n_clusters" in info:
            n_clusters[seed].append(info["n_clusters"])
    return WithinCorpusResult(config, corpus.name, [f.speaker for f in plan], subject_uar,
                              preds, n_clusters)


@dataclass
class CrossCorpusResult:
    config: ExperimentConfig
    train: str
    test: str
    seed_uar: dict
    predictions: dict
    n_clusters: dict = field(default_factory=dict)

    @property
    def mean_uar(self) -> dict:
        return {m: float(np.mean([v[s] for s in self.config.seeds]))
                for m, v in self.seed_uar.items()}

    def t_tests(self) -> dict:
        base = self.config.baseline
        if base not in self.seed_uar or len(self.config.seeds) < 2:
            return {}
        ref = [self.seed_uar[base][s] for s in self.config.seeds]
        return {m: paired_t_test([v[s] for s in self.config.seeds], ref)
                for m, v in self.seed_uar.items() if m != base}


def run_cross_corpus(train: Corpus, test: Corpus, config: ExperimentConfig = ExperimentConfig(),
                     jobs: int = 1) -> CrossCorpusResult:
    """Train on all of ``train`` and score all of ``test``, once per seed."""
    check_compatible(train, test)
    tasks = [(s, config) for s in config.seeds]
    outputs = _map(_cross_task, tasks, {"train": train, "test": test}, jobs)
    seed_uar = {m: {} for m in config.models}
    preds = {m: {} for m in config.models}
    n_clusters = {}
    for seed, p_by_model, info in outputs:
        for m, p in p_by_model.items():
            seed_uar[m][seed] = uar_from_labels(p.y_true, p.y_pred)
            preds[m][seed] = p
        if "n_clusters" in info:
            n_clusters[seed] = info["n_clusters"]
    return CrossCorpusResult(config, train.name, test.name, seed_uar, preds, n_clusters)


# --------------------------------------------------------------------------
# Reports


def _json_float(x):
    """JSON has no infinities; encode them as strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def json_safe(obj):
    """Recursively replace non-finite floats by their string markers."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return _json_float(obj)


def _pooled_breakdowns(predictions: dict, seeds, attrs, baseline) -> dict:
    """Group breakdowns over predictions pooled across seeds."""
    pooled = {}
    for m, by_seed in predictions.items():
        p = None
        for s in seeds:
            q = by_seed[s]
            q = Predictions(list(q.ids), list(q.speakers), list(q.attrs), q.y_true, q.y_pred)
            if p is None:
                p = q
            else:
                p.extend(q)
        pooled[m] = p
    out = {}
    for attr in attrs:
        ref = pooled.get(baseline)
        out[attr] = {m: group_breakdown(p, attr, None if m == baseline else ref)
                     for m, p in pooled.items()}
    return out


def within_report(result: WithinCorpusResult) -> dict:
    cfg = result.config
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "protocol": "loso",
        "corpus": result.corpus,
        "config": cfg.to_dict(),
        "speakers": result.speakers,
        "models": {
            m: {"mean_uar": result.mean_uar[m],
                "subject_uar": result.subject_mean[m],
                "seed_mean_uar": {str(s): v for s, v in result.seed_mean_uar[m].items()},
                "subject_uar_by_seed": {str(s): result.subject_uar[m][s] for s in cfg.seeds}}
            for m in cfg.models},
        "t_tests": {m: {"baseline": cfg.baseline, **t.to_dict()}
                    for m, t in result.t_tests().items()},
        "n_clusters_by_seed": {str(s): v for s, v in result.n_clusters.items() if v},
        "group_breakdown": _pooled_breakdowns(result.predictions, cfg.seeds, cfg.group_attrs,
                                              cfg.baseline),
    }


def cross_report(result: CrossCorpusResult) -> dict:
    cfg = result.config
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "protocol": "cross_corpus",
        "train_corpus": result.train,
        "test_corpus": result.test,
        "config": cfg.to_dict(),
        "models": {m: {"mean_uar": result.mean_uar[m],
                       "seed_uar": {str(s): result.seed_uar[m][s] for s in cfg.seeds}}
                   for m in cfg.models},
        "t_tests": {m: {"baseline": cfg.baseline, **t.to_dict()}
                    for m, t in result.t_tests().items()},
        "n_clusters_by_seed": {str(s): v for s, v in result.n_clusters.items()},
        "group_breakdown": _pooled_breakdowns(result.predictions, cfg.seeds, cfg.group_attrs,
                                              cfg.baseline),
    }


def dumps_report(report: dict) -> str:
    """Canonical JSON text: sorted keys, full float precision, trailing newline."""
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"


def format_table(rows, header) -> str:
    """Left-aligned first column, right-aligned others."""
    cells = [list(header)] + [[_fmt_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt_cell(c) -> str:
    if isinstance(c, float):
        return "inf" if math.isinf(c) else f"{c:.4f}"
    return str(c)


def format_report(report: dict) -> str:
    """Human-readable tables for a within- or cross-corpus report."""
    title = (f"LOSO on {report['corpus']}" if report["protocol"] == "loso"
             else f"train {report['train_corpus']} -> test {report['test_corpus']}")
    rows = []
    for m, v in report["models"].items():
        t = report["t_tests"].get(m)
        p = "" if t is None else t["p_value_two_sided"]
        rows.append([m, v["mean_uar"], p])
    out = [title, "", format_table(rows, ["model", "UAR", f"p vs {report['config']['baseline']}"])]
    for attr, by_model in report.get("group_breakdown", {}).items():
        groups = sorted({g for b in by_model.values() for g in b})
        hdr = ["model"] + [f"{attr}={g}" for g in groups] + [f"dUAR {attr}={g}" for g in groups]
        rows = []
        for m, b in by_model.items():
            rows.append([m] + [b[g]["uar"] for g in groups]
                        + [b[g].get("delta_uar", "") for g in groups])
        out += ["", format_table(rows, hdr)]
    return "\n".join(out)
