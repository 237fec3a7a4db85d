"""Command-line entry point.

Every command reads one JSON config file::

    nhnn <command> --config run.json [--seed N] [--jobs N] [--out DIR]

Commands: ``synth``, ``cluster``, ``train``, ``eval-loso``, ``eval-cross``
and ``predict``. Outputs land under ``DIR`` as ``model/``, ``reports/`` and
``logs/`` (``synth`` writes ``corpus/``). The config and every input file
are validated before anything is written.

Exit codes: 0 success, 1 invalid config or input data, 2 runtime failure.
The log level comes from the ``NHNN_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dpgmm as dp
from .dataio import (Corpus, CorpusError, LabelBin, SyntheticSpec, generate_synthetic,
                     load_corpus, save_corpus)
from .dcnn import Architecture, load_dcnn, save_dcnn
from .evaluation import (ExperimentConfig, check_compatible, cluster_attribute_ratios,
                         cross_report, dumps_report, format_report, format_table, json_safe,
                         run_cross_corpus, run_within_corpus, train_models, within_report)
from .hierarchy import NhnnModel, SummaryScaler, fit_summary_clusters, load_nhnn, save_nhnn
from .training import TrainingConfig

logger = logging.getLogger("nhnn")

LOG_LEVEL_ENV = "NHNN_LOG_LEVEL"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

_DPGMM_KEYS = {"alpha0", "truncation", "tol", "max_iter", "threshold", "n_init", "load"}
_MODEL_KEYS = {"name", "models", "architecture", "aux_attr", "aux_weight", "baseline",
               "checkpoint"}
_EXPERIMENT_KEYS = {"seed", "seeds", "group_attrs", "ratio_attrs"}
_SECTIONS = {
    "synth": {"synth": {f.name for f in dataclasses.fields(SyntheticSpec)},
              "output": {"directory"}},
    "cluster": {"data": {"corpus"}, "dpgmm": _DPGMM_KEYS, "experiment": _EXPERIMENT_KEYS,
                "output": {"directory"}},
    "train": {"data": {"corpus"}, "dpgmm": _DPGMM_KEYS, "model": _MODEL_KEYS,
              "training": {f.name for f in dataclasses.fields(TrainingConfig)},
              "experiment": _EXPERIMENT_KEYS, "output": {"directory"}},
    "predict": {"data": {"corpus", "utterances"}, "model": _MODEL_KEYS,
                "output": {"directory"}},
}
_SECTIONS["eval-loso"] = {**_SECTIONS["train"]}
_SECTIONS["eval-cross"] = {**_SECTIONS["train"], "data": {"train", "test"}}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Config validation


def _check_keys(config: dict, command: str):
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    allowed = _SECTIONS[command]
    for section, body in config.items():
        if section not in allowed:
            raise ConfigError(f"unknown section {section!r} for {command}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = sorted(set(body) - allowed[section])
        if unknown:
            raise ConfigError(f"unknown keys in {section!r}: {unknown}")


def _manifest_path(value, key) -> Path:
    if not isinstance(value, str):
        raise ConfigError(f"data.{key} must be a path")
    p = Path(value)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise ConfigError(f"data.{key}: no manifest at {p}")
    return p


def _load(config, key) -> Corpus:
    data = config.get("data", {})
    if key not in data:
        raise ConfigError(f"data.{key} is required")
    path = _manifest_path(data[key], key)
    try:
        return load_corpus(path)
    except CorpusError as exc:
        raise ConfigError(f"data.{key}: {exc}") from exc


def _build(cls, kwargs: dict, what: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _experiment_config(config: dict, seeds) -> ExperimentConfig:
    m = config.get("model", {})
    d = config.get("dpgmm", {})
    e = config.get("experiment", {})
    training = _build(TrainingConfig, config.get("training", {}), "training section")
    arch = None
    if "architecture" in m:
        if not isinstance(m["architecture"], dict):
            raise ConfigError("model.architecture must be an object")
        arch = _build(lambda **kw: Architecture.from_dict(kw), m["architecture"],
                      "model.architecture")
    if "models" in m and "name" in m:
        raise ConfigError("give either model.models or model.name, not both")
    models = m.get("models", [m["name"]] if "name" in m else ["dcnn", "nhnn_fc"])
    if isinstance(models, str):
        models = [models]
    kwargs = {"models": tuple(models), "seeds": tuple(seeds), "training": training, "arch": arch,
              "group_attrs": tuple(e.get("group_attrs", ()))}
    for key in ("alpha0", "truncation", "threshold", "tol", "max_iter", "n_init"):
        if key in d:
            kwargs[key] = d[key]
    for key in ("aux_attr", "aux_weight", "baseline"):
        if key in m:
            kwargs[key] = m[key]
    cfg = _build(ExperimentConfig, kwargs, "experiment settings")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
        raise ConfigError("seeds must be integers")
    if not 0 < cfg.threshold < 1 or cfg.truncation < 1 or cfg.alpha0 <= 0:
        raise ConfigError("dpgmm: need 0 < threshold < 1, truncation >= 1, alpha0 > 0")
    return cfg


def _seeds(config, override, default):
    e = config.get("experiment", {})
    if override is not None:
        return [override]
    if "seeds" in e:
        if not isinstance(e["seeds"], list) or not e["seeds"]:
            raise ConfigError("experiment.seeds must be a nonempty list")
        return e["seeds"]
    if "seed" in e:
        return [e["seed"]]
    return default


def _check_attrs(corpus: Corpus, attrs, what):
    for a in attrs:
        if any(a not in u.attrs for u in corpus.utterances):
            raise ConfigError(f"{what}: attribute {a!r} missing on some utterances of "
                              f"{corpus.name}")


def validate(command: str, config: dict, args) -> dict:
    """Check the config and load every input; returns the prepared job."""
    _check_keys(config, command)
    out = args.out or config.get("output", {}).get("directory")
    if not out:
        raise ConfigError("an output directory is required (--out or output.directory)")
    job = {"out": Path(out)}

    if command == "synth":
        fields = dict(config.get("synth", {}))
        if "T_range" in fields:
            fields["T_range"] = tuple(fields["T_range"])
        if args.seed is not None:
            fields["seed"] = args.seed
        spec = _build(SyntheticSpec, fields, "synth section")
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid synth section: {exc}") from exc
        job["spec"] = spec
        return job

    if command == "predict":
        m = config.get("model", {})
        if "checkpoint" not in m:
            raise ConfigError("model.checkpoint is required")
        ckpt = Path(m["checkpoint"])
        if not (ckpt / "metadata.json").is_file():
            raise ConfigError(f"model.checkpoint: no checkpoint at {ckpt}")
        try:
            job["model"] = load_checkpoint(ckpt)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"model.checkpoint: {exc}") from exc
        corpus = _load(config, "corpus")
        ids = config.get("data", {}).get("utterances")
        if ids is not None:
            known = {u.id for u in corpus.utterances}
            missing = [i for i in ids if i not in known]
            if missing:
                raise ConfigError(f"data.utterances not in corpus: {missing}")
            corpus = corpus.subset(ids)
        _check_dims(job["model"], corpus)
        job["corpus"] = corpus
        return job

    if command == "cluster":
        job["corpus"] = _load(config, "corpus")
        job["seed"] = _seeds(config, args.seed, [0])[0]
        d = config.get("dpgmm", {})
        job["dpgmm"] = {k: v for k, v in d.items() if k != "load"}
        _build(ExperimentConfig, {"seeds": (job["seed"],), **job["dpgmm"]}, "dpgmm section")
        if "load" in d:
            load_dir = Path(d["load"])
            for name in ("dpgmm.json", "summary_scaler.json"):
                if not (load_dir / name).is_file():
                    raise ConfigError(f"dpgmm.load: missing {name} in {load_dir}")
            job["load"] = load_dir
        ratio_attrs = config.get("experiment", {}).get("ratio_attrs", {"gender": ["F", "M"]})
        if not isinstance(ratio_attrs, dict) or any(
                not isinstance(v, list) or len(v) != 2 for v in ratio_attrs.values()):
            raise ConfigError("experiment.ratio_attrs maps attribute -> [value_a, value_b]")
        _check_attrs(job["corpus"], ratio_attrs, "experiment.ratio_attrs")
        job["ratio_attrs"] = {k: tuple(v) for k, v in ratio_attrs.items()}
        return job

    if command == "eval-cross":
        job["train"] = _load(config, "train")
        job["test"] = _load(config, "test")
        default_seeds = list(range(30))
    else:
        job["corpus"] = _load(config, "corpus")
        default_seeds = [0] if command == "train" else list(range(5))
    seeds = _seeds(config, args.seed, default_seeds)
    cfg = _experiment_config(config, seeds)
    if command == "train" and len(cfg.models) != 1:
        raise ConfigError("train builds exactly one model (model.name)")
    if command == "train" and len(cfg.seeds) != 1:
        raise ConfigError("train uses a single seed")
    corpora = [job[k] for k in ("corpus", "train", "test") if k in job]
    for c in corpora:
        if "mtl" in cfg.models:
            _check_attrs(c, [cfg.aux_attr], "model.aux_attr")
        _check_attrs(c, cfg.group_attrs, "experiment.group_attrs")
        if cfg.arch is not None and cfg.arch.n_mel != c.utterances[0].n_mel:
            raise ConfigError(f"model.architecture.n_mel={cfg.arch.n_mel} but {c.name} has "
                              f"{c.utterances[0].n_mel} mel coefficients")
    if command == "eval-cross":
        try:
            check_compatible(job["train"], job["test"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if command == "eval-loso" and len(set(job["corpus"].speakers)) < 2:
        raise ConfigError("eval-loso needs at least 2 speakers")
    job["config"] = cfg
    return job


def _check_dims(model, corpus):
    base = model.base if isinstance(model, NhnnModel) else model
    n_mel = corpus.utterances[0].n_mel
    if base.arch.n_mel != n_mel:
        raise ConfigError(f"checkpoint expects n_mel={base.arch.n_mel}, corpus has {n_mel}")
    if isinstance(model, NhnnModel):
        d = corpus.utterances[0].summary_features.size
        if model.dpgmm.n_features != d:
            raise ConfigError(f"checkpoint expects d_s={model.dpgmm.n_features}, corpus has {d}")


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model, directory: Path, meta: dict):
    if isinstance(model, NhnnModel):
        save_nhnn(model, directory, {"kind": f"nhnn_{model.variant.value}", **meta})
    else:
        save_dcnn(model, directory, meta)


def load_checkpoint(directory: Path):
    with open(directory / "metadata.json") as fh:
        kind = json.load(fh).get("kind")
    if kind in ("dcnn", "mtl"):
        return load_dcnn(directory)
    if kind in ("nhnn_fc", "nhnn_fc_conv"):
        return load_nhnn(directory)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


# --------------------------------------------------------------------------
# Commands


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def cmd_synth(job) -> int:
    corpus = generate_synthetic(job["spec"])
    save_corpus(corpus, job["out"] / "corpus")
    labels = corpus.labels
    counts = {LabelBin(k).name: int((labels == k).sum()) for k in range(3)}
    print(f"{len(corpus)} utterances, {len(set(corpus.speakers))} speakers, labels {counts}")
    print(f"wrote {job['out'] / 'corpus' / 'manifest.json'}")
    return EXIT_OK


def _save_scaler(scaler: SummaryScaler, path: Path):
    _write(path, json.dumps({"mean": [repr(float(x)) for x in scaler.mean],
                             "std": [repr(float(x)) for x in scaler.std]}, indent=1) + "\n")


def _load_scaler(path: Path) -> SummaryScaler:
    with open(path) as fh:
        d = json.load(fh)
    return SummaryScaler(np.array([float(x) for x in d["mean"]]),
                         np.array([float(x) for x in d["std"]]))


def cmd_cluster(job) -> int:
    corpus = job["corpus"]
    out = job["out"]
    if "load" in job:
        model = dp.load_model(job["load"] / "dpgmm.json")
        scaler = _load_scaler(job["load"] / "summary_scaler.json")
        unpruned_path = job["load"] / "dpgmm_unpruned.json"
        unpruned = dp.load_model(unpruned_path) if unpruned_path.is_file() else model
        Z = scaler.transform(corpus.summary_matrix())
        assign = dp.hard_assign(model, Z)
        initial = dp.hard_assign(unpruned, Z)
    else:
        fit = fit_summary_clusters(corpus, seed=job["seed"], **job["dpgmm"])
        model, unpruned, scaler = fit.model, fit.unpruned, fit.scaler
        assign, initial = fit.assignments, fit.initial_assignments
    active = model.active_indices
    initial_ids = unpruned.active_indices[initial]
    final_ids = active[assign]
    n = len(corpus)
    shares = {int(c): int((initial_ids == c).sum()) / n for c in unpruned.active_indices}
    occupied = {c for c, s in shares.items() if s > 0}
    pruned = sorted(occupied - set(active.tolist()))
    moved = {}
    for c in pruned:
        dest = final_ids[initial_ids == c]
        moved[str(c)] = {str(int(k)): int((dest == k).sum()) for k in np.unique(dest)}
    report = {
        "schema_version": 1,
        "corpus": corpus.name,
        "n_utterances": n,
        "effective_k": int(model.n_active),
        "active_components": active.tolist(),
        "weights": {str(int(c)): float(model.weights[c]) for c in active},
        "pre_pruning_shares": {str(c): s for c, s in shares.items()},
        "pruned_components": pruned,
        "n_empty_components": len(shares) - len(occupied),
        "reassigned_counts": moved,
        "cluster_sizes": {str(int(c)): int((final_ids == c).sum()) for c in active},
        "elbo_trace": [float(x) for x in unpruned.elbo_trace],
        "n_iter": int(unpruned.n_iter),
        "converged": bool(unpruned.converged),
        "attribute_ratios": json_safe(cluster_attribute_ratios(corpus, final_ids,
                                                                job["ratio_attrs"])),
    }
    (out / "model").mkdir(parents=True, exist_ok=True)
    dp.save_model(model, out / "model" / "dpgmm.json")
    dp.save_model(unpruned, out / "model" / "dpgmm_unpruned.json")
    _save_scaler(scaler, out / "model" / "summary_scaler.json")
    rows = [["id", "speaker_id", "cluster", "initial_component"]]
    rows += [[u.id, u.speaker_id, int(c), int(i)]
             for u, c, i in zip(corpus.utterances, final_ids, initial_ids)]
    (out / "reports").mkdir(parents=True, exist_ok=True)
    with open(out / "reports" / "assignments.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    _write(out / "reports" / "cluster.json", dumps_report(report))
    _write(out / "reports" / "cluster.txt", _format_cluster(report))
    print(_format_cluster(report), end="")
    return EXIT_OK


def _format_cluster(report) -> str:
    rows = []
    ratios = report["attribute_ratios"]
    names = sorted(k for k in ratios["overall"] if k.endswith("_ratio"))
    for c in report["active_components"]:
        r = ratios["clusters"].get(str(c), {})
        rows.append([str(c), report["weights"][str(c)], report["cluster_sizes"][str(c)]]
                    + [r.get(k, {}).get("value", "") for k in names]
                    + [r.get("subject_dispersion", {}).get("value", "")])
    o = ratios["overall"]
    rows.append(["all", 1.0, report["n_utterances"]] + [o[k]["value"] for k in names]
                + [o["subject_dispersion"]["value"]])
    head = (f"effective k = {report['effective_k']} "
            f"(pruned: {report['pruned_components'] or 'none'}), "
            f"{report['n_iter']} iterations, final ELBO {report['elbo_trace'][-1]:.6g}\n\n")
    return head + format_table(rows, ["cluster", "weight", "n"] + names + ["subject max/min"])


def cmd_train(job) -> int:
    cfg = job["config"]
    seed = cfg.seeds[0]
    models, info = train_models(job["corpus"], cfg, seed)
    name = cfg.models[0]
    model = models[name]
    meta = {"seed": seed, "corpus": job["corpus"].name, "experiment": cfg.to_dict()}
    save_checkpoint(model, job["out"] / "model", meta)
    report = {"schema_version": 1, "model": name, "seed": seed, **info}
    if isinstance(model, NhnnModel):
        report["head_logs"] = model.head_logs
    _write(job["out"] / "reports" / "train.json", json.dumps(report, indent=1, sort_keys=True)
           + "\n")
    print(f"trained {name} on {len(job['corpus'])} utterances; checkpoint in "
          f"{job['out'] / 'model'}")
    return EXIT_OK


def cmd_eval_loso(job, jobs=1) -> int:
    result = run_within_corpus(job["corpus"], job["config"], jobs=jobs)
    report = within_report(result)
    _write(job["out"] / "reports" / "loso.json", dumps_report(report))
    text = format_report(report)
    _write(job["out"] / "reports" / "loso.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_eval_cross(job, jobs=1) -> int:
    result = run_cross_corpus(job["train"], job["test"], job["config"], jobs=jobs)
    report = cross_report(result)
    _write(job["out"] / "reports" / "cross.json", dumps_report(report))
    text = format_report(report)
    _write(job["out"] / "reports" / "cross.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(job) -> int:
    model = job["model"]
    corpus = job["corpus"]
    probs = model.predict_proba(corpus.utterances)
    labels = np.argmax(probs, axis=1)
    items = [{"id": u.id, "probabilities": p.tolist(), "label": LabelBin(int(k)).name}
             for u, p, k in zip(corpus.utterances, probs, labels)]
    _write(job["out"] / "reports" / "predictions.json",
           dumps_report({"schema_version": 1, "predictions": items}))
    for it in items:
        print(it["id"], " ".join(f"{p:.4f}" for p in it["probabilities"]), it["label"])
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "cluster": cmd_cluster, "train": cmd_train,
            "eval-loso": cmd_eval_loso, "eval-cross": cmd_eval_cross, "predict": cmd_predict}


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nhnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed(s)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def _setup_logging(log_file: Path | None):
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    root = logging.getLogger()
    root.setLevel(getattr(logging, level, logging.WARNING))
    for h in list(root.handlers):
        if getattr(h, "_nhnn", False):
            root.removeHandler(h)
            h.close()
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w"))
    for h in handlers:
        h._nhnn = True
        h.setFormatter(fmt)
        root.addHandler(h)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(None)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        job = validate(args.command, config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        _setup_logging(job["out"] / "logs" / f"{args.command}.log")
        fn = COMMANDS[args.command]
        if args.command in ("eval-loso", "eval-cross"):
            return fn(job, jobs=args.jobs)
        return fn(job)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.exception("%s failed", args.command)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
