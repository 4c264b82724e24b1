"""Run configuration, LR resolution, comparison/ablation harness and reports.

A run config is a nested mapping (YAML on disk)::

    seed: 0
    dataset: noisy5            # bundled name or URI (synthetic:, csv:, idx:)
    train_fraction: 0.8
    model: {kind: mlp, hidden: 32, channels: 4}
    lr:    {source: fixed, value: 0.013, low: null, high: null, step: null, ...}
    train: {...TrainLoopConfig fields, policy: {...AugPolicy fields}}

Unknown keys anywhere are errors.  ``low``/``high``/``step`` left null take
the model's search profile.
"""
from __future__ import annotations

import copy
import dataclasses
import datetime as _dt
import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
from urllib.parse import parse_qsl

import jsonschema
import numpy as np
import yaml

from . import search
from .augment import AugPolicy
from .control import Learner, ModelSpec, TrainLoopConfig, TrainReport, make_trial_runner, run_training
from .dataio import LabeledDataset, parse_dataset_uri, stratified_split
from .evaluation import aggregate
from .search import LrBounds

SCHEMA_VERSION = "1.0"
LR_SOURCES = ("fixed", "fastai", "fastai_pretrain", "grid", "tpe")

# desk-scale stand-ins for a multi-dataset benchmark; the run seed generates the data
BUNDLED_DATASETS = {
    "noisy5": "synthetic:noisy_blobs?C=5&dims=8&n=300&difficulty=0.6&noise=0.1",
    "blobs4": "synthetic:gaussian_blobs?C=4&dims=6&n=300&difficulty=0.5",
    "blobs3": "synthetic:gaussian_blobs?C=3&dims=2&n=300&difficulty=0.6",
    "noisy8": "synthetic:noisy_blobs?C=8&dims=10&n=300&difficulty=0.7&noise=0.2",
    "blobs10": "synthetic:gaussian_blobs?C=10&dims=16&n=300&difficulty=0.8",
}

PROFILES = {"mlp": search.MLP_BOUNDS, "cnn": search.MLP_BOUNDS, "softmax": search.SOFTMAX_BOUNDS}


class ConfigError(ValueError):
    """Invalid run configuration; ``keys`` lists the offending dotted keys."""

    def __init__(self, message: str, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class LrSource:
    source: str = "fixed"
    value: float = 0.013
    low: Optional[float] = None
    high: Optional[float] = None
    step: Optional[float] = None
    trials: int = 15
    epochs_per_trial: int = 6
    grid_points: int = 10
    grid_epochs: int = 9
    pretrain_lr: Optional[float] = None
    range_iterations: int = 100

    def __post_init__(self):
        if self.source not in LR_SOURCES:
            raise ConfigError(f"lr.source must be one of {LR_SOURCES}", ["lr.source"])
        if not self.value > 0:
            raise ConfigError("lr.value must be > 0", ["lr.value"])

    def bounds(self, model_kind: str) -> LrBounds:
        base = PROFILES.get(model_kind, search.MLP_BOUNDS)
        return LrBounds(self.low if self.low is not None else base.low,
                        self.high if self.high is not None else base.high,
                        self.step if self.step is not None else base.discrete_step)


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "noisy5"
    train_fraction: float = 0.8
    model: ModelSpec = field(default_factory=ModelSpec)
    lr: LrSource = field(default_factory=LrSource)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": self.dataset,
            "train_fraction": self.train_fraction,
            "model": dataclasses.asdict(self.model),
            "lr": dataclasses.asdict(self.lr),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "RunConfig":
        data = copy.deepcopy(data or {})
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        bad = _unknown_keys(data)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}", bad)
        sections = {}
        for name, typ in (("model", ModelSpec), ("lr", LrSource)):
            try:
                sections[name] = typ(**(data.get(name) or {}))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}", [name]) from exc
        train_section = dict(data.get("train") or {})
        try:
            if "policy" in train_section:
                train_section["policy"] = AugPolicy(**(train_section["policy"] or {}))
            sections["train"] = TrainLoopConfig(**train_section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}", ["train"]) from exc
        if sections["model"].kind not in PROFILES:
            raise ConfigError(f"model.kind must be one of {sorted(PROFILES)}", ["model.kind"])
        cfg = cls(seed=int(data.get("seed", 0)), dataset=str(data.get("dataset", "noisy5")),
                  train_fraction=float(data.get("train_fraction", 0.8)), **sections)
        if not 0 < cfg.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)", ["train_fraction"])
        _check_dataset_ref(cfg.dataset)
        return cfg


def _field_names(typ) -> set:
    return {f.name for f in dataclasses.fields(typ)}


_SCHEMA_KEYS = {
    "": {"seed", "dataset", "train_fraction", "model", "lr", "train"},
    "model": _field_names(ModelSpec),
    "lr": _field_names(LrSource),
    "train": _field_names(TrainLoopConfig),
    "train.policy": _field_names(AugPolicy),
}


def _unknown_keys(data: dict, prefix: str = "") -> List[str]:
    bad = []
    allowed = _SCHEMA_KEYS[prefix]
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in allowed:
            bad.append(dotted)
        elif dotted in _SCHEMA_KEYS:
            if value is None:
                continue
            if not isinstance(value, dict):
                bad.append(dotted)
            else:
                bad.extend(_unknown_keys(value, dotted))
    return bad


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[0-9][0-9_]*[eE][-+]?[0-9]+|\.inf|\.Inf|\.INF|\.nan|\.NaN|\.NAN)$""", re.X),
    list("-+0123456789."))


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)


def _check_dataset_ref(ref: str) -> None:
    if ref in BUNDLED_DATASETS or ref.startswith("synthetic:"):
        return
    if ref.startswith("idx:"):
        paths = ref[4:].split(",")
    elif ref.startswith("csv:"):
        paths = [ref[4:]]
    else:
        paths = [ref]
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"dataset file(s) not found: {', '.join(missing)}", ["dataset"])


def apply_override(data: dict, assignment: str) -> dict:
    """Set ``a.b.c=value`` in a raw config mapping; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {assignment!r}", [assignment])
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {part!r} for override {key}", [key])
    node[parts[-1]] = _yaml_load(raw) if raw.strip() else None
    return data


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                base: Optional[dict] = None) -> RunConfig:
    data = copy.deepcopy(base) if base else {}
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = _yaml_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        _deep_update(data, loaded)
    for item in overrides:
        apply_override(data, item)
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def _deep_update(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = copy.deepcopy(v)
    return dst


# arm presets (overlays on a base config)
BASELINE_PRESET = {
    "lr": {"source": "fixed", "value": 0.013},
    "train": {"schedule_kind": "cosine", "max_epochs": 200, "warmup_epochs": 0, "augment": "basic",
              "optimizer": "sgd", "nbd": False, "loss_kind": "ce"},
}
ADAPTIVE_PRESET = {
    "lr": {"source": "tpe"},
    "train": {"schedule_kind": "plateau_v2", "max_epochs": 200, "augment": "augmix",
              "optimizer": "sam", "nbd": True, "loss_kind": "dml_pair", "dml_slow_loss": "am_softmax"},
}
PRESETS = {"baseline": BASELINE_PRESET, "adaptive": ADAPTIVE_PRESET}


# ---------------------------------------------------------------- data


def load_dataset(ref: str, seed: int) -> LabeledDataset:
    """Bundled name or URI.  Synthetic URIs without ``seed`` use the run seed."""
    uri = BUNDLED_DATASETS.get(ref, ref)
    if uri.startswith("synthetic:"):
        query = uri.partition("?")[2]
        if "seed" not in dict(parse_qsl(query)):
            uri = f"{uri}{'&' if query else '?'}seed={seed}"
    ds = parse_dataset_uri(uri)
    ds.name = ref
    return ds


def split_for(cfg: RunConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    return stratified_split(load_dataset(cfg.dataset, cfg.seed), cfg.train_fraction, cfg.seed)


# ---------------------------------------------------------------- LR resolution


@dataclass
class LrResolution:
    lr: float
    source: str
    bounds: Optional[LrBounds] = None
    history: Optional[search.StudyHistory] = None
    curve: Optional[search.LrCurve] = None
    warning: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"source": self.source, "chosen": self.lr, "warning": self.warning,
             "bounds": dataclasses.asdict(self.bounds) if self.bounds else None}
        if self.history is not None:
            d["trials"] = len(self.history.trials)
            d["epochs_consumed"] = self.history.epochs_consumed()
        if self.curve is not None:
            d["curve"] = {"lrs": self.curve.lrs, "losses": self.curve.losses,
                          "aborted_at": self.curve.aborted_at}
        return d


def resolve_lr(cfg: RunConfig, train_ds: LabeledDataset, val_ds: LabeledDataset,
               source: Optional[str] = None) -> LrResolution:
    source = source or cfg.lr.source
    if source == "fixed":
        return LrResolution(cfg.lr.value, source)
    bounds = cfg.lr.bounds(cfg.model.kind)
    if source in ("fastai", "fastai_pretrain"):
        learner = Learner(train_ds, val_ds, cfg.train, cfg.seed, cfg.model)
        if source == "fastai":
            curve = search.lr_range_test(learner, iterations=cfg.lr.range_iterations)
        else:
            _, curve = search.estimate_lr_with_pretrain(learner, cfg.lr.pretrain_lr, bounds,
                                                        iterations=cfg.lr.range_iterations,
                                                        return_curve=True)
        lr = bounds.clamp(search.propose_lr_fastai(curve))
        return LrResolution(lr, source, bounds, curve=curve)
    runner = make_trial_runner(train_ds, val_ds, cfg.train, cfg.model)
    if source == "grid":
        lr, trials = search.grid_search_lr(runner, bounds, cfg.lr.grid_points, cfg.lr.grid_epochs, cfg.seed)
        return LrResolution(lr, source, bounds, history=search.StudyHistory(trials))
    res = search.tpe_search(runner, bounds, cfg.lr.trials, cfg.lr.epochs_per_trial, cfg.seed)
    return LrResolution(res.best_lr, source, bounds, history=res.history, warning=res.warning)


# ---------------------------------------------------------------- runs


@dataclass
class RunOutcome:
    config: RunConfig
    lr: LrResolution
    reports: List[TrainReport]
    learner: Learner

    @property
    def diverged(self) -> bool:
        return any(r.diverged for r in self.reports)


def run(cfg: RunConfig) -> RunOutcome:
    """Resolve the LR, then train with it."""
    train_ds, val_ds = split_for(cfg)
    lr = resolve_lr(cfg, train_ds, val_ds)
    train_cfg = cfg.train.replace(initial_lr=lr.lr) if lr.lr != cfg.train.initial_lr else cfg.train
    learner = Learner(train_ds, val_ds, train_cfg, cfg.seed, cfg.model)
    result = run_training(learner, cfg.seed)
    reports = list(result) if isinstance(result, tuple) else [result]
    for r in reports:
        r.chosen_lr = lr.lr
    return RunOutcome(cfg, lr, reports, learner)


def _summary(outcome: RunOutcome) -> dict:
    fast = outcome.reports[0]
    final = fast.final.to_dict() if fast.final else None
    if final:
        final.pop("histogram", None)
    return {"status": "diverged" if outcome.diverged else "ok", "chosen_lr": outcome.lr.lr,
            "epochs_run": fast.epochs_run, "stop_reason": fast.stop_reason, "final": final}


def _cell(cfg: RunConfig) -> dict:
    try:
        return _summary(run(cfg))
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "chosen_lr": None,
                "epochs_run": 0, "stop_reason": None, "final": None}


def thread_count() -> int:
    raw = os.environ.get("ADAPTUNE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADAPTUNE_THREADS must be an integer, got {raw!r}", ["ADAPTUNE_THREADS"])
    return max(1, n)


def _run_cells(jobs: List[Tuple[dict, RunConfig]]) -> List[dict]:
    threads = thread_count()
    if threads == 1:
        cells = [_cell(cfg) for _, cfg in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell, [cfg for _, cfg in jobs]))
    return [dict(key, **cell) for (key, _), cell in zip(jobs, cells)]


def _with(cfg: RunConfig, **changes) -> RunConfig:
    d = cfg.to_dict()
    for key, value in changes.items():
        apply_override(d, f"{key}={json.dumps(value)}")
    if "train.initial_lr" in changes and "train.min_lr" not in changes:
        d["train"]["min_lr"] = None
    return RunConfig.from_dict(d)


def _table_row(name: str, cells: List[dict], datasets: Sequence[str]) -> dict:
    """Average over seeds within each dataset, then over datasets."""
    per_dataset = []
    for ds in datasets:
        ok = [c["final"] for c in cells if c["dataset"] == ds and c["status"] == "ok" and c["final"]]
        if ok:
            per_dataset.append({k: float(np.mean([f[k] for f in ok])) for k in ("top1", "top5", "map", "epochs")})
    row = {"name": name, "n_runs": len(cells), "n_failed": sum(c["status"] != "ok" for c in cells)}
    agg = aggregate(per_dataset) if per_dataset else {}
    for k in ("top1", "top5", "map", "epochs"):
        row[k] = agg.get(k)
    return row


def compare(baseline: RunConfig, adaptive: RunConfig, datasets: Sequence[str], seeds: Sequence[int]) -> dict:
    """Both arms on every dataset x seed; Table-style rows plus epoch savings."""
    jobs = []
    for arm, base in (("baseline", baseline), ("adaptive", adaptive)):
        for ds in datasets:
            for seed in seeds:
                jobs.append(({"arm": arm, "dataset": ds, "seed": int(seed)}, _with(base, dataset=ds, seed=int(seed))))
    cells = _run_cells(jobs)
    rows = [_table_row(arm, [c for c in cells if c["arm"] == arm], datasets) for arm in ("baseline", "adaptive")]
    b, a = rows[0]["epochs"], rows[1]["epochs"]
    savings = a / b if a is not None and b else None
    return {"command": "compare", "datasets": list(datasets), "seeds": [int(s) for s in seeds],
            "arms": {"baseline": baseline.to_dict(), "adaptive": adaptive.to_dict()},
            "runs": cells, "table": rows, "epoch_ratio": savings}


def ablation_arms(full: RunConfig) -> List[Tuple[str, Optional[dict]]]:
    """(row name, overrides) per removed component; None marks "not applicable"."""
    t = full.train
    arms: List[Tuple[str, Optional[dict]]] = [("full", {})]
    arms.append(("w/o SAM", {"train.optimizer": "sgd"} if t.optimizer == "sam" else None))
    arms.append(("w/o mutual learning", {"train.loss_kind": "ce"} if t.loss_kind == "dml_pair" else None))
    no_augmix = "basic" if t.augment == "augmix" else t.augment.replace("augmix+", "")
    arms.append(("w/o AugMix", {"train.augment": no_augmix} if "augmix" in t.augment else None))
    arms.append(("w/o NBD", {"train.nbd": False} if t.nbd else None))
    if t.loss_kind == "dml_pair" and t.dml_slow_loss == "am_softmax":
        arms.append(("w/o AM-Softmax", {"train.dml_slow_loss": "ce"}))
    elif t.loss_kind == "am_softmax":
        arms.append(("w/o AM-Softmax", {"train.loss_kind": "ce"}))
    else:
        arms.append(("w/o AM-Softmax", None))
    adaptive_lr = full.lr.source != "fixed" or t.schedule_kind == "plateau_v2"
    arms.append(("w/o adaptive lr", {"lr.source": "fixed", "train.schedule_kind": "cosine",
                                     "train.warmup_epochs": 0} if adaptive_lr else None))
    return arms


def ablate(full: RunConfig, datasets: Sequence[str], seeds: Sequence[int]) -> dict:
    arms = ablation_arms(full)
    jobs = []
    for name, changes in arms:
        if changes is None:
            continue
        arm_cfg = _with(full, **changes)
        for ds in datasets:
            for seed in seeds:
                jobs.append(({"arm": name, "dataset": ds, "seed": int(seed)}, _with(arm_cfg, dataset=ds, seed=int(seed))))
    cells = _run_cells(jobs)
    rows = []
    for name, changes in arms:
        if changes is None:
            rows.append({"name": name, "applicable": False, "overrides": None, "n_runs": 0, "n_failed": 0,
                         "top1": None, "top5": None, "map": None, "epochs": None})
            continue
        row = _table_row(name, [c for c in cells if c["arm"] == name], datasets)
        row.update(applicable=True, overrides=changes)
        rows.append(row)
    return {"command": "ablate", "datasets": list(datasets), "seeds": [int(s) for s in seeds],
            "arms": {"full": full.to_dict()}, "runs": cells, "table": rows}


# ---------------------------------------------------------------- reports


def _clean(obj: Any) -> Any:
    """JSON-safe copy: tuples to lists, numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def report_schema() -> dict:
    text = resources.files("adaptune").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def finalize_report(body: dict, timestamp: Optional[str] = None) -> dict:
    report = {"schema_version": SCHEMA_VERSION,
              "generated_at": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    report.update(_clean(body))
    jsonschema.validate(report, report_schema())
    return report


def write_report(path, body: dict, timestamp: Optional[str] = None) -> dict:
    report = finalize_report(body, timestamp)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return report
