"""Command line entry point.

    adaptune train    --config run.yaml --out runs/a --override train.max_epochs=50
    adaptune lr-find  tpe --config run.yaml --out runs/lr
    adaptune eval     --config run.yaml --weights runs/a/weights.bin --out runs/a-eval
    adaptune compare  --datasets noisy5,blobs4 --seeds 1,2,3 --out runs/cmp
    adaptune ablate   --config adaptive.yaml --out runs/abl
    adaptune gen-data noisy5 --seed 3 --format csv --out data/

Exit codes: 0 ok, 2 usage/config error, 3 training diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import experiment as ex
from .control import Learner
from .dataio import DatasetError, write_csv, write_idx
from .evaluation import evaluate, write_ranks_csv
from .modelcore import load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
LR_METHODS = {"fastai": "fastai", "fastai-pretrain": "fastai_pretrain", "grid": "grid", "tpe": "tpe"}

log = logging.getLogger("adaptune")


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run config")
    p.add_argument("--preset", choices=sorted(ex.PRESETS), help="start from a built-in arm preset")
    if seed:
        p.add_argument("--seed", type=int, metavar="N", help="overrides the config seed")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. train.max_epochs=50)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptune", description="Adaptive training for small classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="resolve the LR, train, write report and weights")
    _common(p)
    p.add_argument("--ranks", action="store_true", help="also write per-sample ranks.csv")

    p = sub.add_parser("lr-find", help="estimate the initial learning rate only")
    p.add_argument("method", nargs="?", choices=sorted(LR_METHODS), help="defaults to lr.source")
    _common(p)

    p = sub.add_parser("eval", help="evaluate saved weights on the validation split")
    _common(p)
    p.add_argument("--weights", required=True, metavar="PATH")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--ranks", action="store_true")

    p = sub.add_parser("compare", help="baseline vs adaptive arms over datasets x seeds")
    _common(p, seed=False)
    p.add_argument("--baseline", metavar="PATH", help="baseline arm config (default: baseline preset)")
    p.add_argument("--datasets", default=",".join(ex.BUNDLED_DATASETS))
    p.add_argument("--seeds", default="1,2,3")

    p = sub.add_parser("ablate", help="drop one component at a time from the full config")
    _common(p, seed=False)
    p.add_argument("--datasets", default=",".join(ex.BUNDLED_DATASETS))
    p.add_argument("--seeds", default="1,2,3")

    p = sub.add_parser("gen-data", help="materialize a bundled or synthetic dataset")
    p.add_argument("dataset", help="bundled name or synthetic: URI")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--format", choices=("csv", "idx"), default="csv")
    p.add_argument("--out", metavar="DIR", default=".")
    return parser


def _config(args, base_preset: Optional[str] = None) -> ex.RunConfig:
    preset = getattr(args, "preset", None) or base_preset
    base = ex.PRESETS.get(preset) if preset else None
    overrides = list(args.override)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return ex.load_config(args.config, overrides, base=base)


def _int_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ex.ConfigError(f"--seeds must be comma-separated integers, got {text!r}", ["--seeds"])


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    outcome = ex.run(cfg)
    outputs = {"weights": "weights.bin", "weights_slow": None, "trials": None, "ranks": None}
    save_weights(outcome.learner.models[0].params, out / "weights.bin")
    if len(outcome.learner.models) > 1:
        save_weights(outcome.learner.models[1].params, out / "weights_slow.bin")
        outputs["weights_slow"] = "weights_slow.bin"
    if outcome.lr.history is not None:
        outcome.lr.history.write_jsonl(out / "trials.jsonl")
        outputs["trials"] = "trials.jsonl"
    if args.ranks:
        val = outcome.learner.val_ds
        write_ranks_csv(out / "ranks.csv", outcome.learner.probabilities(0, val.features), val.labels)
        outputs["ranks"] = "ranks.csv"
    body = {"command": "train", "config": cfg.to_dict(), "lr": outcome.lr.to_dict(),
            "result": {"students": [r.to_dict() for r in outcome.reports]}, "outputs": outputs}
    ex.write_report(out / "report.json", body)
    fast = outcome.reports[0]
    if fast.final is not None:
        print(f"lr={outcome.lr.lr:g} epochs={fast.epochs_run} stop={fast.stop_reason} "
              f"top1={100 * fast.final.top1:.2f} top5={100 * fast.final.top5:.2f} mAP={100 * fast.final.map:.2f}")
    if outcome.diverged:
        print(f"training diverged at epoch {fast.epochs_run - 1}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_lr_find(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    source = LR_METHODS[args.method] if args.method else cfg.lr.source
    if source == "fixed":
        raise ex.ConfigError("lr-find needs a method (fastai, fastai-pretrain, grid, tpe) or a non-fixed lr.source",
                             ["lr.source"])
    train_ds, val_ds = ex.split_for(cfg)
    res = ex.resolve_lr(cfg, train_ds, val_ds, source)
    outputs = {"trials": None}
    if res.history is not None:
        res.history.write_jsonl(out / "trials.jsonl")
        outputs["trials"] = "trials.jsonl"
    ex.write_report(out / "report.json", {"command": "lr-find", "config": cfg.to_dict(),
                                          "lr": res.to_dict(), "outputs": outputs})
    print(f"{source}: lr={res.lr:g}" + (f" ({res.warning})" if res.warning else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    train_ds, val_ds = ex.split_for(cfg)
    learner = Learner(train_ds, val_ds, cfg.train, cfg.seed, cfg.model)
    learner.models[0].params.load_state(load_weights(args.weights).state())
    if args.split == "val":
        ds = val_ds
    elif args.split == "train":
        ds = train_ds
    else:
        ds = ex.load_dataset(cfg.dataset, cfg.seed)
    probs = learner.probabilities(0, ds.features)
    metrics = evaluate(probs, ds.labels)
    outputs = {"ranks": None}
    if args.ranks:
        write_ranks_csv(out / "ranks.csv", probs, ds.labels)
        outputs["ranks"] = "ranks.csv"
    ex.write_report(out / "report.json", {"command": "eval", "config": cfg.to_dict(), "split": args.split,
                                          "metrics": metrics.to_dict(), "outputs": outputs})
    print(f"top1={100 * metrics.top1:.2f} top5={100 * metrics.top5:.2f} mAP={100 * metrics.map:.2f} "
          f"n={metrics.n_samples}")
    return EXIT_OK


def _print_table(rows) -> None:
    print(f"{'arm':<22}{'top-1':>8}{'top-5':>8}{'mAP':>8}{'epochs':>8}")
    for r in rows:
        cells = [f"{100 * r[k]:8.2f}" if r[k] is not None else f"{'-':>8}" for k in ("top1", "top5", "map")]
        epochs = f"{r['epochs']:8.1f}" if r["epochs"] is not None else f"{'-':>8}"
        print(f"{r['name']:<22}{''.join(cells)}{epochs}")


def cmd_compare(args) -> int:
    adaptive = _config(args, base_preset="adaptive")
    baseline = ex.load_config(args.baseline, [], base=ex.BASELINE_PRESET)
    datasets = [d for d in args.datasets.split(",") if d]
    for d in datasets:
        ex._check_dataset_ref(d)
    out = _outdir(args)
    body = ex.compare(baseline, adaptive, datasets, _int_list(args.seeds))
    ex.write_report(out / "report.json", body)
    _print_table(body["table"])
    if body["epoch_ratio"] is not None:
        print(f"adaptive/baseline epochs: {body['epoch_ratio']:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    full = _config(args, base_preset="adaptive")
    datasets = [d for d in args.datasets.split(",") if d]
    for d in datasets:
        ex._check_dataset_ref(d)
    out = _outdir(args)
    body = ex.ablate(full, datasets, _int_list(args.seeds))
    ex.write_report(out / "report.json", body)
    _print_table(body["table"])
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ex._check_dataset_ref(args.dataset)
    ds = ex.load_dataset(args.dataset, args.seed)
    out = _outdir(args)
    stem = args.dataset if args.dataset in ex.BUNDLED_DATASETS else "dataset"
    if args.format == "csv":
        write_csv(ds, out / f"{stem}.csv")
        outputs = {"csv": f"{stem}.csv"}
    else:
        feats = ds.features
        if feats.ndim == 4 and feats.shape[1] == 1:
            feats = feats[:, 0]
        if feats.ndim != 3:
            raise DatasetError("IDX output needs single-channel image data (use image=SIDE in the URI)")
        lo, hi = float(feats.min()), float(feats.max())
        scaled = (feats - lo) / (hi - lo) if hi > lo else np.zeros_like(feats)
        write_idx(scaled, ds.labels, out / f"{stem}-images.idx", out / f"{stem}-labels.idx")
        outputs = {"images": f"{stem}-images.idx", "labels": f"{stem}-labels.idx"}
    info = {"name": args.dataset, "uri": ex.BUNDLED_DATASETS.get(args.dataset, args.dataset), "seed": args.seed,
            "n_samples": len(ds), "class_count": ds.class_count, "sample_shape": list(ds.sample_shape)}
    ex.write_report(out / "report.json", {"command": "gen-data", "dataset": info, "outputs": outputs})
    print(f"wrote {len(ds)} samples ({ds.class_count} classes) to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "lr-find": cmd_lr_find, "eval": cmd_eval, "compare": cmd_compare,
            "ablate": cmd_ablate, "gen-data": cmd_gen_data}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ex.ConfigError as exc:
        keys = f" [keys: {', '.join(exc.keys)}]" if exc.keys else ""
        print(f"adaptune {args.command}: config error: {exc}{keys}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"adaptune {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
