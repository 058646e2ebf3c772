"""Command line entry point: one subcommand per experiment step.

Every subcommand takes ``--config FILE`` and ``--out DIR``. Exit status is 0
on success, 2 when the configuration does not validate and 1 when the run
itself fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import ImageDataset, write_idx
from .errors import ConfigError, ExperimentFailed
from .meta import save_meta
from .report import (
    _jsonable,
    _write_csv,
    load_data,
    run_experiment,
    summarize_runs,
    train_meta_from_config,
    train_shadow_corpus,
    validate_config,
)
from .shadows import save_collection

EXPERIMENT_COMMANDS = {
    "attack": "attack_baseline",
    "unlearn": "unlearn_single",
    "unlearn-iter": "unlearn_iterative",
    "unlearn-multi": "unlearn_multi",
    "preprocess": "preprocess_defense",
    "tsne": "tsne",
    "saliency": "saliency",
}
COMMANDS = ("gen-data", "train-shadows", "train-meta", *EXPERIMENT_COMMANDS, "report")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_table(table, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in table.columns])
        for row in table.rows:
            w.writerow([c.categories[int(v)] if c.kind == "categorical" and c.categories else
                        (int(v) if c.kind == "categorical" else repr(float(v)))
                        for c, v in zip(table.columns, row)])


def cmd_gen_data(cfg, out: Path) -> dict:
    data = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(data.pool, ImageDataset):
        write_idx(data.pool, out / "pool-images.idx", out / "pool-labels.idx")
        test = ImageDataset(data.test.features, data.test.labels, data.pool.height, data.pool.width, data.pool.class_count)
        write_idx(test, out / "test-images.idx", out / "test-labels.idx")
    else:
        _write_table(data.pool, out / "pool.csv")
        # the test split is written already encoded (model inputs plus label)
        names = [c.name for i, c in enumerate(data.pool.columns) if i != data.pool.label_column]
        with open(out / "test-encoded.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names + ["label"])
            for x, y in zip(data.test.features, data.test.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y)])
    return {"pool_rows": len(data.pool), "test_rows": len(data.test.labels)}


def cmd_train_shadows(cfg, out: Path) -> dict:
    coll = train_shadow_corpus(cfg)
    save_collection(coll, out / "shadows")
    return {"models": len(coll), "digest": coll.digest()}


def cmd_train_meta(cfg, out: Path) -> dict:
    meta, acc, shadows = train_meta_from_config(cfg)
    save_meta(meta, out / "meta")
    return {"meta_heldout_accuracy": acc, "shadow_digest": shadows.digest()}


def cmd_report(path: Path, out: Path) -> dict:
    """The report config lists existing run directories under ``runs``."""
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([f"config: {exc}"]) from None
    runs = data.get("runs") if isinstance(data, dict) else None
    if not runs:
        raise ConfigError(["runs: need a list of run directories"])
    dirs = [(path.parent / r) if not Path(r).is_absolute() else Path(r) for r in runs]
    missing = [f"runs[{i}]: {str(d)!r} has no report.json" for i, d in enumerate(dirs) if not (d / "report.json").exists()]
    if missing:
        raise ConfigError(missing)
    rows = summarize_runs(dirs)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r})
    _write_csv(out / "summary.csv", [{k: r.get(k) for k in keys} for r in rows])
    _dump(out / "summary.json", rows)
    return {"runs": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="propunlearn", description="Property inference attacks and property unlearning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out: Path = args.out
    try:
        if args.command == "report":
            result = cmd_report(args.config, out)
            print(json.dumps(result, sort_keys=True))
            return 0
        cfg = validate_config(args.config)
        wanted = EXPERIMENT_COMMANDS.get(args.command)
        if wanted is not None and cfg.experiment != wanted:
            raise ConfigError([f"experiment: {args.command!r} runs {wanted!r} configs, got {cfg.experiment!r}"])
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if wanted is not None:
            rep = run_experiment(cfg, out)
            result = {"run_dir": str(rep.run_dir), **{k: v for k, v in rep.aggregates.items()
                                                      if isinstance(v, (int, float, str))}}
        else:
            out.mkdir(parents=True, exist_ok=True)
            result = {"gen-data": cmd_gen_data, "train-shadows": cmd_train_shadows,
                      "train-meta": cmd_train_meta}[args.command](cfg, out)
            _dump(out / f"{args.command}.json", result)
    except ExperimentFailed as exc:
        out.mkdir(parents=True, exist_ok=True)
        if exc.partial is not None:
            (out / "partial_report.json").write_text(exc.partial.to_json(), encoding="utf-8")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit status 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
