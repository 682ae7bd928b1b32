"""Command-line interface: ``tabsynth fit | sample | evaluate | report``.

Every command writes its artifacts plus a ``manifest.json`` into the
directory given by ``--out``. Exit codes: 0 success, 1 runtime failure,
2 usage or validation error. Errors are reported as a single JSON line on
standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, TabsynthError, ValidationError
from .gan import FULL, GENERATOR_ONLY, TrainConfig, generate, load, train
from .harness import StudyConfig, run_study, validate_report_dir, write_report
from .table import Schema, read_csv, write_csv
from .transforms import load_recipe

log = logging.getLogger("tabsynth")

SYNTH_FILE = "synthesizer.synth"
SAMPLE_FILE = "synthetic.csv"


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write_manifest(out: Path, command: str, args, resolved: dict, seeds: dict, timings: dict, artifacts) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_path": getattr(args, "config", None),
        "resolved_config": resolved,
        "seeds": seeds,
        "workers": getattr(args, "workers", 1),
        "artifacts": sorted(artifacts),
        "timings": timings,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_data(args):
    if not Path(args.data).is_file():
        raise ValidationError(f"data file not found: {args.data}")
    try:
        schema = Schema.load(args.schema)
    except OSError as exc:
        raise ConfigError(f"cannot read schema {args.schema}: {exc}") from None
    table = read_csv(args.data, schema, delimiter=args.delimiter)
    if table.rejected:
        log.warning("%d rows rejected while reading %s", table.rejected, args.data)
    return table


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config)
    d = d.get("train", d)
    for key in ("seed", "epochs", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = _read_data(args)
    recipe = load_recipe(args.recipe)
    config = _train_config(args)
    pre = recipe.preprocess(table)
    prior = load(args.resume) if args.resume else None
    if prior is not None and args.config is None:
        config = prior.config.replace(**{k: getattr(args, k) for k in ("seed", "epochs", "threads") if getattr(args, k) is not None})
    synth = train(pre, config, synth=prior)
    mode = GENERATOR_ONLY if args.generator_only else FULL
    synth.save(out / SYNTH_FILE, mode)
    _write_manifest(
        out,
        "fit",
        args,
        {"train": config.to_dict(), "recipe": recipe.to_dict(), "mode": mode, "resumed_from": args.resume},
        {"train": config.seed},
        {"total_seconds": time.perf_counter() - t0},
        [SYNTH_FILE, SYNTH_FILE + ".meta.json", "manifest.json"],
    )
    log.info("wrote %s (%d rows, %d rejected)", out / SYNTH_FILE, len(table), table.rejected)
    return 0


def cmd_sample(args) -> int:
    t0 = time.perf_counter()
    if args.n < 1:
        raise ValidationError("n must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = load(args.synth)
    table = generate(synth, args.n, args.seed)
    recipe = load_recipe(args.recipe) if args.recipe else None
    if recipe is not None:
        table = recipe.postprocess(table)
    write_csv(table, out / SAMPLE_FILE)
    _write_manifest(
        out,
        "sample",
        args,
        {"synth": str(args.synth), "n": args.n, "recipe": recipe.to_dict() if recipe else None},
        {"generate": args.seed},
        {"total_seconds": time.perf_counter() - t0},
        [SAMPLE_FILE, "manifest.json"],
    )
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = _read_data(args)
    d = _load_json(args.config)
    recipe = load_recipe(args.recipe) if args.recipe else None
    if args.folds is not None:
        d["k"] = args.folds
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    if args.epochs is not None:
        d.setdefault("train", {})["epochs"] = args.epochs
    config = StudyConfig.from_dict(d, recipe=recipe)
    report = run_study(table, config)
    write_report(report, out, save_synthesizers=not args.no_synthesizers)
    artifacts = [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    _write_manifest(
        out,
        "evaluate",
        args,
        config.to_dict(),
        {"master": config.seed},
        {
            "total_seconds": time.perf_counter() - t0,
            "folds": {str(f.index): f.timings for f in report.folds},
        },
        artifacts + ["manifest.json"],
    )
    if report.failed:
        log.warning("%d fold(s) failed: %s", len(report.failed), report.failed)
    return 0


def render_report(doc: dict, top: int = 5) -> str:
    lines = []
    label = doc.get("label") or "study"
    lines.append(f"{'dataset':<20} {'mean RMSE (real)':>18} {'mean RMSE (synthetic)':>22} {'relative difference':>20}")

    def fmt(x):
        return "n/a" if x is None else f"{x:.4f}"

    rel = doc["relative_difference"]
    rel_s = "n/a" if rel is None else f"{100 * rel:.2f}%"
    lines.append(f"{label:<20} {fmt(doc['mean_rmse_real']):>18} {fmt(doc['mean_rmse_syn']):>22} {rel_s:>20}")
    n_folds = len(doc["folds"])
    failed = doc["failed_folds"]
    lines.append("")
    lines.append(f"folds: {n_folds - len(failed)} of {n_folds} succeeded")
    if failed:
        lines.append(f"WARNING: {len(failed)} fold{'s' if len(failed) > 1 else ''} failed: {failed}")
        for f in doc["folds"]:
            if not f["ok"]:
                lines.append(f"  fold {f['fold']}: {f['error']}")
    dists = sorted(doc["distributions"].items(), key=lambda kv: -kv[1]["mean"])
    if dists:
        lines.append("")
        lines.append("largest distribution divergences (mean over folds):")
        for name, d in dists[:top]:
            lines.append(f"  {name:<20} {d['statistic']:<14} {d['mean']:.4f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    doc = validate_report_dir(args.study_dir)
    print(render_report(doc, args.top))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabsynth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="input CSV")
        sp.add_argument("--schema", required=True, help="schema JSON")
        sp.add_argument("--delimiter", default=",")

    f = sub.add_parser("fit", help="pre-process data and train a synthesizer")
    data_args(f)
    f.add_argument("--recipe", required=True, help="recipe JSON path or shipped name (tpl, lapse)")
    f.add_argument("--config", help="train config JSON")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int)
    f.add_argument("--epochs", type=int)
    f.add_argument("--threads", type=int)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--generator-only", action="store_true", help="save without the critic")
    f.add_argument("--resume", help="continue training a saved synthesizer")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("sample", help="generate and post-process synthetic rows")
    s.add_argument("--synth", required=True)
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--recipe", help="recipe whose post steps are applied")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="run the cross-validated efficacy study")
    data_args(e)
    e.add_argument("--recipe", help="recipe JSON path or shipped name; overrides the config's recipe")
    e.add_argument("--config", required=True, help="study config JSON")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--folds", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--epochs", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--no-synthesizers", action="store_true", help="do not save per-fold synthesizer files")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="print a study summary")
    r.add_argument("study_dir")
    r.add_argument("--top", type=int, default=5)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        _error(exc, 2)
        return 2
    except TabsynthError as exc:
        _error(exc, 1)
        return 1


def _error(exc: Exception, code: int) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
