"""Command-line interface.

Subcommands: gen, preprocess, train, eval, sweep, report. Every option can
also come from a flat ``key = value`` config file (namespaced keys such as
``train.gamma``); explicit flags win over the file, the file wins over
defaults. Each subcommand prints its resolved configuration before running.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import (
    TrainConfig,
    gamma_curve_csv,
    load_dataset,
    parse_config_file,
    preprocess_record,
    results_csv,
    rows_from_csv,
    run_csv,
    summary_markdown,
    sweep,
    train,
    trajectory_csv,
)
from .imaging import ImagingConfig, lung_masks_volume
from .kds import AreaProfile, kds_select
from .metrics import evaluate, report_text
from .nncore import load_checkpoint, save_checkpoint
from .scanio import load_manifest, read_scan
from .synthgen import GenConfig, generate_dataset


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


REQUIRED = object()


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str = ""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


_LOSS_ALIASES = {"ce": "mt_ce", "mt_ce": "mt_ce", "la": "mt_la", "mt_la": "mt_la"}


def _parse_losses(text: str) -> list[str]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item not in _LOSS_ALIASES:
            raise ValueError(f"unknown loss {item!r} (expected ce or la)")
        out.append(_LOSS_ALIASES[item])
    return out


GEN_OPTS = [
    Opt("out", str, REQUIRED, "output directory"),
    Opt("seed", int, 0),
    Opt("factor", float, 0.1, "scale factor on the full per-source counts"),
    Opt("resolution", int, 64),
    Opt("lesion_delta", float, 0.25),
]

PREPROCESS_OPTS = [
    Opt("manifest", str, REQUIRED),
    Opt("cache", str, REQUIRED, "bundle cache directory"),
    Opt("mask_threshold", float, 0.35),
    Opt("target", int, 64, "output slice resolution"),
    Opt("dump_areas", str, None, "directory for per-scan area/selection CSVs"),
]

TRAIN_OPTS = [
    Opt("manifest", str, REQUIRED),
    Opt("out", str, REQUIRED, "output directory"),
    Opt("loss", str, "bce_only", "bce_only | mt_ce | mt_la"),
    Opt("gamma", float, 0.0),
    Opt("epochs", int, 8),
    Opt("batch_size", int, 10),
    Opt("lr", float, 1e-4),
    Opt("weight_decay", float, 5e-4),
    Opt("seed", int, 0),
    Opt("resolution", int, 64),
    Opt("feature_dim", int, 128),
    Opt("mask_threshold", float, 0.35),
    Opt("decision_threshold", float, 0.5),
    Opt("augment", _parse_bool, True, "on/off"),
    Opt("cache", str, None),
]

EVAL_OPTS = [
    Opt("checkpoint", str, REQUIRED),
    Opt("manifest", str, REQUIRED),
    Opt("split", str, "val"),
    Opt("mask_threshold", float, 0.35),
    Opt("decision_threshold", float, 0.5),
    Opt("cache", str, None),
    Opt("out", str, None, "optional CSV output path"),
]

SWEEP_OPTS = [
    Opt("manifest", str, REQUIRED),
    Opt("out", str, REQUIRED, "output directory"),
    Opt("gammas", _parse_floats, [0.1, 0.2, 0.5, 1.0]),
    Opt("losses", _parse_losses, ["mt_ce", "mt_la"]),
    Opt("seeds", _parse_ints, [0]),
    Opt("epochs", int, 8),
    Opt("batch_size", int, 10),
    Opt("lr", float, 1e-4),
    Opt("weight_decay", float, 5e-4),
    Opt("resolution", int, 64),
    Opt("feature_dim", int, 128),
    Opt("mask_threshold", float, 0.35),
    Opt("decision_threshold", float, 0.5),
    Opt("augment", _parse_bool, True, "on/off"),
    Opt("cache", str, None),
]

REPORT_OPTS = [
    Opt("results", str, REQUIRED, "results CSV from sweep"),
    Opt("out", str, None, "markdown output path (default: stdout)"),
]


def _add_opts(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        parser.add_argument(f"--{opt.name.replace('_', '-')}", dest=opt.name, default=None, help=opt.help)


def _resolve(args: argparse.Namespace, section: str, opts: list[Opt]) -> dict:
    file_cfg: dict[str, str] = {}
    if getattr(args, "config", None):
        file_cfg = parse_config_file(args.config)
    resolved = {}
    for opt in opts:
        raw = getattr(args, opt.name)
        if raw is None:
            raw = file_cfg.get(f"{section}.{opt.name}")
        if raw is None:
            if opt.default is REQUIRED:
                raise UsageError(f"missing required option --{opt.name.replace('_', '-')} (or {section}.{opt.name})")
            resolved[opt.name] = opt.default
        else:
            try:
                resolved[opt.name] = opt.type(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise UsageError(f"bad value for {section}.{opt.name}: {exc}") from exc
    print(f"[{section}] resolved config:")
    for opt in opts:
        print(f"  {section}.{opt.name} = {resolved[opt.name]}")
    return resolved


def _cmd_gen(args) -> int:
    cfg = _resolve(args, "gen", GEN_OPTS)
    gen = GenConfig.from_table(
        factor=cfg["factor"],
        seed=cfg["seed"],
        resolution=cfg["resolution"],
        lesion_intensity_delta=cfg["lesion_delta"],
    )
    manifest = generate_dataset(gen, cfg["out"])
    records = load_manifest(manifest)
    print(f"wrote {len(records)} scans; manifest: {manifest}")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _resolve(args, "preprocess", PREPROCESS_OPTS)
    img = ImagingConfig(threshold=cfg["mask_threshold"], target=cfg["target"])
    manifest_path = Path(cfg["manifest"])
    records = load_manifest(manifest_path)
    cache = Path(cfg["cache"])
    dump_dir = Path(cfg["dump_areas"]) if cfg["dump_areas"] else None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        preprocess_record(rec, manifest_path.parent, img, cache)
        if dump_dir is not None:
            volume = read_scan(manifest_path.parent / rec.path, rec.scan_id, rec.source, rec.label)
            masks = lung_masks_volume(volume.voxels / 65535.0, img.threshold)
            areas = masks.sum(axis=(1, 2))
            usable = np.flatnonzero(areas > 0)
            profile = AreaProfile(areas=areas[usable].astype(np.float64), slice_indices=usable)
            chosen = set(kds_select(profile))
            with open(dump_dir / f"{rec.scan_id}.csv", "w", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["slice_index", "area", "selected"])
                for i, area in enumerate(areas):
                    writer.writerow([i, int(area), int(i in chosen)])
    print(f"preprocessed {len(records)} scans into {cache}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args, "train", TRAIN_OPTS)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(
        manifest=cfg["manifest"],
        loss=cfg["loss"],
        gamma=cfg["gamma"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        resolution=cfg["resolution"],
        feature_dim=cfg["feature_dim"],
        mask_threshold=cfg["mask_threshold"],
        decision_threshold=cfg["decision_threshold"],
        augment=cfg["augment"],
        cache_dir=cfg["cache"],
    )
    result = train(tc)
    (out_dir / "result.csv").write_text(run_csv(result), encoding="utf-8")
    (out_dir / "trajectory.csv").write_text(trajectory_csv(result), encoding="utf-8")
    save_checkpoint(result.best_params, out_dir / "checkpoint.msck")
    print(f"best epoch {result.best_epoch}: F1 {result.best_report.f1:.4f}, final score {result.best_report.final_score:.4f}")
    print(report_text(result.best_report))
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args, "eval", EVAL_OPTS)
    params = load_checkpoint(cfg["checkpoint"])
    img = ImagingConfig(threshold=cfg["mask_threshold"], target=params.config.resolution)
    data = load_dataset(cfg["manifest"], img, cfg["cache"])
    items = data[cfg["split"]]
    if not items:
        raise ValueError(f"no scans in split {cfg['split']!r}")
    report = evaluate(params, items, threshold=cfg["decision_threshold"])
    print(report_text(report))
    if cfg["out"]:
        from .metrics import CSV_COLUMNS, fmt, report_csv_fields

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow(["eval", "", fmt(0.0), "", "ok", ""] + report_csv_fields(report))
        Path(cfg["out"]).write_text(buf.getvalue(), encoding="utf-8")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _resolve(args, "sweep", SWEEP_OPTS)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    base = TrainConfig(
        manifest=cfg["manifest"],
        loss="bce_only",
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        resolution=cfg["resolution"],
        feature_dim=cfg["feature_dim"],
        mask_threshold=cfg["mask_threshold"],
        decision_threshold=cfg["decision_threshold"],
        augment=cfg["augment"],
        cache_dir=cfg["cache"],
    )
    result = sweep(
        base,
        gammas=cfg["gammas"],
        losses=cfg["losses"],
        seeds=cfg["seeds"],
        progress=lambda config_id: print(f"running {config_id} ..."),
    )
    (out_dir / "results.csv").write_text(results_csv(result), encoding="utf-8")
    (out_dir / "summary.md").write_text(summary_markdown(result), encoding="utf-8")
    (out_dir / "gamma_curve.csv").write_text(gamma_curve_csv(result), encoding="utf-8")
    print(f"wrote {len(result.rows)} rows to {out_dir / 'results.csv'}")
    print(summary_markdown(result))
    return 0


def _cmd_report(args) -> int:
    cfg = _resolve(args, "report", REPORT_OPTS)
    text = Path(cfg["results"]).read_text(encoding="utf-8")
    md = summary_markdown(rows_from_csv(text))
    if cfg["out"]:
        Path(cfg["out"]).write_text(md, encoding="utf-8")
        print(f"wrote {cfg['out']}")
    else:
        print(md)
    return 0


_COMMANDS = {
    "gen": (_cmd_gen, GEN_OPTS, "generate a synthetic multi-source dataset"),
    "preprocess": (_cmd_preprocess, PREPROCESS_OPTS, "build the bundle cache (optionally dump area diagnostics)"),
    "train": (_cmd_train, TRAIN_OPTS, "train one configuration"),
    "eval": (_cmd_eval, EVAL_OPTS, "evaluate a checkpoint against a manifest"),
    "sweep": (_cmd_sweep, SWEEP_OPTS, "run the gamma x loss x seed grid plus baselines"),
    "report": (_cmd_report, REPORT_OPTS, "render a results CSV as markdown tables"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="msct", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, (_, opts, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key=value config file")
        _add_opts(p, opts)
    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("no subcommand given", parser.format_usage())
        handler = _COMMANDS[args.command][0]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        if exc.usage:
            print(exc.usage, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
