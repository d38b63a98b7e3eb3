"""Command line entry point: gen-data, depth, train, eval, probe, ablate.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
Settings resolve as command-line flag > config file > built-in default.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import (
    DatasetError,
    PlacementError,
    SyntheticSceneSpec,
    generate_dataset,
    generate_scene,
    load_patch_dir,
    split_dataset,
    write_patch_dir,
)
from .geometry import (
    BuildingLengthStats,
    ResolutionSpec,
    building_length_stats,
    depth_log_argument,
    select_perturbation_depth,
)
from .metrics import CSV_FIELDS, csv_row
from .trainer import MODES, CheckpointRecord, TrainConfig, evaluate, evaluate_model, train, with_mode

log = logging.getLogger("focseg")

RUNTIME_ERRORS = (ValueError, OSError, DatasetError, PlacementError, FloatingPointError, RuntimeError, KeyError)
ABLATION_FIELDS = ("mode", "n_seeds", "seeds", "median_iou", "median_f1", "ious", "gain_vs_supervised_only")
RUN_FIELDS = ("mode", "seed", "perturb_depth", "seconds") + CSV_FIELDS[2:]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _number(text: str) -> float:
    """Count (int) or fraction (float) argument."""
    return float(text) if any(c in text for c in ".eE") else int(text)


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
        return tuple(kind(p) for p in parts)
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="focseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic footprint dataset")
    g.add_argument("--n", type=int, required=True, help="total number of patches")
    g.add_argument("--resolution", type=float, default=1.0, help="metres per pixel")
    g.add_argument("--ratio", default="1:10", help="labeled:unlabeled ratio, e.g. 1:10")
    g.add_argument("--patch-size", type=int, default=256)
    g.add_argument("--val", type=_number, default=0.1, help="val count or fraction")
    g.add_argument("--test", type=_number, default=0.15, help="test count or fraction")
    g.add_argument("--composite", action="store_true", help="allow L-shaped buildings")
    g.add_argument("--buildings", type=_pair(int), help="buildings per patch as MIN,MAX")
    g.add_argument("--side-range", type=_pair(float), help="building side lengths in metres as MIN,MAX")

    d = sub.add_parser("depth", parents=[common], help="building statistics and perturbation depth")
    d.add_argument("--resolution", type=float, required=True, help="metres per pixel")
    d.add_argument("--masks", type=Path, help="dataset directory or directory of mask PNGs")
    d.add_argument("--l-min", type=float, help="mean short side in metres (instead of --masks)")
    d.add_argument("--l-max", type=float, help="mean long side in metres (instead of --masks)")
    d.add_argument("--max-depth", type=int, help="clamp to the encoder depth")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--iters", type=int, help="total iterations (overrides config)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="test", choices=("labeled", "unlabeled", "val", "test"))

    pr = sub.add_parser("probe", parents=[common], help="local-variation heatmaps at an encoder depth")
    pr.add_argument("--depth", type=int, required=True)
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--checkpoint", type=Path, help="trained weights (default: fresh init)")
    pr.add_argument("--split", default="test", choices=("labeled", "val", "test"))
    pr.add_argument("--limit", type=int, default=8)
    pr.add_argument("--band", type=int, default=2, help="boundary band half-width in pixels")

    a = sub.add_parser("ablate", parents=[common], help="run all training modes with shared seeds")
    a.add_argument("--data", type=Path, help="dataset directory (default: synthesize from config 'data')")
    a.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed only)")
    a.add_argument("--iters", type=int)
    return p


# ---------------------------------------------------------------- helpers

def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from None


def _git_version() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0:
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _run_id(command: str, resolved: dict) -> str:
    digest = hashlib.sha1(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:10]
    return f"{command}-{digest}"


def write_manifest(out: Path, command: str, argv: list[str], resolved: dict, started: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": _run_id(command, resolved),
        "command": command,
        "argv": argv,
        "config": resolved,
        "version": _git_version(),
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def resolve_train_config(args, file_cfg: dict) -> TrainConfig:
    cfg = dict(file_cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        cfg["total_iters"] = args.iters
    if getattr(args, "mode", None) is not None:
        cfg["mode"] = args.mode
    return TrainConfig.from_dict(cfg)


def _mask_arrays(path: Path, resolution: float):
    if (path / "manifest.json").is_file():
        ds = load_patch_dir(path)
        idx = ds.split.labeled + ds.split.val + ds.split.test if ds.split else range(len(ds))
        return [ds.mask(i) for i in idx]
    files = sorted(path.glob("*.png"))
    if not files:
        raise DatasetError(f"no mask PNGs in {path}")
    out = []
    for f in files:
        with Image.open(f) as im:
            out.append((np.asarray(im.convert("L")) >= 128).astype(np.uint8))
    return out


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, file_cfg) -> dict:
    if args.out is None:
        raise UsageError("gen-data requires --out")
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    extra = {}
    if args.buildings:
        extra["buildings_per_patch"] = args.buildings
    if args.side_range:
        extra["side_length_range"] = args.side_range
    spec = SyntheticSceneSpec(resolution=args.resolution, patch_size=args.patch_size, composite=args.composite,
                              seed=seed, **extra)
    split = split_dataset(args.n, args.ratio, args.val, args.test, seed=seed)
    pairs = [generate_scene(spec, i) for i in range(args.n)]
    write_patch_dir(args.out, pairs, split, extra={"generator": spec.to_dict()})
    counts = {k: len(v) for k, v in split.as_dict().items()}
    print(" ".join(f"{k}={v}" for k, v in {"out": args.out, "n": args.n, "ratio": args.ratio, **counts}.items()))
    return {"scene": spec.to_dict(), "n": args.n, "ratio": args.ratio, "val": args.val, "test": args.test}


def cmd_depth(args, file_cfg) -> dict:
    r = ResolutionSpec(args.resolution)
    if args.masks is not None:
        stats = building_length_stats(_mask_arrays(args.masks, r.r), r)
    elif args.l_min is not None and args.l_max is not None:
        stats = BuildingLengthStats(args.l_min, args.l_max, 1)
    else:
        raise UsageError("depth needs --masks or both --l-min and --l-max")
    raw = depth_log_argument(r, stats)
    depth = select_perturbation_depth(r, stats, max_depth=args.max_depth)
    fields = {
        "resolution": r.r,
        "l_min_mean": stats.l_min_mean,
        "l_max_mean": stats.l_max_mean,
        "buildings": stats.building_count,
        "log2_size": raw,
        "depth": depth,
        # the next stage up; worth trying when log2_size sits just below it
        "next_depth": int(np.floor(raw)) + 1,
        "margin_to_next": 1.0 - (raw - np.floor(raw)),
    }
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))
    return {"resolution": r.r, "stats": [stats.l_min_mean, stats.l_max_mean, stats.building_count]}


def cmd_train(args, file_cfg) -> dict:
    if args.out is None:
        raise UsageError("train requires --out")
    cfg = resolve_train_config(args, file_cfg)
    ds = load_patch_dir(args.data)
    resolved = {"train": cfg.to_dict(), "data": str(args.data)}
    rec = train(cfg, ds, args.out, run_id=_run_id("train", resolved))
    line = {"iterations": rec.iteration, "perturb_depth": rec.perturb_depth,
            "checkpoint": args.out / "checkpoint_final.npz"}
    if ds.split and ds.split.val:
        _, rep = evaluate_model(rec.build_model(), ds, ds.split.val)
        line["val_iou"] = rep.iou
    print(" ".join(f"{k}={_fmt(v)}" for k, v in line.items()))
    return resolved


def cmd_eval(args, file_cfg) -> dict:
    ds = load_patch_dir(args.data)
    rec = CheckpointRecord.load(args.checkpoint)
    counts, rep = evaluate(rec, ds, args.split)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerow(csv_row(rec.run_id or args.checkpoint.stem, args.split, counts, rep))
    sys.stdout.write(buf.getvalue())
    if rep.degenerate:
        log.warning("some scores were 0/0 and are reported as 0")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.csv").write_text(buf.getvalue())
    return {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split}


def cmd_probe(args, file_cfg) -> dict:
    import torch

    from .model import Segmenter
    from .probe import band_contrast, local_variation_map, normalise

    if args.out is None:
        raise UsageError("probe requires --out")
    ds = load_patch_dir(args.data)
    if args.checkpoint is not None:
        model = CheckpointRecord.load(args.checkpoint).build_model()
    else:
        cfg = resolve_train_config(args, file_cfg)
        torch.manual_seed(cfg.seed)
        model = Segmenter(cfg.model)
    if not 0 <= args.depth <= model.max_depth:
        raise ValueError(f"depth {args.depth} outside [0, {model.max_depth}]")
    indices = list(getattr(ds.split, args.split) if ds.split else range(len(ds)))[: args.limit]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    model.eval()
    for i in indices:
        x = torch.from_numpy(ds.image(i))[None]
        with torch.no_grad():
            feats = model.encode(x).activations[args.depth][0].numpy()
        vmap = local_variation_map(feats, x.shape[-2:], source_depth=args.depth)
        Image.fromarray(normalise(vmap.values), "L").save(args.out / f"{ds.ids[i]}_d{args.depth}.png")
        on, off = band_contrast(vmap, ds.mask(i), args.band)
        rows.append({"id": ds.ids[i], "depth": args.depth, "boundary_mean": f"{on:.6g}", "interior_mean": f"{off:.6g}",
                     "ratio": f"{on / off:.6g}" if off > 0 else "nan"})
    with open(args.out / "probe.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "depth", "boundary_mean", "interior_mean", "ratio"])
        w.writeheader()
        w.writerows(rows)
    print(f"patches={len(rows)} out={args.out}")
    return {"depth": args.depth, "data": str(args.data), "checkpoint": str(args.checkpoint), "split": args.split}


def run_ablation(base: TrainConfig, ds, seeds: list[int], out: Path | None) -> tuple[list[dict], list[dict]]:
    """Train every mode for every seed; return (per-run rows, per-mode summary rows)."""
    runs = []
    for seed in seeds:
        for mode in MODES:
            cfg = with_mode(base, mode, seed)
            run_dir = out / f"{mode}_seed{seed}" if out is not None else None
            t0 = time.perf_counter()
            rec = train(cfg, ds, run_dir, run_id=f"{mode}-seed{seed}")
            seconds = time.perf_counter() - t0
            counts, rep = evaluate(rec, ds, "test")
            row = {"mode": mode, "seed": seed, "perturb_depth": rec.perturb_depth, "seconds": f"{seconds:.1f}"}
            row.update({k: v for k, v in csv_row("", "test", counts, rep).items() if k in RUN_FIELDS})
            runs.append(row)
            log.info("%s seed %d: test iou %.4f (%.0fs)", mode, seed, rep.iou, seconds)
    summary = []
    med = {}
    for mode in MODES:
        ious = [float(r["iou"]) for r in runs if r["mode"] == mode]
        f1s = [float(r["f1"]) for r in runs if r["mode"] == mode]
        med[mode] = statistics.median(ious)
        summary.append({"mode": mode, "n_seeds": len(ious), "seeds": " ".join(map(str, seeds)),
                        "median_iou": f"{med[mode]:.6f}", "median_f1": f"{statistics.median(f1s):.6f}",
                        "ious": " ".join(f"{v:.6f}" for v in ious)})
    for row in summary:
        row["gain_vs_supervised_only"] = f"{float(row['median_iou']) - med['supervised_only']:.6f}"
    return runs, summary


def _synth_from_config(data_cfg: dict):
    spec = SyntheticSceneSpec(resolution=float(data_cfg.get("resolution", 1.0)),
                              patch_size=int(data_cfg.get("patch_size", 128)),
                              seed=int(data_cfg.get("seed", 0)))
    return generate_dataset(spec, int(data_cfg.get("n", 850)), str(data_cfg.get("ratio", "1:10")),
                            data_cfg.get("val", 100), data_cfg.get("test", 150))


def cmd_ablate(args, file_cfg) -> dict:
    base = resolve_train_config(args, file_cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    ds = load_patch_dir(args.data) if args.data is not None else _synth_from_config(file_cfg.get("data", {}))
    runs, summary = run_ablation(base, ds, seeds, args.out)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(summary)
    sys.stdout.write(buf.getvalue())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "comparison.csv").write_text(buf.getvalue())
        with open(args.out / "runs.csv", "w", newline="") as fh:
            rw = csv.DictWriter(fh, fieldnames=RUN_FIELDS)
            rw.writeheader()
            rw.writerows(runs)
    return {"train": base.to_dict(), "seeds": seeds, "data": str(args.data) if args.data else file_cfg.get("data", {})}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "depth": cmd_depth,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    try:
        file_cfg = _load_config(args.config)
        resolved = COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"focseg: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"focseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if args.out is not None:
        write_manifest(args.out, args.command, argv, resolved, started)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
