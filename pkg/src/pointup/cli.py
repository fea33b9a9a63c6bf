"""Command-line surface: data generation, training, inference, evaluation."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checks
from .autodiff import load_checkpoint
from .cloud import (PointCloud, default_num_seeds, extract_patches, load_xyz,
                    merge_patches, save_ply, save_xyz)
from .experiments import (ABLATION_ORDER, NOISE_LEVELS, AblateConfig,
                          run_ablation, run_noise_sweep)
from .metrics import error_map, evaluate, p2f
from .model import upsample_points
from .synth import DatasetConfig, ShapeSpec, build_dataset, load_dataset
from .training import TrainConfig, TrainingDivergedError, train


class CliError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config_file(path: Path) -> dict:
    """JSON object, or flat key=value lines."""
    raw = path.read_text()
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        data = json.loads(raw)
        # An echoed effective-config is directly reusable as --config.
        if "command" in data and "config" in data:
            return data["config"]
        return data
    out = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _build_config(cls, args, defaults: dict | None = None):
    """Merge defaults <- config file <- --set overrides <- --seed."""
    known = {f.name for f in dataclasses.fields(cls)}
    values = dict(defaults or {})
    if getattr(args, "config", None):
        values.update(_load_config_file(Path(args.config)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = _parse_value(value.strip())
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)} (known: {sorted(known)})")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(values)
    for f in dataclasses.fields(cls):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def _echo_config(out_dir: Path, command: str, cfg, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict() if hasattr(cfg, "to_dict") else dataclasses.asdict(cfg)}
    if extra:
        payload.update(extra)
    with open(out_dir / "effective-config.json", "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _load_model(ckpt_path: str):
    store, config = load_checkpoint(ckpt_path)
    if not config:
        raise CliError(f"checkpoint {ckpt_path} carries no config header")
    tcfg = TrainConfig.from_dict(config)
    return store, tcfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _build_config(DatasetConfig, args)
    out = Path(args.out)
    build_dataset(cfg, out)
    _echo_config(out, "gen-data", cfg)
    print(f"wrote {cfg.n_pairs} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    pairs, data_cfg = load_dataset(args.data)
    cfg = _build_config(TrainConfig, args, defaults={"N": data_cfg["N"], "r": data_cfg["r"]})
    out = Path(args.out)
    _echo_config(out, "train", cfg, {"data": str(args.data)})
    store, log = train(pairs, cfg, out_dir=out)
    print(f"trained {cfg.epochs} epochs ({len(log)} iterations); "
          f"final loss {log[-1].loss_total:.6f}; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_upsample(args) -> int:
    store, tcfg = _load_model(args.ckpt)
    if args.r is not None:
        tcfg = dataclasses.replace(tcfg, r=args.r)
    cloud = load_xyz(args.input)
    m = len(cloud)
    patch_size = min(tcfg.N, m)
    num_seeds = default_num_seeds(m, patch_size)
    patches = extract_patches(cloud, num_seeds, patch_size)
    stacked = np.stack([p.points.points for p in patches])
    preds = upsample_points(stacked, store, tcfg.gen_config(), tcfg.ref_config(), variant=tcfg.variant)
    merged = merge_patches(
        [(PointCloud(pred), patch.transform) for pred, patch in zip(preds, patches)],
        target_count=tcfg.r * m,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_xyz(merged, out / "upsampled.xyz")
    _echo_config(out, "upsample", tcfg, {
        "input": str(args.input), "ckpt": str(args.ckpt), "r": tcfg.r,
    })
    if args.target:
        target = load_xyz(args.target)
        errs = error_map(target, merged)
        save_ply(PointCloud(target.points, {"error": errs}), out / "error_map.ply")
    elif args.surface:
        with open(args.surface) as f:
            spec = ShapeSpec.from_json(json.load(f))
        _, _, dists = p2f(merged, spec)
        save_ply(PointCloud(merged.points, {"error": dists}), out / "error_map.ply")
    print(f"upsampled {m} -> {len(merged)} points at {out / 'upsampled.xyz'}")
    return 0


def cmd_eval(args) -> int:
    store, tcfg = _load_model(args.ckpt)
    pairs, data_cfg = load_dataset(args.data)
    if data_cfg["N"] != tcfg.N or data_cfg["r"] != tcfg.r:
        raise CliError(f"dataset N={data_cfg['N']}, r={data_cfg['r']} does not match "
                       f"checkpoint N={tcfg.N}, r={tcfg.r}")
    inputs = np.stack([p.P for p in pairs])
    preds = upsample_points(inputs, store, tcfg.gen_config(), tcfg.ref_config(), variant=tcfg.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (pred, pair) in enumerate(zip(preds, pairs)):
        scale, centroid = pair.transform.scale, pair.transform.centroid
        pred_world = pred * scale + centroid
        target_world = pair.target * scale + centroid
        report = evaluate(pred_world, target_world, pair.shape)
        rows.append([f"pair_{i:05d}", tcfg.N, tcfg.r * tcfg.N, tcfg.r,
                     f"{report.cd_e3:.6f}", f"{report.hd_e3:.6f}",
                     f"{report.p2f_mean_e3:.6f}", f"{report.p2f_std_e3:.6f}"])
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "n_in", "n_out", "r", "cd_e3", "hd_e3", "p2f_mean_e3", "p2f_std_e3"])
        w.writerows(rows)
    _echo_config(out, "eval", tcfg, {"data": str(args.data), "ckpt": str(args.ckpt)})
    mean_cd = np.mean([float(r[4]) for r in rows])
    print(f"evaluated {len(rows)} shapes; mean CD {mean_cd:.4f}e-3; report at {out / 'metrics.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_gradient_suite()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max_error={r.max_error:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "max_error", "passed"])
            for r in results:
                w.writerow([r.name, f"{r.max_error:.6e}", r.passed])
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = _build_config(AblateConfig, args)
    out = Path(args.out)
    _echo_config(out, "ablate", cfg)
    scores, _, _ = run_ablation(cfg, progress=lambda v, cd: print(f"model {v}: heldout CD {cd:.6f}"))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "cd_e3"])
        for variant in ABLATION_ORDER:
            label = "Full" if variant == "full" else variant
            w.writerow([label, f"{scores[variant] * 1e3:.6f}"])
    print(f"ablation table at {out / 'ablation.csv'}")
    return 0


def cmd_noise_sweep(args) -> int:
    store, tcfg = _load_model(args.ckpt)
    pairs, data_cfg = load_dataset(args.data)
    if data_cfg["N"] != tcfg.N:
        raise CliError(f"dataset N={data_cfg['N']} does not match checkpoint N={tcfg.N}")
    levels = [float(v) for v in (args.levels.split(",") if args.levels else NOISE_LEVELS)]
    sweep = run_noise_sweep(store, tcfg, pairs, levels=levels,
                            noise_seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "noise_sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["noise_level", "cd_e3"])
        for level, cd in sweep:
            w.writerow([level, f"{cd * 1e3:.6f}"])
    _echo_config(out, "noise-sweep", tcfg, {"data": str(args.data), "ckpt": str(args.ckpt),
                                            "levels": levels})
    print(f"noise sweep at {out / 'noise_sweep.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointup",
                                     description="Coarse-to-fine point cloud upsampling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON or key=value config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic patch-pair dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", help="upsample a point cloud with a checkpoint")
    p.add_argument("--in", required=True, dest="input", help="input XYZ file")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--r", type=int, help="upsampling rate (default: from checkpoint)")
    p.add_argument("--target", help="dense target XYZ for an error-map PLY")
    p.add_argument("--surface", help="surface-spec JSON for an error-map PLY")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a test dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--out", help="optional directory for gradcheck.csv")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score models A-D and Full")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise-sweep", help="evaluate a checkpoint across noise levels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--levels", help="comma-separated noise levels")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
