"""Command-line entry points: dataset generation, training, evaluation,
ablation sweeps, and stability reporting.

Configs are YAML files mirroring the dataclasses in this package; any key can
be overridden on the command line with --set dotted.path=value. Every run
echoes its fully resolved config into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .scenes import SceneGenConfig, generate_scene, read_annotations, write_annotations
from .training import STRATEGIES, TrainConfig, evaluate, train
from .model import IFI_VARIANTS, load_checkpoint

AXES = ("strategy", "aux_counts", "randomness_range", "ifi_variant")


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must contain a YAML mapping")
    return data


def _apply_overrides(data: dict, sets: list[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError(f"--set path {key!r} collides with a non-mapping value")
        node[parts[-1]] = value
    return data


def _build(cls, data: dict):
    """Construct a (possibly nested) config dataclass, rejecting unknown keys."""
    valid = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(valid)
    if unknown:
        raise CliError(
            f"unknown config key(s) {sorted(unknown)} for {cls.__name__}; "
            f"valid keys: {sorted(valid)}"
        )
    import dataclasses as _dc

    kwargs = {}
    for name, value in data.items():
        factory = valid[name].default_factory
        default = factory() if factory is not _dc.MISSING else None
        if isinstance(value, dict) and default is not None and is_dataclass(default):
            value = _build(type(default), value)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise CliError(str(e))


def _prepare_out(out: str, overwrite: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise CliError(f"output directory {out_dir} is not empty; pass --overwrite to clobber")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _echo_config(cfg, out_dir: Path):
    (out_dir / "config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))


def cmd_gen_data(args) -> int:
    from PIL import Image

    data = _apply_overrides(_load_config(args.config), args.set)
    n_scenes = int(data.pop("n_scenes", 10))
    cfg = _build(SceneGenConfig, data)
    cfg.validate()
    out_dir = _prepare_out(args.out, args.overwrite)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)

    scenes = [generate_scene(cfg, args.seed + i) for i in range(n_scenes)]
    for scene in scenes:
        arr = (np.clip(scene.image[..., 0], 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="L").save(img_dir / f"{scene.annotations.image_id}.png")
    write_annotations(scenes, out_dir / "annotations.txt")
    echo = dict(asdict(cfg), n_scenes=n_scenes, seed=args.seed)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True))
    print(f"wrote {n_scenes} scenes to {out_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    data = _apply_overrides(_load_config(args.config), args.set)
    if args.seed is not None:
        data["seed"] = args.seed
    return _build(TrainConfig, data)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out_dir = _prepare_out(args.out, args.overwrite)
    artifacts = train(cfg, out_dir, overwrite=True)
    print(
        f"trained {cfg.strategy} for {cfg.epochs} epochs: "
        f"MAE={artifacts.mae:.3f} MSE={artifacts.mse:.3f} -> {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    model = load_checkpoint(args.checkpoint)
    out_dir = _prepare_out(args.out, args.overwrite)
    _echo_config(cfg, out_dir)

    if args.data:
        from PIL import Image

        data_dir = Path(args.data)
        annos = read_annotations(data_dir / "annotations.txt")
        scenes = []
        from .scenes import SyntheticScene

        for ps in annos:
            img = np.asarray(Image.open(data_dir / "images" / f"{ps.image_id}.png"), dtype=np.float32)
            scenes.append(SyntheticScene(image=(img / 255.0)[..., None], annotations=ps, rng_seed=-1))
    else:
        from .training import make_dataset

        _, _, scenes = make_dataset(cfg)

    rows, counting, f1, signed = evaluate(model, scenes, cfg.eval_sigmas, cfg.infer_threshold)
    with (out_dir / "eval.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
    f1_txt = " ".join(f"F1@{s:g}={f1[s]:.3f}" for s in cfg.eval_sigmas)
    print(f"MAE={counting.mae:.3f} MSE={counting.mse:.3f} {f1_txt}")
    return 0


def _ablation_settings(axis: str, base: TrainConfig):
    if axis == "strategy":
        for s in STRATEGIES:
            yield s, {"strategy": s}
    elif axis == "aux_counts":
        for kp, kn in ((0, 0), (1, 0), (2, 0), (1, 1), (2, 2), (5, 5)):
            yield f"kpos{kp}_kneg{kn}", {"k_pos": kp, "k_neg": kn, "strategy": "matcher_apg"}
    elif axis == "randomness_range":
        for npos, nneg in ((1, 4), (2, 8), (3, 12), (4, 16)):
            yield f"npos{npos}_nneg{nneg}", {"n_pos": float(npos), "n_neg": float(nneg), "strategy": "matcher_apg"}
    elif axis == "ifi_variant":
        for v in IFI_VARIANTS:
            yield v, {"ifi_variant": v}
    else:
        raise CliError(f"unknown ablation axis {axis!r}; valid axes: {AXES}")


def cmd_ablate(args) -> int:
    import dataclasses

    base = _train_config(args)
    out_dir = _prepare_out(args.out, args.overwrite)
    _echo_config(base, out_dir)

    results = []
    for name, changes in _ablation_settings(args.axis, base):
        cfg = dataclasses.replace(base)
        model_changes = {k: v for k, v in changes.items() if k == "ifi_variant"}
        for k, v in changes.items():
            if k != "ifi_variant":
                setattr(cfg, k, v)
        if model_changes:
            cfg.model = dataclasses.replace(cfg.model, **model_changes)
        run_dir = out_dir / name
        art = train(cfg, run_dir, overwrite=True)
        irs = [r[1] for r in art.ir_history]
        deltas = [r[2] for r in art.ir_history]
        row = {
            "setting": name,
            "mae": art.mae,
            "mse": art.mse,
            "mean_signed_error": art.mean_signed_error,
            "avg_ir": float(np.mean(irs)) if irs else "",
            "avg_delta": float(np.mean(deltas)) if deltas else "",
        }
        for s, v in (art.f1 or {}).items():
            row[f"f1_{s:g}"] = v
        results.append(row)
        print(f"[{args.axis}] {name}: MAE={art.mae:.3f} MSE={art.mse:.3f}")

    with (out_dir / "results.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(results[0].keys()))
        w.writeheader()
        w.writerows(results)
    print(f"wrote {len(results)} settings to {out_dir / 'results.csv'}")
    return 0


def cmd_stability_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = _prepare_out(args.out, args.overwrite)
    merged = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for run in args.runs:
        run_dir = Path(run)
        ir_csv = run_dir / "ir.csv"
        if not ir_csv.exists():
            raise CliError(f"run {run_dir} has no ir.csv stability log")
        label = run_dir.name
        cfg_file = run_dir / "config.yaml"
        if cfg_file.exists():
            cfg = yaml.safe_load(cfg_file.read_text())
            label = cfg.get("strategy", label)
        epochs, irs = [], []
        with ir_csv.open() as f:
            for row in csv.DictReader(f):
                epochs.append(int(row["epoch"]))
                irs.append(float(row["ir"]))
                merged.append({"run": run_dir.name, "strategy": label, **row})
        ax.plot(epochs, irs, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("instability rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "instability.png", dpi=150)
    plt.close(fig)

    with (out_dir / "stability_merged.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["run", "strategy", "epoch", "ir", "avg_delta"])
        w.writeheader()
        w.writerows(merged)
    print(f"wrote plot and merged CSV to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcrowd", description="Point-proposal crowd counting experiment harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--overwrite", action="store_true",
                       help="allow writing into a non-empty output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, seed_default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="gen-data directory; defaults to synthetic test scenes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stability-report", help="plot IR curves from run directories")
    p.add_argument("runs", nargs="+", help="run directories containing ir.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_stability_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
