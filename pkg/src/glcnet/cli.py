"""Command-line entry points: tile, synth, pretrain, finetune, evaluate, ablate, plot.

Every training/evaluation command resolves one declarative config (file +
overrides), writes the resolved snapshot and a ``run_meta.json`` into its
output directory, and guards that directory with a lockfile so concurrent
runs cannot interleave. Exit codes: 0 success, 1 user/config error, 2
internal error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import traceback

from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint, load_groups_into, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DataError, DatasetManifest, SplitSpec
from .finetune import FinetuneError, evaluate, finetune
from .metrics import format_summary, write_metrics_csv
from .network import ALL_GROUPS, NetworkError, build_model, parameter_groups
from .pretrain import PretrainError, run_pretraining

logger = logging.getLogger(__name__)

USER_ERRORS = (ConfigError, DataError, PretrainError, FinetuneError, NetworkError, CheckpointError)

ABLATION_VARIANTS = {
    "full": {},
    "nostyle": {"pretrain.nostyle": "true"},
    "noglobe": {"pretrain.noglobe": "true"},
    "nolocal": {"pretrain.nolocal": "true"},
    "nostyle_and_nolocal": {"pretrain.nostyle": "true", "pretrain.nolocal": "true"},
}


class UserError(ValueError):
    pass


@contextlib.contextmanager
def directory_lock(out_dir: Path):
    """One run per output directory at a time."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UserError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _write_run_meta(out_dir: Path, payload: dict) -> None:
    (Path(out_dir) / "run_meta.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UserError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        overrides[dotted.strip()] = value.strip()
    return overrides


def _load_config(args: argparse.Namespace, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _collect_overrides(args)
    if extra:
        overrides.update(extra)
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_overrides(overrides)


def _manifest_dir(cfg: RunConfig) -> Path:
    return cfg.tile_dir


def _load_manifest(cfg: RunConfig, split: str) -> DatasetManifest:
    path = _manifest_dir(cfg) / f"{split}.manifest"
    if not path.exists():
        raise UserError(f"missing manifest {path}; run the tile command first")
    return DatasetManifest.load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    spec = data_mod.SyntheticSceneSpec(
        num_classes=args.classes,
        scene_size=args.scene_size,
        seed=args.seed,
        num_scenes=args.scenes,
        channels=args.channels,
    )
    scenes = data_mod.generate_synthetic_dataset(spec)
    out_dir = Path(args.output)
    for scene in scenes:
        data_mod.save_scene(scene, out_dir)
    data_mod.write_dataset_summary(scenes, spec.num_classes, out_dir / "synth_summary.txt")
    print(f"wrote {len(scenes)} synthetic scenes to {out_dir}")
    return 0


def cmd_tile(args: argparse.Namespace) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.output)
    scene_paths = data_mod.iter_scene_paths(in_dir)
    if not scene_paths:
        raise UserError(f"no scenes found under {in_dir}")
    total = 0
    for path in scene_paths:
        scene = data_mod.load_scene(path)
        tiles = data_mod.tile_raster(scene, args.crop_size, args.stride or args.crop_size)
        data_mod.save_tiles(tiles, out_dir)
        total += len(tiles)
    split = SplitSpec(label_fraction=args.label_fraction, test_fraction=args.test_fraction)
    manifests = data_mod.build_manifests(out_dir, split, args.seed, crop_size=args.crop_size)
    for name, manifest in manifests.items():
        manifest.save(out_dir / f"{name}.manifest")
    data_mod.write_split_stats(manifests, out_dir / "split_stats.txt")
    print(
        f"wrote {total} tiles; splits: "
        + ", ".join(f"{k}={len(v)}" for k, v in manifests.items())
    )
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.method == "simclr":
        extra = {"pretrain.nostyle": "true", "pretrain.nolocal": "true"}
    cfg = _load_config(args, extra)
    return run_pretrain_stage(cfg, method=args.method)


def run_pretrain_stage(cfg: RunConfig, method: str = "glcnet", subdir: str = "pretrain") -> int:
    manifest = _load_manifest(cfg, "pretrain")
    out_dir = cfg.out_dir / subdir
    with directory_lock(out_dir):
        cfg.save_snapshot(out_dir / "config.cfg")
        model = build_model(cfg.network_config(), cfg.seed)
        t1, t2 = cfg.pipelines()
        bundle, reports = run_pretraining(
            manifest,
            _manifest_dir(cfg),
            model,
            cfg.pretrain_config(),
            cfg.seed,
            out_dir=out_dir,
            config_hash=cfg.config_hash,
            t1=t1,
            t2=t2,
        )
        _write_run_meta(
            out_dir,
            {
                "command": "pretrain",
                "method": method,
                "config_hash": cfg.config_hash,
                "seed": cfg.seed,
                "num_tiles": len(manifest),
                "best_epoch": bundle.meta["epoch"],
                "best_loss": bundle.meta["loss"],
            },
        )
    print(
        f"pretrained on {len(manifest)} tiles for {cfg.get('pretrain', 'epochs')} epochs; "
        f"best epoch {bundle.meta['epoch']} (loss {bundle.meta['loss']:.5f}) -> {out_dir}"
    )
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.load_groups is not None:
        extra["finetune.load_groups"] = args.load_groups
    if args.label_fraction is not None:
        extra["data.label_fraction"] = str(args.label_fraction)
    cfg = _load_config(args, extra)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "pretrain" / "checkpoint.glcp"
    return run_finetune_stage(cfg, checkpoint)


def run_finetune_stage(cfg: RunConfig, checkpoint: Path | None, subdir: str = "finetune") -> int:
    load_groups = cfg.load_groups()
    manifest = _finetune_manifest(cfg)
    bundle = None
    if load_groups:
        if checkpoint is None or not Path(checkpoint).exists():
            raise UserError(f"checkpoint {checkpoint} not found (needed for load_groups)")
        bundle = load_checkpoint(checkpoint, set(load_groups))

    out_dir = cfg.out_dir / subdir
    with directory_lock(out_dir):
        cfg.save_snapshot(out_dir / "config.cfg")
        model = build_model(cfg.network_config(), cfg.seed)
        model, rows = finetune(
            model,
            manifest,
            _manifest_dir(cfg),
            cfg.finetune_schedule(),
            cfg.seed,
            bundle=bundle,
            load_groups=load_groups,
            out_dir=out_dir,
            config_hash=cfg.config_hash,
        )
        save_checkpoint(
            out_dir / "model.glcp",
            parameter_groups(model),
            {
                "config_hash": cfg.config_hash,
                "seed": cfg.seed,
                "epochs": cfg.finetune_schedule().epochs,
                "loaded_groups": list(load_groups),
            },
        )
        _write_run_meta(
            out_dir,
            {
                "command": "finetune",
                "config_hash": cfg.config_hash,
                "seed": cfg.seed,
                "loaded_groups": list(load_groups),
                "labeled_tiles": len(manifest),
                "label_fraction": cfg.get("data", "label_fraction"),
            },
        )
    print(
        f"finetuned on {len(manifest)} labeled tiles "
        f"(groups loaded: {', '.join(load_groups) or 'none'}) -> {out_dir}"
    )
    return 0


def _finetune_manifest(cfg: RunConfig) -> DatasetManifest:
    """The labeled subset at the configured fraction.

    If the fraction matches the manifest written at tile time, use it
    verbatim; otherwise re-derive the subset from the pretrain manifest
    with the run seed.
    """
    manifest = _load_manifest(cfg, "finetune")
    fraction = float(cfg.get("data", "label_fraction"))
    if abs(manifest.label_fraction - fraction) < 1e-12:
        return manifest
    pretrain = _load_manifest(cfg, "pretrain")
    labeled = [e for e in pretrain.entries if e.mask_path is not None]
    n = data_mod.label_subset_size(len(pretrain.entries), fraction)
    if len(labeled) < n:
        raise UserError(f"need {n} labeled tiles but only {len(labeled)} have masks")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    picks = sorted(rng.permutation(len(labeled))[:n])
    return DatasetManifest([labeled[i] for i in picks], "finetune", pretrain.crop_size, fraction)


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model_path = Path(args.model) if args.model else cfg.out_dir / "finetune" / "model.glcp"
    return run_evaluate_stage(cfg, model_path)


def run_evaluate_stage(cfg: RunConfig, model_path: Path, subdir: str = "eval") -> int:
    if not Path(model_path).exists():
        raise UserError(f"model checkpoint {model_path} not found")
    manifest = _load_manifest(cfg, "test")
    out_dir = cfg.out_dir / subdir
    with directory_lock(out_dir):
        cfg.save_snapshot(out_dir / "config.cfg")
        model = build_model(cfg.network_config(), cfg.seed)
        bundle = load_checkpoint(model_path)
        groups = parameter_groups(model)
        load_groups_into(bundle, groups, [g for g in groups if g in bundle.groups])
        cm, report = evaluate(
            model,
            manifest,
            _manifest_dir(cfg),
            batch_size=int(cfg.get("finetune", "eval_batch_size")),
            ignore_classes=tuple(cfg.get("finetune", "ignore_classes")),
        )
        write_metrics_csv(report, out_dir / "metrics.csv")
        (out_dir / "metrics.txt").write_text(format_summary(report) + "\n")
        np.savetxt(out_dir / "confusion.csv", cm.counts, fmt="%d", delimiter=",")
        _write_run_meta(
            out_dir,
            {
                "command": "evaluate",
                "config_hash": cfg.config_hash,
                "seed": cfg.seed,
                "test_tiles": len(manifest),
                "oa": report.oa,
                "kappa": report.kappa,
            },
        )
    print(format_summary(report))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base_overrides = _collect_overrides(args)
    results = []
    for name, variant in ABLATION_VARIANTS.items():
        overrides = dict(base_overrides)
        overrides.update(variant)
        overrides["run.out_dir"] = str(Path(_base_out_dir(args)) / "ablate" / name)
        if args.config:
            cfg = RunConfig.from_file(args.config, overrides)
        else:
            cfg = RunConfig.from_overrides(overrides)
        logger.info("ablation %s (config hash %s)", name, cfg.config_hash)
        run_pretrain_stage(cfg, method=name, subdir="pretrain")
        run_finetune_stage(cfg, cfg.out_dir / "pretrain" / "checkpoint.glcp")
        run_evaluate_stage(cfg, cfg.out_dir / "finetune" / "model.glcp")
        meta = json.loads((cfg.out_dir / "eval" / "run_meta.json").read_text())
        results.append((name, meta["kappa"], meta["oa"], cfg.config_hash))

    table = Path(_base_out_dir(args)) / "ablate" / "ablation_results.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["configuration", "kappa", "oa", "config_hash"])
        for name, kappa, oa, chash in results:
            writer.writerow([name, f"{kappa:.12g}", f"{oa:.12g}", chash])
    print(f"ablation table -> {table}")
    for name, kappa, oa, _ in results:
        print(f"  {name}: kappa={kappa:.4f} oa={oa:.4f}")
    return 0


def _base_out_dir(args: argparse.Namespace) -> Path:
    overrides = _collect_overrides(args)
    if args.config:
        cfg = RunConfig.from_file(args.config, overrides)
    else:
        cfg = RunConfig.from_overrides(overrides)
    return cfg.out_dir


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    made = []

    loss_csv = _find_first(run_dir, "loss_log.csv")
    if loss_csv is not None:
        rows = _read_csv(loss_csv)
        steps = range(len(rows))
        fig, ax = plt.subplots(figsize=(7, 4))
        for column, label in (("l_global", "global"), ("l_local", "local"), ("l_total", "total")):
            ax.plot(list(steps), [float(r[column]) for r in rows], label=label, linewidth=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        ax.set_title("pretraining loss")
        out = run_dir / "loss_curve.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        made.append(out)

    metrics_csv = _find_first(run_dir, "metrics.csv")
    if metrics_csv is not None:
        rows = [r for r in _read_csv(metrics_csv) if r["class"] != "__summary__"]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar([r["class"] for r in rows], [float(r["f1"]) for r in rows])
        ax.set_ylabel("F1")
        ax.set_ylim(0, 1)
        ax.set_title("per-class F1")
        plt.setp(ax.get_xticklabels(), rotation=45, ha="right")
        out = run_dir / "f1_per_class.png"
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        made.append(out)

    if not made:
        raise UserError(f"no loss_log.csv or metrics.csv found under {run_dir}")
    for path in made:
        print(f"wrote {path}")
    return 0


def _find_first(root: Path, name: str) -> Path | None:
    direct = root / name
    if direct.exists():
        return direct
    hits = sorted(root.rglob(name))
    return hits[0] if hits else None


def _read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file (INI sections)")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; wins over the file)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glcnet",
        description="Self-supervised contrastive pretraining for semantic segmentation",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--scene-size", type=int, default=512)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=3, choices=(3, 4))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="cut scenes into tiles and build split manifests")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--crop-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=None, help="defaults to crop size")
    p.add_argument("--label-fraction", type=float, default=0.01)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_config_args(p)
    p.add_argument("--method", choices=("glcnet", "simclr"), default="glcnet")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on the labeled fraction")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument(
        "--load-groups",
        default=None,
        help=f"comma list from {', '.join(ALL_GROUPS)}; empty string = train from scratch",
    )
    p.add_argument("--label-fraction", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a finetuned model on the test split")
    _add_config_args(p)
    p.add_argument("--model", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run all module-ablation configurations")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render loss curves and per-class F1 from run CSVs")
    p.add_argument("--run-dir", type=Path, required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
