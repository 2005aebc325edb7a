"""Run configuration: one declarative INI-style file drives every command.

Values resolve in three layers: built-in defaults, then the config file,
then command-line overrides. The resolved configuration canonicalizes to a
stable text form whose digest (``config_hash``) is embedded in run outputs,
and which is written back as a snapshot so any run can be reproduced from
its output directory alone.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationPipeline, TransformSpec
from .finetune import FinetuneSchedule
from .network import ALL_GROUPS, NetworkConfig
from .pretrain import PretrainConfig

DATA_ROOT_ENV = "GLCNET_DATA_ROOT"


class ConfigError(ValueError):
    """Raised with every validation problem listed, not just the first."""


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str(text: str) -> str:
    return text.strip()


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)  # shortest exact round-trip, so snapshots reproduce runs
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "out_dir": (_parse_str, "runs/default"),
        "seed": (_parse_int, 0),
        "data_root": (_parse_str, ""),
    },
    "data": {
        "tile_dir": (_parse_str, "tiles"),
        "crop_size": (_parse_int, 256),
        "channels": (_parse_int, 3),
        "num_classes": (_parse_int, 6),
        "label_fraction": (_parse_float, 0.01),
        "test_fraction": (_parse_float, 0.2),
    },
    "augment": {
        "view_size": (_parse_int, 224),
        "random_resized_crop": (_parse_floats, (0.2, 1.0, 0.75, 4.0 / 3.0)),
        "random_flip": (_parse_floats, (0.5, 0.5)),
        "random_rot90": (_parse_floats, (1.0,)),
        "color_jitter": (_parse_floats, (0.8, 0.8, 0.8, 0.2, 0.8)),
        "gaussian_blur": (_parse_floats, (0.1, 2.0, 0.5)),
        "gaussian_noise": (_parse_floats, (0.0, 0.05, 0.5)),
        "random_grayscale": (_parse_floats, (0.2,)),
    },
    "network": {
        "encoder_widths": (_parse_ints, (64, 128, 256, 512)),
        "decoder_widths": (_parse_ints, (256, 128, 64)),
    },
    "pretrain": {
        "lam": (_parse_float, 0.5),
        "temperature": (_parse_float, 0.5),
        "region_size": (_parse_int, 48),
        "regions_per_sample": (_parse_int, 4),
        "batch_size": (_parse_int, 64),
        "epochs": (_parse_int, 400),
        "learning_rate": (_parse_float, 0.01),
        "projection_dim": (_parse_int, 128),
        "nostyle": (_parse_bool, False),
        "noglobe": (_parse_bool, False),
        "nolocal": (_parse_bool, False),
        "include_positive_in_denominator": (_parse_bool, False),
        "style_stat": (_parse_str, "variance"),
        "match_tolerance": (_parse_float, 1.0),
    },
    "finetune": {
        "epochs": (_parse_int, 150),
        "batch_size": (_parse_int, 16),
        "initial_lr": (_parse_float, 0.001),
        "lr_decay": (_parse_float, 0.98),
        "load_groups": (_parse_strs, ("encoder",)),
        "eval_batch_size": (_parse_int, 32),
        "ignore_classes": (_parse_ints, ()),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_file(cls, path: Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        raw = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls._resolve(raw, overrides or {}, source=str(path))

    @classmethod
    def from_overrides(cls, overrides: dict[str, str]) -> "RunConfig":
        return cls._resolve({}, overrides, source="<defaults>")

    @classmethod
    def _resolve(cls, raw: dict, overrides: dict[str, str], source: str) -> "RunConfig":
        problems: list[str] = []
        cfg = cls.default()
        for section, keys in raw.items():
            if section not in SCHEMA:
                problems.append(f"unknown section [{section}]")
                continue
            for key, text in keys.items():
                if key not in SCHEMA[section]:
                    problems.append(f"unknown key {section}.{key}")
                    continue
                parser_fn = SCHEMA[section][key][0]
                try:
                    cfg.values[section][key] = parser_fn(text)
                except ValueError as exc:
                    problems.append(f"bad value for {section}.{key}: {exc}")
        for dotted, text in overrides.items():
            if "." not in dotted:
                problems.append(f"override {dotted!r} must look like section.key")
                continue
            section, key = dotted.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                problems.append(f"unknown override {dotted}")
                continue
            parser_fn = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = parser_fn(text)
            except ValueError as exc:
                problems.append(f"bad override for {dotted}: {exc}")
        if problems:
            raise ConfigError(f"invalid configuration ({source}):\n  " + "\n  ".join(problems))
        return cfg

    # -- access -------------------------------------------------------------

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        self.values[section][key] = value

    # -- canonical form -----------------------------------------------------

    # workspace-location keys: part of the snapshot, but not of the hash,
    # so the same experiment is recognized wherever its files happen to live
    HASH_EXCLUDED = (("run", "out_dir"), ("run", "data_root"), ("data", "tile_dir"))

    def to_text(self) -> str:
        buf = io.StringIO()
        for section in sorted(self.values):
            buf.write(f"[{section}]\n")
            for key in sorted(self.values[section]):
                buf.write(f"{key} = {_fmt(self.values[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()

    @property
    def config_hash(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if (section, key) in self.HASH_EXCLUDED:
                    continue
                lines.append(f"{section}.{key}={_fmt(self.values[section][key])}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    def save_snapshot(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), newline="\n")

    # -- derived paths ------------------------------------------------------

    @property
    def data_root(self) -> Path:
        configured = str(self.get("run", "data_root"))
        if configured:
            return Path(configured)
        return Path(os.environ.get(DATA_ROOT_ENV, "."))

    def resolve_path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.data_root / p

    @property
    def out_dir(self) -> Path:
        return self.resolve_path(str(self.get("run", "out_dir")))

    @property
    def tile_dir(self) -> Path:
        return self.resolve_path(str(self.get("data", "tile_dir")))

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    # -- typed sub-configs ---------------------------------------------------

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            in_channels=int(self.get("data", "channels")),
            encoder_widths=tuple(self.get("network", "encoder_widths")),
            decoder_widths=tuple(self.get("network", "decoder_widths")),
            num_classes=int(self.get("data", "num_classes")),
        )

    def pretrain_config(self) -> PretrainConfig:
        p = self.values["pretrain"]
        return PretrainConfig(
            lam=p["lam"],
            temperature=p["temperature"],
            region_size=p["region_size"],
            regions_per_sample=p["regions_per_sample"],
            batch_size=p["batch_size"],
            epochs=p["epochs"],
            learning_rate=p["learning_rate"],
            view_size=int(self.get("augment", "view_size")),
            projection_dim=p["projection_dim"],
            nostyle=p["nostyle"],
            noglobe=p["noglobe"],
            nolocal=p["nolocal"],
            include_positive_in_denominator=p["include_positive_in_denominator"],
            style_stat=p["style_stat"],
            match_tolerance=p["match_tolerance"],
        )

    def finetune_schedule(self) -> FinetuneSchedule:
        f = self.values["finetune"]
        return FinetuneSchedule(
            epochs=f["epochs"],
            batch_size=f["batch_size"],
            initial_lr=f["initial_lr"],
            lr_decay=f["lr_decay"],
        )

    def load_groups(self) -> tuple[str, ...]:
        groups = tuple(self.get("finetune", "load_groups"))
        unknown = [g for g in groups if g not in ALL_GROUPS]
        if unknown:
            raise ConfigError(f"unknown load_groups {unknown}; valid: {list(ALL_GROUPS)}")
        return groups

    def pipelines(self) -> tuple[AugmentationPipeline, AugmentationPipeline]:
        """Build the two view pipelines from the [augment] transform entries."""
        a = self.values["augment"]
        out_size = int(a["view_size"])
        crop = a["random_resized_crop"]
        if len(crop) != 4:
            raise ConfigError("augment.random_resized_crop needs 4 numbers: smin, smax, rmin, rmax")
        crop_spec = TransformSpec(
            "random_resized_crop",
            dict(out_size=out_size, scale=(crop[0], crop[1]), ratio=(crop[2], crop[3])),
        )
        flip = a["random_flip"]
        jitter = a["color_jitter"]
        blur = a["gaussian_blur"]
        noise = a["gaussian_noise"]
        t1 = AugmentationPipeline([crop_spec])
        t2 = AugmentationPipeline(
            [
                crop_spec,
                TransformSpec("random_flip", dict(horizontal_p=flip[0], vertical_p=flip[1])),
                TransformSpec("random_rot90", dict(p=a["random_rot90"][0])),
                TransformSpec(
                    "color_jitter",
                    dict(
                        brightness=jitter[0],
                        contrast=jitter[1],
                        saturation=jitter[2],
                        hue=jitter[3],
                        p=jitter[4],
                    ),
                ),
                TransformSpec("gaussian_blur", dict(sigma=(blur[0], blur[1]), p=blur[2])),
                TransformSpec("gaussian_noise", dict(std=(noise[0], noise[1]), p=noise[2])),
                TransformSpec("random_grayscale", dict(p=a["random_grayscale"][0])),
            ]
        )
        return t1, t2
