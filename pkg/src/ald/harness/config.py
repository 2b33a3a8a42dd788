"""Plain-text experiment configuration (INI-style ``key = value`` sections).

Recognized sections: ``[experiment]`` (kind, seed, out), ``[model]``,
``[encoder]``, ``[sampler]``, ``[trainer]``, ``[data]`` and
``[ablation]``.  Values are parsed on access with typed getters so each
experiment only reads the keys it needs.  Matrices are written row by row
with ``;`` between rows, e.g. ``sigma_x = 0.7, 0.6; 0.6, 0.8``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("conjugate-ld", "conjugate-ald", "capacity-ablation", "neural-posterior", "train-lae", "train-ae",
         "train-vae", "train-hoffman", "eval-elbo")
SECTIONS = ("experiment", "model", "encoder", "sampler", "trainer", "data", "ablation")
FILE_KEYS = {("data", "train_images"), ("data", "test_images"), ("trainer", "checkpoint")}


class ConfigError(ValueError):
    pass


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])


def parse_matrix(text: str) -> np.ndarray:
    rows = [parse_vector(r) for r in text.split(";") if r.strip()]
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(f"ragged matrix {text!r}")
    return np.vstack(rows)


def parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    """One experiment: its kind, seed, output directory and per-section settings."""

    kind: str
    seed: int = 0
    out_dir: Path = Path("out")
    sections: dict[str, dict[str, str]] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        self.out_dir = Path(self.out_dir)
        unknown = set(self.sections) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

    # ----------------------------------------------------------- accessors
    def raw(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def get(self, section: str, key: str, default, cast=str):
        value = self.raw(section, key)
        if value is None:
            return default
        try:
            if cast is bool:
                return value.strip().lower() in ("1", "true", "yes", "on")
            return cast(value)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from None

    def path(self, section: str, key: str) -> Path | None:
        value = self.raw(section, key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def check_files(self) -> None:
        """Every referenced input file must exist before the run starts."""
        for section, key in sorted(FILE_KEYS):
            p = self.path(section, key)
            if p is not None and not p.exists():
                raise ConfigError(f"[{section}] {key}: file {p} does not exist")

    def override(self, seed: int | None = None, out_dir=None) -> "ExperimentConfig":
        if seed is not None:
            self.seed = int(seed)
        if out_dir is not None:
            self.out_dir = Path(out_dir)
        return self


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    """Read an experiment config file; ``kind`` fills in a missing ``[experiment] kind``."""
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    sections = {s: dict(parser[s]) for s in parser.sections()}
    exp = sections.get("experiment", {})
    found = exp.get("kind", kind)
    if found is None:
        raise ConfigError("config does not name an experiment kind")
    if kind is not None and found != kind:
        raise ConfigError(f"config is for {found!r}, not {kind!r}")
    return ExperimentConfig(found, int(exp.get("seed", 0)), Path(exp.get("out", "out")),
                            sections, path.parent)


def default_config(kind: str, seed: int = 0, out_dir="out") -> ExperimentConfig:
    return ExperimentConfig(kind, seed, Path(out_dir), {})


def write_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {"kind": cfg.kind, "seed": str(cfg.seed), "out": str(cfg.out_dir)}
    for name, values in cfg.sections.items():
        if name != "experiment":
            parser[name] = dict(values)
    with open(path, "w") as fh:
        parser.write(fh)
