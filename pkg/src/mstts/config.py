"""Run configuration: a TOML file plus command-line overrides.

Layout mirrors the training dataclasses: top-level ``profile`` and ``seed``,
a ``[train]`` table for TrainConfig fields, an optional ``[schedule]`` table
for the learning-rate schedule, and an optional ``[stft]`` table for feature
extraction.  Unknown keys anywhere are rejected by name, and every command
that writes a run directory drops the fully resolved config there next to a
version string and the seed, so a run can be reproduced from its directory
alone.
"""

from __future__ import annotations

import dataclasses
import json
import subprocess
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__
from .canon import canonical_json
from .dsp import StftConfig
from .errors import ConfigError
from .numerics.optim import LrSchedule
from .trainer.loop import TrainConfig

_TOP_KEYS = {"profile", "seed", "data_root", "train", "schedule", "stft"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"schedule", "seed", "profile"}
_SCHEDULE_KEYS = {f.name for f in dataclasses.fields(LrSchedule)}
_STFT_KEYS = {f.name for f in dataclasses.fields(StftConfig)}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def read_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            tree = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad TOML in {path}: {e}") from e
    _check_keys(tree, _TOP_KEYS, str(path))
    _check_keys(tree.get("train", {}), _TRAIN_KEYS, f"{path} [train]")
    _check_keys(tree.get("schedule", {}), _SCHEDULE_KEYS, f"{path} [schedule]")
    _check_keys(tree.get("stft", {}), _STFT_KEYS, f"{path} [stft]")
    return tree


def resolve_train_config(tree: dict, **flag_overrides) -> TrainConfig:
    """Config-file values, then non-None flags on top."""
    kwargs = dict(tree.get("train", {}))
    if "profile" in tree:
        kwargs["profile"] = tree["profile"]
    if "seed" in tree:
        kwargs["seed"] = tree["seed"]
    for key, value in flag_overrides.items():
        if value is None:
            continue
        if key not in _TRAIN_KEYS and key not in ("profile", "seed"):
            raise ConfigError(f"unknown training option {key!r}")
        kwargs[key] = value
    if "schedule" in tree:
        try:
            kwargs["schedule"] = LrSchedule(**tree["schedule"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad [schedule]: {e}") from e
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad training config: {e}") from e


def version_string() -> str:
    """Package version, with the git commit when running from a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return __version__


def write_run_stamp(out_dir, command: str, seed: int, config: dict) -> Path:
    """Drop run.json: enough to rerun this command bit-exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "command": command,
        "argv": sys.argv[1:],
        "version": version_string(),
        "seed": seed,
        "config": config,
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")
    return path


def train_config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if cfg.schedule is not None:
        d["schedule"] = dataclasses.asdict(cfg.schedule)
    return json.loads(canonical_json(d))
