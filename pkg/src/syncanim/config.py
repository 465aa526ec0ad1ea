"""Flat key=value run configuration shared by every CLI subcommand.

Resolution order for each key: CLI flag > config file > environment
(SYNCANIM_SEED for "seed" only) > schema default.  Unknown keys in a
config file are rejected before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigInvalid

SEED_ENV_VAR = "SYNCANIM_SEED"


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigInvalid(f"expected a boolean, got {v!r}")


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "global RNG seed; SYNCANIM_SEED env var is the fallback"),
    "out": Key(str, None, "output directory for the subcommand"),
    "dataset": Key(str, None, "dataset bundle directory"),
    "ckpt": Key(str, None, "checkpoint directory"),
    "audio": Key(str, None, "input WAV file (16-bit PCM)"),
    "pred": Key(str, None, "inference output directory to evaluate"),
    "mode": Key(str, "one-shot", "inference mode: one-shot | zero-shot"),
    "split": Key(str, "eval", "dataset split driving inference: eval | train"),
    "stage": Key(str, "all", "training stage: 1 | 2 | 3 | all"),
    "profile": Key(str, "desk", "training profile: desk | paper"),
    "n_train": Key(int, 100, "synthetic training frames"),
    "n_eval": Key(int, 50, "synthetic eval frames"),
    "fps": Key(float, 25.0, "video frame rate"),
    "resolution": Key(int, 64, "frame resolution in pixels"),
    "blink_period": Key(float, 2.0, "seconds between synthetic blinks"),
    "audio_coupling": Key(float, 1.0, "gain linking the audio envelope to pose/brow motion"),
    "stage1_steps": Key(int, -1, "stage-1 steps (-1 uses the profile default)"),
    "stage2_steps": Key(int, -1, "stage-2 steps (-1 uses the profile default)"),
    "stage3_steps": Key(int, -1, "stage-3 steps (-1 uses the profile default)"),
    "rays_per_iter": Key(int, -1, "rays per training iteration (-1 uses the profile default)"),
    "n_samples": Key(int, -1, "samples per ray (-1 uses the profile default)"),
    "lr_field": Key(float, 0.01, "learning rate for hash encoders and field networks"),
    "lr_audio": Key(float, 0.001, "learning rate for the pose/expression generators"),
    "batch_frames": Key(int, 16, "frames per generator training batch"),
    "lambda_lip": Key(float, 0.01, "weight of the lip perceptual proxy in stage 3"),
    "single_thread": Key(bool, True, "force single-thread math for bit reproducibility"),
    "unfreeze_pose_stage2": Key(bool, False, "keep training the pose generator in stage 2"),
    "render": Key(bool, True, "render frames during inference"),
    "json": Key(bool, False, "also write a machine-readable JSON report"),
    "n_frames": Key(int, 25, "frames to run in the benchmark"),
}


def parse_config_file(path: Path | str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigInvalid(f"config file {p} does not exist")
    out: dict[str, str] = {}
    for ln, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{p}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def _coerce(key: str, raw: Any) -> Any:
    spec = SCHEMA[key]
    if raw is None:
        return None
    if spec.type is bool:
        return raw if isinstance(raw, bool) else _parse_bool(raw)
    try:
        return spec.type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"key {key!r}: cannot parse {raw!r} as {spec.type.__name__}") from exc


def resolve_config(cli_values: dict[str, Any], config_file: str | None = None) -> dict[str, Any]:
    """Merge defaults, env, file and CLI values into one validated mapping."""
    resolved = {k: spec.default for k, spec in SCHEMA.items()}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        resolved["seed"] = _coerce("seed", env_seed)
    if config_file is not None:
        for key, raw in parse_config_file(config_file).items():
            if key not in SCHEMA:
                raise ConfigInvalid(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, raw)
    for key, raw in cli_values.items():
        if key not in SCHEMA:
            raise ConfigInvalid(f"unknown config key {key!r}")
        if raw is not None:
            resolved[key] = _coerce(key, raw)
    _validate(resolved)
    return resolved


def _validate(cfg: dict[str, Any]) -> None:
    if cfg["mode"] not in ("one-shot", "zero-shot"):
        raise ConfigInvalid(f"mode must be one-shot or zero-shot, got {cfg['mode']!r}")
    if cfg["split"] not in ("eval", "train"):
        raise ConfigInvalid(f"split must be eval or train, got {cfg['split']!r}")
    if cfg["stage"] not in ("1", "2", "3", "all"):
        raise ConfigInvalid(f"stage must be 1, 2, 3 or all, got {cfg['stage']!r}")
    if cfg["profile"] not in ("desk", "paper"):
        raise ConfigInvalid(f"profile must be desk or paper, got {cfg['profile']!r}")
    for key in ("n_train", "n_eval", "resolution", "batch_frames"):
        if cfg[key] is not None and cfg[key] < 1:
            raise ConfigInvalid(f"key {key!r} must be positive")


def format_config(cfg: dict[str, Any]) -> str:
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
