"""Application configuration: one JSON document with a section per component.

Every key has a default; unknown keys are rejected. ``seed`` at the top level
seeds every component, and the ``DIALOFLOW_SEED`` environment variable
overrides it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from . import cfm, dialm
from .pipeline import PipelineConfig

SEED_ENV = "DIALOFLOW_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 500
    n_heldout: int = 50
    turns: tuple = (2, 4)
    turn_len: tuple = (4, 7)
    overlap_prob: float = 0.3
    overlap_len: tuple = (2, 2)
    backchannel_prob: float = 0.0
    cfm_items: int = 400
    cfm_tokens: int = 16
    cfm_heldout: int = 10
    cfm_heldout_tokens: int = 40
    feature_sigma: float = 0.1


@dataclass(frozen=True)
class ChunkConfig:
    p: int = 1
    q: int = 1
    n_ode: int = 32
    strict: bool = True


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"
    logs: str = "logs"


SECTIONS = {
    "data": DataConfig,
    "dialm": dialm.DialmConfig,
    "dialm_train": dialm.TrainSettings,
    "cfm": cfm.CfmConfig,
    "cfm_train": cfm.CfmTrainSettings,
    "chunk": ChunkConfig,
    "pipeline": PipelineConfig,
    "paths": PathsConfig,
}
PRESETS = {
    "desk": {},
    "full": {"dialm": dialm.FULL_SCALE, "cfm": cfm.FULL_SCALE},
}


@dataclass(frozen=True)
class AppConfig:
    seed: int = 0
    preset: str = "desk"
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed, "preset": self.preset}
        for name, sec in self.sections.items():
            d = sec.to_dict() if hasattr(sec, "to_dict") else dataclasses.asdict(sec)
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        return json.loads(json.dumps(out))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(cls, name: str, raw: dict, base) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    vals = {}
    for f in fields(cls):
        v = raw.get(f.name, getattr(base, f.name))
        default = getattr(base, f.name)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{name}.{f.name} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{f.name} must be a number")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{name}.{f.name} must be an integer")
        vals[f.name] = v
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {dotted!r}")
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value``; the value is read as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def build_config(doc: dict | None = None, overrides: list[str] | None = None,
                 env: dict | None = None) -> AppConfig:
    doc = json.loads(json.dumps(doc or {}))
    for o in overrides or []:
        _set_path(doc, *parse_override(o))
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed", "preset"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    seed = doc.get("seed", 0)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    sections = {}
    for name, cls in SECTIONS.items():
        base = PRESETS[preset].get(name, cls())
        sec = _coerce(cls, name, doc.get(name, {}), base)
        if "seed" in {f.name for f in fields(cls)}:
            sec = dataclasses.replace(sec, seed=seed)
        sections[name] = sec
    return AppConfig(seed, preset, sections)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                env: dict | None = None) -> AppConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    return build_config(doc, overrides, env)
