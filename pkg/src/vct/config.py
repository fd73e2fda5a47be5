"""Experiment configuration with a flat, dotted-key schema.

A config file is TOML with one ``section.key = value`` line per setting.
Every key has a documented default; unknown keys and ill-typed values are
rejected with the offending key path.  The resolved config is hashed so
every output of a run can be traced back to it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import tomli

from .encoder import EncoderConfig
from .m2ae import DecoderConfig, M2AEConfig
from .model import TaskSpec
from .prompts import MissingScenario, PromptConfig
from .synth import SynthConfig
from .train import TrainConfig

RUN_MODES = ("pretrain", "rand_init", "fine_last", "fine_all", "prompt_tune", "evaluate")

# key -> (default, type); a tuple type means "list of that element type"
SCHEMA: dict[str, tuple[Any, Any]] = {
    "run.mode": ("fine_all", str),
    "run.seed": (0, int),
    "run.views": (["ecg", "ppg"], (str,)),
    "model.patch_len": (10, int),
    "model.dim": (32, int),
    "model.depth": (4, int),
    "model.heads": (4, int),
    "model.ffn_mult": (4, int),
    "decoder.dim": (32, int),
    "decoder.depth": (1, int),
    "decoder.heads": (4, int),
    "mask.alpha_ecg": (0.8, float),
    "mask.alpha_ppg": (0.8, float),
    "mask.norm_targets": (False, bool),
    "cep.enabled": (True, bool),
    "cep.tau": (0.1, float),
    "cep.dim": (16, int),
    "cep.mode": ("separate", str),
    "loss.w_rec_ecg": (1.0, float),
    "loss.w_rec_ppg": (1.0, float),
    "loss.w_cep": (1.0, float),
    "data.path": ("", str),
    "data.n": (3000, int),
    "data.split": ([0.6, 0.2, 0.2], (float,)),
    "data.sample_rate": (50.0, float),
    "data.duration": (4.0, float),
    "data.heart_rate_mean": (60.0, float),
    "data.heart_rate_spread": (0.0, float),
    "data.rr_jitter": (0.0, float),
    "data.rr_jitter_choices": ([], (float,)),
    "data.ptt_lag": (0.2, float),
    "data.ptt_lag_min": (0.15, float),
    "data.ptt_lag_max": (0.30, float),
    "data.noise_std": (0.02, float),
    "data.baseline_wander_amp": (0.0, float),
    "data.standardize": (True, bool),
    "data.batch_size": (32, int),
    "task.kind": ("regression", str),
    "task.n_classes": (2, int),
    "optim.lr": (1e-3, float),
    "optim.weight_decay": (-1.0, float),  # negative: mode default (0.05 / 2e-2)
    "optim.warmup_fraction": (0.1, float),
    "optim.epochs": (20, int),
    "optim.patience": (5, int),
    "missing.enabled": (False, bool),
    "missing.kind": ("missing_both", str),
    "missing.beta": (70.0, float),
    "missing.applies_to": ("both", str),
    "prompt.style": ("input_tailored", str),
    "prompt.length": (20, int),
    "prompt.layers": ([1, 2, 3, 4], (int,)),
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending dotted key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(path: str, value: Any, kind: Any) -> Any:
    if isinstance(kind, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(f"{path}[{i}]", v, kind[0]) for i, v in enumerate(value)]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with a TOML value; bare words are read as strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    @classmethod
    def from_dict(cls, overrides: Mapping[str, Any] | None = None) -> "ExperimentConfig":
        resolved = {k: (list(d) if isinstance(d, list) else d) for k, (d, _) in SCHEMA.items()}
        for key, value in flatten(overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(key, "unknown configuration key")
            resolved[key] = _coerce(key, value, SCHEMA[key][1])
        cfg = cls(resolved)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Mapping[str, Any] | None = None) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                tree = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"malformed TOML: {exc}") from exc
        merged = flatten(tree)
        merged.update(flatten(overrides or {}))
        return cls.from_dict(merged)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update(flatten(overrides))
        return ExperimentConfig.from_dict(merged)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # ------------------------------------------------------------ views onto the library types

    def _check(self, path: str, fn) -> Any:
        try:
            return fn()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc

    def synth(self) -> SynthConfig:
        v = self.values
        lo, hi = v["data.ptt_lag_min"], v["data.ptt_lag_max"]
        cfg = SynthConfig(
            sample_rate=v["data.sample_rate"],
            duration=v["data.duration"],
            heart_rate_mean=v["data.heart_rate_mean"],
            heart_rate_spread=v["data.heart_rate_spread"],
            rr_jitter=v["data.rr_jitter"],
            rr_jitter_choices=tuple(v["data.rr_jitter_choices"]) or None,
            ptt_lag=v["data.ptt_lag"],
            ptt_lag_range=(lo, hi) if hi > lo else None,
            noise_std=v["data.noise_std"],
            baseline_wander_amp=v["data.baseline_wander_amp"],
            seed=v["run.seed"],
            patch_len=v["model.patch_len"],
        )
        self._check("data", cfg.validate)
        return cfg

    def encoder(self) -> EncoderConfig:
        v = self.values
        cfg = EncoderConfig(
            patch_len=v["model.patch_len"], dim=v["model.dim"], depth=v["model.depth"],
            heads=v["model.heads"], ffn_mult=v["model.ffn_mult"],
        )
        self._check("model.heads", cfg.validate)
        return cfg

    def m2ae(self) -> M2AEConfig:
        v = self.values
        return M2AEConfig(
            alpha_ecg=v["mask.alpha_ecg"],
            alpha_ppg=v["mask.alpha_ppg"],
            decoder=DecoderConfig(v["decoder.dim"], v["decoder.depth"], v["decoder.heads"]),
            w_rec_ecg=v["loss.w_rec_ecg"],
            w_rec_ppg=v["loss.w_rec_ppg"],
            w_cep=v["loss.w_cep"] if v["cep.enabled"] else 0.0,
            cep_dim=v["cep.dim"],
            tau=v["cep.tau"],
            cep_mode=v["cep.mode"],
            norm_targets=v["mask.norm_targets"],
        )

    def task(self) -> TaskSpec:
        spec = TaskSpec(self.values["task.kind"], self.values["task.n_classes"])
        self._check("task.kind", spec.validate)
        return spec

    def train(self) -> TrainConfig:
        v = self.values
        wd = v["optim.weight_decay"]
        tc = TrainConfig(
            epochs=v["optim.epochs"], batch_size=v["data.batch_size"], lr=v["optim.lr"],
            weight_decay=None if wd < 0 else wd, warmup_fraction=v["optim.warmup_fraction"],
            patience=v["optim.patience"], seed=v["run.seed"],
        )
        self._check("optim", tc.validate)
        return tc

    def scenario(self) -> MissingScenario | None:
        v = self.values
        if not v["missing.enabled"]:
            return None
        sc = MissingScenario(v["missing.kind"], v["missing.beta"], v["missing.applies_to"])
        self._check("missing", sc.validate)
        return sc

    def prompt(self) -> PromptConfig:
        v = self.values
        pc = PromptConfig(v["prompt.style"], v["prompt.length"], tuple(v["prompt.layers"]))
        self._check("prompt", lambda: pc.validate(v["model.depth"]))
        return pc

    def validate(self) -> None:
        v = self.values
        if v["run.mode"] not in RUN_MODES:
            raise ConfigError("run.mode", f"must be one of {RUN_MODES}")
        views = v["run.views"]
        if not views or any(x not in ("ecg", "ppg") for x in views) or len(set(views)) != len(views):
            raise ConfigError("run.views", f"must be a non-empty subset of [ecg, ppg], got {views}")
        if len(v["data.split"]) != 3 or abs(sum(v["data.split"]) - 1.0) > 1e-9:
            raise ConfigError("data.split", "needs three fractions summing to 1")
        for key in ("mask.alpha_ecg", "mask.alpha_ppg"):
            if not 0.0 < v[key] < 1.0:
                raise ConfigError(key, "mask rate must lie in (0, 1)")
        if v["cep.mode"] not in ("separate", "joint"):
            raise ConfigError("cep.mode", "must be separate or joint")
        if v["cep.tau"] <= 0:
            raise ConfigError("cep.tau", "temperature must be positive")
        if v["data.n"] < 3:
            raise ConfigError("data.n", "need at least three samples")
        if v["decoder.dim"] % v["decoder.heads"]:
            raise ConfigError("decoder.heads", "decoder dim must be divisible by heads")
        self.encoder()
        self.task()
        self.train()
        self.scenario()
        self.prompt()
        if not v["data.path"]:
            self.synth()

    # ------------------------------------------------------------ persistence

    def canonical(self) -> str:
        return json.dumps(dict(self.values), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = [f"# config_hash = {self.hash()}"]
        for key in sorted(self.values):
            lines.append(f"{key} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} to TOML")
