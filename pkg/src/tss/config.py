"""Experiment configuration: parsing, validation, manifests.

The on-disk format is TOML with three tables (``[model]``, ``[windows]``,
``[run]``) and an optional ``[output]`` table.  Unknown keys are errors:
silent typos in sampler parameters are the dominant operational hazard.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .models import make_model
from .windows import WindowSpecError, build_layout

__all__ = ["ExperimentConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


_RUN_KEYS = {
    "replicas": 1,
    "cycles": 1000,
    "nu": 1,
    "n_md": 0,
    "eta": 2.0,
    "alpha": 0.19,
    "n_epochs": 32,
    "eps_gamma": 0.01,
    "eps_pi": 0.001,
    "gamma": "auto",
    "seed": 0,
    "initial_rung": 0,
    "report_every": 100,
    "error_every": 1000,
    "global_every": 1,
    "anchor_rung": 0,
    "epoch_phi": 0.0,  # 0 means "derive from alpha and n_epochs"
}


@dataclass
class ExperimentConfig:
    model_name: str
    model_params: dict = field(default_factory=dict)
    windows: dict = field(default_factory=lambda: {"mode": "full_double"})
    replicas: int = 1
    cycles: int = 1000
    nu: int = 1
    n_md: int = 0
    eta: float = 2.0
    alpha: float = 0.19
    n_epochs: int = 32
    eps_gamma: float = 0.01
    eps_pi: float = 0.001
    gamma: object = "auto"
    seed: int = 0
    initial_rung: int = 0
    report_every: int = 100
    error_every: int = 1000
    global_every: int = 1
    anchor_rung: int = 0
    epoch_phi: float = 0.0
    output_dir: str = ""

    @property
    def phi(self) -> float:
        """Epoch base multiplier: alpha**(-1/n_epochs), or the explicit override."""
        if self.epoch_phi:
            return float(self.epoch_phi)
        if self.alpha > 0.0:
            return float(self.alpha ** (-1.0 / self.n_epochs))
        return 2.0  # full-history runs still get epochs for the jackknife

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown_tables = set(data) - {"model", "windows", "run", "output"}
        if unknown_tables:
            raise ConfigError(f"unknown config tables: {sorted(unknown_tables)}")
        model = dict(data.get("model") or {})
        if "name" not in model:
            raise ConfigError("[model] needs a 'name' key")
        name = model.pop("name")

        windows = dict(data.get("windows") or {"mode": "full_double"})
        if "mode" not in windows:
            raise ConfigError("[windows] needs a 'mode' key")
        allowed_window_keys = {"mode", "members", "size", "overlap"}
        bad = set(windows) - allowed_window_keys
        if bad:
            raise ConfigError(f"unknown [windows] keys: {sorted(bad)}")

        run = dict(data.get("run") or {})
        bad = set(run) - set(_RUN_KEYS)
        if bad:
            raise ConfigError(f"unknown [run] keys: {sorted(bad)}")
        merged = dict(_RUN_KEYS)
        merged.update(run)

        output = dict(data.get("output") or {})
        bad = set(output) - {"directory"}
        if bad:
            raise ConfigError(f"unknown [output] keys: {sorted(bad)}")

        return cls(
            model_name=name,
            model_params=model,
            windows=windows,
            output_dir=output.get("directory", ""),
            **merged,
        )

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    @classmethod
    def from_manifest(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            manifest = json.load(fh)
        return cls.from_dict(manifest["config"])

    def to_dict(self) -> dict:
        run = {key: getattr(self, key) for key in _RUN_KEYS}
        out = {
            "model": {"name": self.model_name, **self.model_params},
            "windows": dict(self.windows),
            "run": run,
        }
        if self.output_dir:
            out["output"] = {"directory": self.output_dir}
        return out

    def build_model(self):
        return make_model(self.model_name, **self.model_params)

    def build_layout(self, family=None):
        family = family or self.build_model()
        return build_layout(family.count, self.windows)

    def validate(self) -> list:
        """Field-level checks; returns report lines ('ok: ...' / 'error: ...')."""
        report = []

        def ok(msg):
            report.append(f"ok: {msg}")

        def err(msg):
            report.append(f"error: {msg}")

        family = None
        try:
            family = self.build_model()
            ok(f"model {self.model_name} with K={family.count} rungs")
        except Exception as exc:
            err(f"model: {exc}")
        if family is not None:
            try:
                layout = self.build_layout(family)
                ok(f"windows: J={layout.count}, double cover validated")
            except WindowSpecError as exc:
                err(f"windows: {type(exc).__name__}: {exc}")
            if not 0 <= self.initial_rung < family.count:
                err(f"initial_rung {self.initial_rung} outside [0, {family.count})")
            if not 0 <= self.anchor_rung < family.count:
                err(f"anchor_rung {self.anchor_rung} outside [0, {family.count})")
        if self.replicas < 1:
            err(f"replicas must be positive, got {self.replicas}")
        if self.cycles < 0:
            err(f"cycles must be nonnegative, got {self.cycles}")
        if self.nu < 1:
            err(f"nu must be a positive integer, got {self.nu}")
        if self.eta < 0:
            err(f"eta must be nonnegative, got {self.eta}")
        if not 0.0 <= self.alpha < 1.0:
            err(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n_epochs < 1:
            err(f"n_epochs must be positive, got {self.n_epochs}")
        for label, value in (("eps_gamma", self.eps_gamma), ("eps_pi", self.eps_pi)):
            if not 0.0 < value <= 1.0:
                err(f"{label} must lie in (0, 1], got {value}")
        if family is not None and not family.has_exact_sampler:
            if self.n_md <= 0:
                err("kernel-based model needs n_md > 0")
            elif self.n_md % self.nu:
                err(f"nu={self.nu} must divide n_md={self.n_md}")
        for label, value in (
            ("report_every", self.report_every),
            ("error_every", self.error_every),
            ("global_every", self.global_every),
        ):
            if value < 1:
                err(f"{label} must be positive, got {value}")
        ok(f"derived epoch multiplier phi = {self.phi:.6g}")
        return report

    def is_valid(self) -> bool:
        return not any(line.startswith("error:") for line in self.validate())


def write_manifest(config: ExperimentConfig, path, version: str):
    payload = {"format": "tss-run-manifest", "version": version, "config": config.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
