"""YAML experiment configuration."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Mapping

import yaml

from .errors import UsageError
from .quantum import DELTA_RANGE, build_optomech_model, build_tls_model, optomech_params

DEFAULTS = {
    "model": {"family": "optomech", "params": {}, "dims": [6, 12]},
    "prior": None,
    "n_clicks": None,
    "library_size": 20000,
    "seed": 0,
    "dark_count_rate": 0.0,
    "abc": {"target_accept": 0.005, "target_count": None, "n_bins": 40, "hist_spacing": "linear"},
    "train": {"loss": "mse", "frontend": "sequence", "epochs": 500, "batch_size": 64, "learning_rate": 1e-3,
              "patience": 20, "val_fraction": 0.1, "lam": 0.8, "seed": 0},
    "grid": {"points": 101},
    "evaluation": {"suite": "rmse"},
}

FAMILY_DEFAULTS = {
    "tls": {"prior": {"delta": [0.0, 2.0], "omega": [0.0, 2.0]}, "n_clicks": 50},
    "optomech": {"prior": {"delta": list(DELTA_RANGE)}, "n_clicks": 80},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """``"a.b=3"`` -> ``{"a": {"b": 3}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise UsageError(f"override {text!r} must look like key.sub=value")
    key, raw = text.split("=", 1)
    node = yaml.safe_load(raw)
    for part in reversed(key.strip().split(".")):
        node = {part: node}
    return node


class ExperimentConfig(dict):
    """Plain dict with defaults filled in and a stable content hash."""

    @classmethod
    def load(cls, path: str | Path | None = None, overrides=()) -> "ExperimentConfig":
        data = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise UsageError(f"config file {p} not found")
            data = yaml.safe_load(p.read_text()) or {}
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: Mapping, overrides=()) -> "ExperimentConfig":
        cfg = _merge(DEFAULTS, data)
        for o in overrides:
            cfg = _merge(cfg, parse_override(o) if isinstance(o, str) else o)
        family = cfg["model"]["family"]
        if family not in FAMILY_DEFAULTS:
            raise UsageError(f"unknown model family {family!r}")
        for k, v in FAMILY_DEFAULTS[family].items():
            if cfg.get(k) is None:
                cfg[k] = copy.deepcopy(v)
        for name, (lo, hi) in cfg["prior"].items():
            if not hi > lo:
                raise UsageError(f"prior range for {name} is degenerate")
        return cls(cfg)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self, sort_keys=True, default=str).encode()).hexdigest()[:12]

    def base_model(self):
        m = self["model"]
        params = dict(m.get("params") or {})
        if m["family"] == "tls":
            return build_tls_model(params.get("delta", 1.0), params.get("omega", 1.0), params.get("kappa", 1.0))
        return build_optomech_model(optomech_params(**params), *m.get("dims", [6, 12]))

    def fixed_params(self) -> dict:
        """Estimated-parameter values held fixed because they are absent from the prior."""
        base = self.base_model()
        return {n: v for n, v in base.theta.as_dict().items() if n not in self["prior"]}
