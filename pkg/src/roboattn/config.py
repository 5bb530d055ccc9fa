"""Toolkit configuration: defaults, JSON config files and validation.

Precedence is defaults < config file < command-line flags. The config file
path comes from ``--config`` or the ``ROBOATTN_CONFIG`` environment
variable.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

from roboattn import corruptions
from roboattn.errors import InvalidInput

CONFIG_ENV = "ROBOATTN_CONFIG"


def _defaults() -> dict:
    return {
        "seed": 0,
        "workers": 1,
        "eps": 1e-8,
        "knowledge": {"p": 98.0, "eta": 0.1, "alpha": 0.3},
        "fusion": {
            "logit_step": 0.5,
            "e_step": 0.1,
            "max_iter": 500,
            "tol": 1e-6,
            "direction": "natural",
        },
        "mixup": {
            "mode": "soft",
            "alpha_beta": 10.0,
            "top_k": 0.125,
            "crop_min": 0.5,
            "crop_max": 1.0,
            "eta_reg": 1.0,
            "batch_size": 32,
        },
        "corruption": {
            "kinds": list(corruptions.KINDS),
            "severities": [corruptions.DEFAULT_SEVERITY],
        },
        "bench": {"deltas": [2.0, 2.5, 3.0, 3.5, 4.0]},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise InvalidInput(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidInput(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class Config:
    values: dict = field(default_factory=_defaults)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "Config":
        from roboattn.io import read_json

        values = _defaults()
        path = path or os.environ.get(CONFIG_ENV)
        if path:
            values = _merge(values, read_json(path))
        if overrides:
            values = _merge(values, overrides)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values

        def need(ok: bool, msg: str):
            if not ok:
                raise InvalidInput(f"config: {msg}")

        need(isinstance(v["seed"], int) and v["seed"] >= 0, "seed must be a nonnegative int")
        need(isinstance(v["workers"], int) and v["workers"] >= 1, "workers must be >= 1")
        need(0 < v["eps"] < 1e-3, "eps must be in (0, 1e-3)")
        k = v["knowledge"]
        need(0 < k["p"] <= 100, "knowledge.p must be in (0, 100]")
        need(0 < k["eta"] <= 1, "knowledge.eta must be in (0, 1]")
        need(k["alpha"] > 0, "knowledge.alpha must be positive")
        f = v["fusion"]
        need(f["logit_step"] > 0 and f["e_step"] > 0, "fusion steps must be positive")
        need(isinstance(f["max_iter"], int) and f["max_iter"] >= 0, "fusion.max_iter must be >= 0")
        need(f["tol"] >= 0, "fusion.tol must be >= 0")
        need(f["direction"] in ("natural", "gradient"), "fusion.direction is natural|gradient")
        m = v["mixup"]
        need(m["mode"] in ("soft", "vanilla"), "mixup.mode is soft|vanilla")
        need(m["alpha_beta"] > 0, "mixup.alpha_beta must be positive")
        need(0 < m["top_k"] <= 1, "mixup.top_k must be in (0, 1]")
        need(0 < m["crop_min"] <= m["crop_max"] <= 1, "need 0 < crop_min <= crop_max <= 1")
        need(m["eta_reg"] >= 0, "mixup.eta_reg must be >= 0")
        need(isinstance(m["batch_size"], int) and m["batch_size"] >= 1, "mixup.batch_size must be >= 1")
        c = v["corruption"]
        need(len(c["kinds"]) > 0, "corruption.kinds empty")
        for kind in c["kinds"]:
            need(kind in corruptions.KINDS, f"unknown corruption kind {kind!r}")
        for s in c["severities"]:
            need(s in range(1, 6), f"severity {s!r} not in 1..5")
        for d in v["bench"]["deltas"]:
            need(d > 0, "bench.deltas must be positive")
