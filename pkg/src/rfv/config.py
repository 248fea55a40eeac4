"""Run configuration: one JSON document covering every module, schema-validated."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .policy import PolicyConfig
from .sim.evaluate import ExperimentConfig

ENV_VAR = "RFV_CONFIG"

DEFAULTS = {
    "seed": 0,
    "embedder": {"dim": 128, "kind": "hashed-bow"},
    "featurizer": {"grid": 4, "d_model": 64, "seed": 0},
    "tome": {"keep_fraction": 0.1},
    "policy": {"d_hidden": 128, "heads": 4, "layers": 2, "horizon": 8, "dof": 4,
               "k_retrieved": 3, "lr": 1e-3, "fusion_mode": "paper", "views": ["top"],
               "use_retrieval": True, "zero_traj": False, "zero_mask": False,
               "max_robot_len": 128, "max_memory_len": 512, "batch_size": 16,
               "steps": 1500, "ensemble": True, "ensemble_m": 0.1, "text_dropout": 0.5},
    "sim": {"demos_per_task": 10, "bank_per_task": 144, "seeds": [0, 1, 2],
            "episodes": 20, "max_steps": 40, "demo_seed": 0, "bank_seed": 0},
    "paths": {},
}


def schema() -> dict:
    text = resources.files("rfv").joinpath("schema/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            jsonschema.validate(d, schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
        return cls(_merge(DEFAULTS, d))

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "RunConfig":
        """Read ``path``, else the file named by $RFV_CONFIG, else defaults."""
        path = path or os.environ.get(ENV_VAR)
        if not path:
            return cls()
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def path(self, key: str) -> str | None:
        return self.data["paths"].get(key)

    def policy_config(self, seed: int | None = None) -> PolicyConfig:
        p = dict(self.data["policy"])
        f = self.data["featurizer"]
        p["views"] = tuple(p["views"])
        return PolicyConfig(d_model=f["d_model"], grid=f["grid"], featurizer_seed=f["seed"],
                            embed_dim=self.data["embedder"]["dim"],
                            keep_fraction=self.data["tome"]["keep_fraction"],
                            seed=self.seed if seed is None else seed, **p)

    def experiment_config(self, seed: int | None = None) -> ExperimentConfig:
        s = self.data["sim"]
        seed = self.seed if seed is None else seed
        return ExperimentConfig(policy=self.policy_config(seed), demos_per_task=s["demos_per_task"],
                                bank_per_task=s["bank_per_task"], seeds=tuple(s["seeds"]),
                                episodes=s["episodes"], max_steps=s["max_steps"],
                                demo_seed=s["demo_seed"] + seed, bank_seed=s["bank_seed"] + seed)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, data=_merge(cfg.data, {"seed": int(seed)}))
