"""Experiment configuration with per-method, per-environment defaults."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import geometry as geo
from .baselines.pg import PGConfig
from .baselines.seq import PPOConfig
from .exceptions import InvalidInputError
from .learner import LearnerConfig

METHODS = ("our_t", "our_c", "inter", "two_one", "cut", "seq", "pg")
TREE_METHODS = {"our_t": "midpoint", "our_c": "midpoint", "inter": "inter",
                "two_one": "two_one", "cut": "cut"}

# (D_max, epsilon, T) per environment kind
TASKS = {
    "matsumoto": (6, 0.1, 20_000_000),
    "carlike": (6, 0.2, 80_000_000),
    "euclid2d_obstacles": (6, 0.1, 40_000_000),
    "kinematic_arm": (6, 0.2, 40_000_000),
    "multi_agent": (6, 0.2, 80_000_000),
}

PG_CYCLES = {
    "matsumoto": [1000, 538, 538, 538, 538, 538],
    "carlike": [2117] * 6,
    "multi_agent": [2117] * 6,
    "euclid2d_obstacles": [1059] * 6,
    "kinematic_arm": [1059] * 6,
}


def family(kind):
    return "matsumoto" if kind == "matsumoto" else "others"


def method_defaults(method, kind):
    """Hyperparameter defaults for a (method, environment) combination."""
    fam = family(kind)
    hidden = [64, 64] if fam == "matsumoto" else [400, 300, 300]
    if method in TREE_METHODS:
        if method == "our_t":
            schedule = "timestep_based"
        elif method == "our_c":
            schedule = "cycle_based"
        else:
            schedule = "cycle_based" if kind in ("matsumoto", "carlike") else "timestep_based"
        return {"lr": 3e-5 if fam == "matsumoto" else 1e-6, "batch": 256, "epochs": 10,
                "hidden": hidden, "activation": "relu", "schedule": schedule,
                "variant": TREE_METHODS[method], "c_cut": 30.0, "td_lambda": None}
    if method == "seq":
        return {"lr": 3e-3 if fam == "matsumoto" else 3e-4, "batch": 128, "epochs": 10,
                "hidden": hidden, "activation": "tanh", "gae_lambda": 0.95, "clip": 0.2,
                "ent_coef": 0.0, "vf_coef": 0.5, "max_grad_norm": 0.5, "n_steps": 2048, "n_envs": 8}
    if method == "pg":
        return {"lr": 5e-3, "batch": 300, "epochs": 1, "hidden": hidden, "activation": "tanh",
                "clip": 0.2, "ent_coef": 1.0, "samples_per_episode": 10,
                "episodes_per_cycle": 30, "cycles": None}
    raise InvalidInputError(f"unknown method {method!r}")


@dataclass
class ExperimentConfig:
    environment: dict
    method: str
    seed: int = 0
    T: int | None = None
    D_max: int | None = None
    epsilon: float | None = None
    out: str = "runs/default"
    eval_every: int = 0
    checkpoint_every: int = 0
    pair_count: int = 100
    pair_seed: int = 12345
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.environment, dict) or "kind" not in self.environment:
            raise InvalidInputError("config needs an 'environment' mapping with a 'kind'")
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; choose from {METHODS}")
        kind = self.environment["kind"]
        if kind not in geo.KINDS:
            raise InvalidInputError(f"unknown environment kind {kind!r}")
        D, eps, T = TASKS[kind]
        self.D_max = D if self.D_max is None else int(self.D_max)
        self.epsilon = eps if self.epsilon is None else float(self.epsilon)
        self.T = T if self.T is None else int(self.T)
        base = method_defaults(self.method, kind)
        unknown = set(self.hyper) - set(base)
        if unknown:
            raise InvalidInputError(f"unknown hyperparameters for {self.method}: {sorted(unknown)}")
        self.hyper = {**base, **self.hyper}

    @property
    def env(self):
        return geo.env_from_dict(self.environment)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "environment" not in d:
            raise InvalidInputError("config is missing the 'environment' key")
        if "method" not in d:
            raise InvalidInputError("config is missing the 'method' key")
        known = {f.name for f in fields(cls)}
        hyper = dict(d.pop("hyper", {}) or {})
        for key in list(d):
            if key not in known:
                hyper[key] = d.pop(key)
        return cls(hyper=hyper, **d)

    # -- per-method configs ---------------------------------------------
    def learner_config(self):
        h = self.hyper
        return LearnerConfig(T=self.T, D_max=self.D_max, epsilon=self.epsilon,
                             schedule=h["schedule"], variant=h["variant"], c_cut=h["c_cut"],
                             td_lambda=h["td_lambda"], lr=h["lr"], hidden=list(h["hidden"]),
                             activation=h["activation"], batch_size=h["batch"],
                             n_epochs=h["epochs"], seed=self.seed, eval_every=self.eval_every,
                             checkpoint_every=self.checkpoint_every, pair_count=self.pair_count,
                             pair_seed=self.pair_seed)

    def ppo_config(self):
        h = self.hyper
        return PPOConfig(T=self.T, epsilon=self.epsilon, horizon=2**self.D_max, lr=h["lr"],
                         hidden=list(h["hidden"]), activation=h["activation"],
                         batch_size=h["batch"], n_epochs=h["epochs"], n_steps=h["n_steps"],
                         n_envs=h["n_envs"], gae_lambda=h["gae_lambda"], clip=h["clip"],
                         ent_coef=h["ent_coef"], vf_coef=h["vf_coef"],
                         max_grad_norm=h["max_grad_norm"], seed=self.seed,
                         eval_every=self.eval_every)

    def pg_config(self):
        h = self.hyper
        cycles = h["cycles"] or PG_CYCLES[self.environment["kind"]][: self.D_max]
        if len(cycles) < self.D_max:
            cycles = list(cycles) + [cycles[-1]] * (self.D_max - len(cycles))
        return PGConfig(D_max=self.D_max, epsilon=self.epsilon, cycles=list(cycles), lr=h["lr"],
                        hidden=list(h["hidden"]), activation=h["activation"],
                        episodes_per_cycle=h["episodes_per_cycle"],
                        samples_per_episode=h["samples_per_episode"], clip=h["clip"],
                        ent_coef=h["ent_coef"], n_epochs=h["epochs"], seed=self.seed,
                        eval_every=self.eval_every)


def load_config(path):
    path = Path(path)
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path} does not contain a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(cfg, path):
    path = Path(path)
    data = cfg.to_dict()
    if path.suffix in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(data, sort_keys=True))
    else:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
