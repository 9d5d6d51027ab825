"""Per-depth sub-goal-tree policy gradient, modified to predict midpoints.

Policy ``pi_D`` places the root midpoint of a depth-``D`` tree; the frozen
lower policies fill the remaining levels deterministically. Policies are
trained in ascending order of depth and applied in descending order.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import geometry as geo
from .. import neural as nn
from ..evaluation import EvalTaskSpec, TimestepLedger, evaluate_success
from ..exceptions import InvalidInputError, NonFiniteLossError
from .seq import Vector, clipped_surrogate

log = logging.getLogger(__name__)

BASE_STD = 0.05


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class PGPolicy:
    """Gaussian midpoint policy: mean (s+g)/2 + residual, distance-scaled deviation."""

    def __init__(self, env, net, offsets):
        self.env = env
        self.net = net
        self.offsets = offsets

    @classmethod
    def create(cls, env, hidden, rng, activation="tanh"):
        d = env.d_rep
        return cls(env, nn.init_mlp([2 * d, *hidden, 2 * d], activation, rng), Vector(np.zeros(d)))

    def distribution(self, s, g):
        out, cache = nn.forward(self.net, np.concatenate([s, g], axis=-1))
        d = s.shape[-1]
        resid, sig = out[..., :d], out[..., d:]
        dist = np.linalg.norm(g - s, axis=-1, keepdims=True)
        mean = 0.5 * (s + g) + resid
        std = softplus(sig) + (BASE_STD + softplus(self.offsets.value)) * dist
        return mean, std, (cache, sig, dist)


def pg_sample_midpoint(policy, s, g, rng=None):
    """Sample a root midpoint; returns (point, log_density). ``rng=None`` gives the mean."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    mean, std, _ = policy.distribution(s, g)
    x = mean if rng is None else mean + std * rng.standard_normal(mean.shape)
    return x, nn.gaussian_log_density(mean, std, x)


@dataclass
class PGPolicyStack:
    policies: list
    trained: int = 0
    method: str = "pg"

    def __post_init__(self):
        self.env = self.policies[0].env if self.policies else None

    def generate(self, s, g, depth):
        return pg_generate(self, s, g, depth)


def pg_generate(stack, s, g, D, root_points=None):
    """Fill a depth-``D`` tree with pi_D at the root, then pi_{D-1}, ..., pi_1 (means).

    ``root_points`` overrides the root midpoint (used while training pi_D).
    """
    if D > len(stack.policies) or (root_points is None and D > stack.trained):
        raise InvalidInputError(f"depth {D} exceeds the trained stack ({stack.trained})")
    env = stack.env
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    n, d = s.shape
    pts = np.empty((n, 2**D + 1, d))
    pts[:, 0] = s
    pts[:, -1] = g
    for i in range(D):
        step = 2 ** (D - i)
        left = np.arange(2**i) * step
        mid = left + step // 2
        if i == 0 and root_points is not None:
            raw = root_points
        else:
            a = pts[:, left].reshape(-1, d)
            b = pts[:, left + step].reshape(-1, d)
            raw, _ = pg_sample_midpoint(stack.policies[D - i - 1], a, b)
        pts[:, mid] = geo.clamp_project(env, raw).reshape(n, len(mid), d)
    return pts


def half_costs(env, pts):
    """c_tau: squared cost of the first half plus squared cost of the second half."""
    costs = geo.obstructed_cost(env, pts[:, :-1], pts[:, 1:], check=False)
    half = costs.shape[1] // 2
    return costs[:, :half].sum(1) ** 2 + costs[:, half:].sum(1) ** 2


@dataclass
class PGConfig:
    D_max: int = 6
    epsilon: float = 0.1
    cycles: list = field(default_factory=lambda: [1000, 538, 538, 538, 538, 538])
    lr: float = 5e-3
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    episodes_per_cycle: int = 30
    samples_per_episode: int = 10
    clip: float = 0.2
    ent_coef: float = 1.0
    n_epochs: int = 1
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if len(self.cycles) != self.D_max:
            raise InvalidInputError("need one cycle budget per depth")


def pg_update(policy, opts, s, g, x, old_logp, adv, cfg):
    """One clipped-surrogate step with entropy bonus; ``adv`` is the negated centered cost."""
    m = len(s)
    mean, std, (cache, sig, dist) = policy.distribution(s, g)
    logp = nn.gaussian_log_density(mean, std, x)
    ratio = np.exp(logp - old_logp)
    obj, dobj = clipped_surrogate(ratio, adv, cfg.clip)
    entropy = np.log(std).sum(-1) + 0.5 * x.shape[-1] * (1 + np.log(2 * np.pi))
    loss = -obj.mean() - cfg.ent_coef * entropy.mean()
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite policy-gradient loss")
    z = (x - mean) / std
    w = (-dobj / m)[:, None]
    g_mean = w * z / std
    g_std = w * (z * z - 1.0) / std - cfg.ent_coef / (m * std)
    g_sig = g_std * sigmoid(sig)
    g_off = (g_std * dist).sum(0) * sigmoid(policy.offsets.value)
    gnet, _ = nn.backward(policy.net, cache, np.concatenate([g_mean, g_sig], axis=-1))
    nn.adam_step(opts[0], policy.net, gnet)
    nn.adam_step(opts[1], policy.offsets, [g_off])
    return float(loss)


def pg_train(env, cfg, eval_pairs=None, out_dir=None):
    """Train pi_1 .. pi_Dmax in ascending order; returns (stack, log rows)."""
    rng = np.random.default_rng(cfg.seed)
    policies = [PGPolicy.create(env, cfg.hidden, rng, cfg.activation) for _ in range(cfg.D_max)]
    stack = PGPolicyStack(policies, 0)
    ledger = TimestepLedger()
    history = []
    E, K = cfg.episodes_per_cycle, cfg.samples_per_episode
    for D in range(1, cfg.D_max + 1):
        pol = policies[D - 1]
        opts = [nn.init_adam(pol.net, cfg.lr), nn.init_adam(pol.offsets, cfg.lr)]
        stack.trained = D
        for cycle in range(cfg.cycles[D - 1]):
            ends = geo.sample_free(env, rng, 2 * E)
            s = np.repeat(ends[0::2], K, axis=0)
            g = np.repeat(ends[1::2], K, axis=0)
            x, logp = pg_sample_midpoint(pol, s, g, rng)
            pts = pg_generate(stack, s, g, D, root_points=x)
            ledger.record("tree", D, count=E * K)
            c_tau = half_costs(env, pts)
            baseline = c_tau.reshape(E, K).mean(1).repeat(K)
            adv = -(c_tau - baseline)
            for _ in range(cfg.n_epochs):
                loss = pg_update(pol, opts, s, g, x, logp, adv, cfg)
            if cfg.eval_every and eval_pairs is not None and (cycle + 1) % cfg.eval_every == 0:
                task = EvalTaskSpec(2**D, cfg.epsilon, 1)
                rate = evaluate_success(stack, env, eval_pairs, task, ledger.total(), depth=D).success_rate
                history.append({"timestep": ledger.total(), "depth": D, "success_rate": rate,
                                "loss": loss})
                log.info("pg D=%d t=%d success=%.3f", D, ledger.total(), rate)
    if out_dir is not None:
        save_stack(Path(out_dir) / "checkpoints" / "final.ckpt", env, cfg, stack, ledger.total(), history)
    return stack, history, ledger


def save_stack(path, env, cfg, stack, timestep, history):
    nets = {f"pi_{k + 1}": p.net for k, p in enumerate(stack.policies)}
    extra = {f"offsets_{k + 1}": p.offsets.value for k, p in enumerate(stack.policies)}
    meta = {"method": "pg", "env": env.to_dict(), "config": asdict(cfg), "timestep": timestep,
            "trained": stack.trained, "log": history}
    nn.save_checkpoint(path, nets, d_rep=env.d_rep, meta=meta, extra_arrays=extra)


def load_stack(path):
    nets, _, header, extra = nn.load_checkpoint(path)
    meta = header["meta"]
    env = geo.env_from_dict(meta["env"])
    cfg = PGConfig(**meta["config"])
    policies = [PGPolicy(env, nets[f"pi_{k + 1}"], Vector(extra[f"offsets_{k + 1}"]))
                for k in range(cfg.D_max)]
    return env, cfg, PGPolicyStack(policies, meta["trained"]), meta
