"""Sequential goal-conditioned baseline: step-by-step moves of cost epsilon, trained with PPO."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import geometry as geo
from .. import neural as nn
from ..evaluation import EvalTaskSpec, TimestepLedger, evaluate_success
from ..exceptions import InvalidInputError, NonFiniteLossError

log = logging.getLogger(__name__)

ZERO_ACTION_PENALTY = -100.0


@dataclass
class SeqTransition:
    observation: np.ndarray
    action: np.ndarray
    next_observation: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    success: np.ndarray
    next_state: np.ndarray


def goal_potential(env, p, g):
    """F at the goal of the displacement from p to g."""
    return geo.finsler_norm(env, g, geo.displacement(env, p, g), check=False)


def seq_step(env, p, g, v, epsilon, t=None, horizon=None):
    """Move from ``p`` along action ``v`` so that the step costs exactly ``epsilon``.

    Vectorized over leading axes. ``t`` is the step count after this move; when
    it reaches ``horizon`` without success the episode ends as a failure.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if np.any(np.abs(v) > 1.0 + 1e-12):
        raise InvalidInputError("actions must lie in [-1, 1]")
    # scale by max|v| first so tiny actions still give a step of cost epsilon
    size = np.max(np.abs(v), axis=-1)
    zero = size <= 0
    u = v / np.where(zero, 1.0, size)[:, None]
    speed = geo.finsler_norm(env, p, u, check=False)
    scale = np.where(zero, 0.0, epsilon / np.where(zero, 1.0, speed))
    q = geo.advance(env, p, scale[:, None] * u)
    q = np.where(zero[:, None], p, q)
    reward = -epsilon + goal_potential(env, p, g) - goal_potential(env, q, g)
    reward = np.where(zero, ZERO_ACTION_PENALTY, reward)
    free = geo.is_free(env, q)
    reward = np.where(free, reward, -env.c_P)
    success = free & (geo.local_cost(env, q, g, check=False) < epsilon)
    done = success | ~free
    if horizon is not None and t is not None:
        done = done | (np.asarray(t) >= horizon)
    obs = np.concatenate([p, g], axis=-1)
    next_obs = np.concatenate([q, g], axis=-1)
    return SeqTransition(obs, v, next_obs, reward, done, success, q)


class SeqVecEnv:
    """Independent sequential episodes with uniformly sampled free start/goal pairs."""

    def __init__(self, env, epsilon, horizon, n_envs, rng):
        self.env = env
        self.epsilon = epsilon
        self.horizon = horizon
        self.n_envs = n_envs
        self.rng = rng
        self.p = np.empty((n_envs, env.d_rep))
        self.g = np.empty((n_envs, env.d_rep))
        self.t = np.zeros(n_envs, dtype=int)
        self.reset(np.ones(n_envs, dtype=bool))

    def reset(self, mask):
        k = int(mask.sum())
        if k:
            pts = geo.sample_free(self.env, self.rng, 2 * k)
            self.p[mask] = pts[0::2]
            self.g[mask] = pts[1::2]
            self.t[mask] = 0

    def obs(self):
        return np.concatenate([self.p, self.g], axis=-1)

    def step(self, action):
        self.t += 1
        tr = seq_step(self.env, self.p, self.g, action, self.epsilon, self.t, self.horizon)
        self.p = tr.next_state.copy()
        self.reset(tr.done)
        return tr


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PPOConfig:
    T: int = 500_000
    epsilon: float = 0.1
    horizon: int = 16
    lr: float = 3e-4
    hidden: list = field(default_factory=lambda: [400, 300, 300])
    activation: str = "tanh"
    batch_size: int = 128
    n_epochs: int = 10
    n_steps: int = 2048
    n_envs: int = 8
    gamma: float = 1.0
    gae_lambda: float = 0.95
    clip: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantage: bool = True
    seed: int = 0
    eval_every: int = 0


class Vector:
    """A bare parameter array, so Adam can update it like a network."""

    def __init__(self, value):
        self.value = value

    @property
    def arrays(self):
        return [self.value]


def gae(rewards, values, dones, last_value, gamma=1.0, lam=0.95):
    """Generalized advantage estimates over time-major arrays.

    ``dones[t]`` marks that the episode ended after step ``t``; ``last_value``
    bootstraps the value of the state after the final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_value = np.asarray(last_value, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv


def clipped_surrogate(ratio, adv, clip):
    """PPO objective per sample (to be maximized) and d(objective)/d(log ratio)."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    return obj, np.where(active, unclipped, 0.0)


class SeqAgent:
    """Tanh MLP Gaussian policy with a state-independent log-std, plus a value MLP."""

    method = "seq"

    def __init__(self, env, policy, log_std, value, epsilon):
        self.env = env
        self.policy = policy
        self.log_std = log_std
        self.value = value
        self.epsilon = epsilon

    @classmethod
    def create(cls, env, cfg, rng):
        obs = 2 * env.d_rep
        policy = nn.init_mlp([obs, *cfg.hidden, env.d_man], cfg.activation, rng)
        value = nn.init_mlp([obs, *cfg.hidden, 1], cfg.activation, rng)
        return cls(env, policy, Vector(np.zeros(env.d_man)), value, cfg.epsilon)

    def act(self, obs, rng=None):
        mean, _ = nn.forward(self.policy, obs)
        std = np.exp(self.log_std.value)
        if rng is None:
            return mean, None
        a = mean + std * rng.standard_normal(mean.shape)
        return a, nn.gaussian_log_density(mean, std, a)

    def predict_value(self, obs):
        return nn.forward(self.value, obs)[0][:, 0]

    def generate(self, s, g, depth):
        """Deterministic rollouts of at most 2**depth steps; each path ends at its goal."""
        horizon = 2**depth
        s = np.atleast_2d(s)
        g = np.atleast_2d(g)
        p = s.copy()
        paths = [[row] for row in s]
        alive = np.ones(len(s), dtype=bool)
        for t in range(1, horizon + 1):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            mean, _ = self.act(np.concatenate([p[idx], g[idx]], axis=-1))
            tr = seq_step(self.env, p[idx], g[idx], np.clip(mean, -1, 1), self.epsilon, t, horizon)
            p[idx] = tr.next_state
            for k, i in enumerate(idx):
                paths[i].append(tr.next_state[k])
            alive[idx[tr.done]] = False
        return [np.array(path + [g[i]]) for i, path in enumerate(paths)]


def ppo_update(agent, opts, batch, cfg, rng):
    """N_epochs passes of clipped-surrogate updates over shuffled minibatches."""
    obs, actions, old_logp, adv_all, returns = batch
    n = len(obs)
    stats = []
    for _ in range(cfg.n_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start: start + cfg.batch_size]
            m = len(idx)
            o, a, adv, ret = obs[idx], actions[idx], adv_all[idx], returns[idx]
            if cfg.normalize_advantage and m > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            mean, pcache = nn.forward(agent.policy, o)
            log_std = agent.log_std.value
            std = np.exp(log_std)
            logp = nn.gaussian_log_density(mean, std, a)
            ratio = np.exp(logp - old_logp[idx])
            obj, dobj_dlogp = clipped_surrogate(ratio, adv, cfg.clip)
            z = (a - mean) / std
            # gradients of the loss  -mean(obj) - ent_coef * entropy + vf_coef * mse
            w = -dobj_dlogp / m
            g_mean = w[:, None] * z / std
            g_log_std = (w[:, None] * (z * z - 1.0)).sum(0) - cfg.ent_coef
            v, vcache = nn.forward(agent.value, o)
            verr = v[:, 0] - ret
            g_v = (cfg.vf_coef * 2.0 * verr / m)[:, None]
            gp, _ = nn.backward(agent.policy, pcache, g_mean)
            gv, _ = nn.backward(agent.value, vcache, g_v)
            loss = -obj.mean() + cfg.vf_coef * (verr**2).mean()
            if not np.isfinite(loss):
                raise NonFiniteLossError("non-finite PPO loss")
            grads, _ = nn.clip_grad_norm(gp + [g_log_std] + gv, cfg.max_grad_norm)
            k = len(gp)
            nn.adam_step(opts[0], agent.policy, grads[:k])
            nn.adam_step(opts[1], agent.log_std, [grads[k]])
            nn.adam_step(opts[2], agent.value, grads[k + 1:])
            stats.append(loss)
    return float(np.mean(stats))


def ppo_train(env, cfg, eval_pairs=None, out_dir=None):
    """Train the sequential agent for ``cfg.T`` environment steps."""
    rng = np.random.default_rng(cfg.seed)
    agent = SeqAgent.create(env, cfg, rng)
    opts = [nn.init_adam(agent.policy, cfg.lr), nn.init_adam(agent.log_std, cfg.lr),
            nn.init_adam(agent.value, cfg.lr)]
    venv = SeqVecEnv(env, cfg.epsilon, cfg.horizon, cfg.n_envs, rng)
    ledger = TimestepLedger()
    steps = max(1, cfg.n_steps // cfg.n_envs)
    task = EvalTaskSpec(cfg.horizon, cfg.epsilon, 1)
    history = []
    next_eval = cfg.eval_every
    while ledger.total() < cfg.T:
        O, A, LP, R, V, Dn = [], [], [], [], [], []
        for _ in range(steps):
            obs = venv.obs()
            a, logp = agent.act(obs, rng)
            V.append(agent.predict_value(obs))
            tr = venv.step(np.clip(a, -1.0, 1.0))
            O.append(obs)
            A.append(a)
            LP.append(logp)
            R.append(tr.reward)
            Dn.append(tr.done)
            ledger.record("seq", count=cfg.n_envs)
        values = np.array(V)
        adv = gae(np.array(R), values, np.array(Dn), agent.predict_value(venv.obs()),
                  cfg.gamma, cfg.gae_lambda)
        returns = adv + values
        flat = lambda x: np.asarray(x).reshape((-1,) + np.asarray(x).shape[2:])
        loss = ppo_update(agent, opts, (flat(O), flat(A), flat(LP), flat(adv), flat(returns)), cfg, rng)
        if cfg.eval_every and eval_pairs is not None and ledger.total() >= next_eval:
            rate = evaluate_success(agent, env, eval_pairs, task, ledger.total()).success_rate
            history.append({"timestep": ledger.total(), "success_rate": rate, "loss": loss})
            log.info("seq t=%d success=%.3f", ledger.total(), rate)
            next_eval += cfg.eval_every
    if eval_pairs is not None:
        rate = evaluate_success(agent, env, eval_pairs, task, ledger.total()).success_rate
        history.append({"timestep": ledger.total(), "success_rate": rate, "loss": float("nan")})
    if out_dir is not None:
        save_agent(Path(out_dir) / "checkpoints" / "final.ckpt", env, cfg, agent, ledger.total(), history)
    return agent, history


def save_agent(path, env, cfg, agent, timestep, history):
    meta = {"method": "seq", "env": env.to_dict(), "config": asdict(cfg), "timestep": timestep,
            "log": history}
    nn.save_checkpoint(path, {"policy": agent.policy, "value": agent.value}, d_rep=env.d_rep,
                       meta=meta, extra_arrays={"log_std": agent.log_std.value})


def load_agent(path):
    nets, _, header, extra = nn.load_checkpoint(path)
    meta = header["meta"]
    env = geo.env_from_dict(meta["env"])
    cfg = PPOConfig(**meta["config"])
    agent = SeqAgent(env, nets["policy"], Vector(extra["log_std"]), nets["value"], cfg.epsilon)
    return env, cfg, agent, meta
