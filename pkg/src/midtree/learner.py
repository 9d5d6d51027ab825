"""Actor-critic midpoint learning.

The actor maps a pair ``(s, g)`` to a Gaussian over the representation space
whose mean is the predicted midpoint. The critic maps ``(s, g)`` to a raw value
``r`` and predicts the distance ``exp(r) - 1``. Paths are midpoint trees: the
actor is applied recursively to adjacent waypoints, doubling the number of
segments per level.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import neural as nn
from .evaluation import EvalTaskSpec, TimestepLedger, evaluate_success
from .exceptions import InvalidInputError, NonFiniteLossError

log = logging.getLogger(__name__)

ACTOR_VARIANTS = ("midpoint", "inter", "two_one", "cut")
STRATEGIES = ("timestep_based", "cycle_based")


# ---------------------------------------------------------------------------
# data types


@dataclass
class PathSequence:
    points: np.ndarray
    depth: int

    def __post_init__(self):
        if len(self.points) != 2**self.depth + 1:
            raise InvalidInputError("path length must be 2**depth + 1")


@dataclass
class TrainTuple:
    s: np.ndarray
    g: np.ndarray
    c: float


@dataclass
class TupleBatch:
    """Column-major storage for many (s, g, c) training records."""

    s: np.ndarray
    g: np.ndarray
    c: np.ndarray

    def __len__(self):
        return len(self.c)

    def __iter__(self):
        for k in range(len(self)):
            yield TrainTuple(self.s[k], self.g[k], float(self.c[k]))

    def take(self, idx):
        return TupleBatch(self.s[idx], self.g[idx], self.c[idx])

    @staticmethod
    def concat(batches):
        return TupleBatch(np.concatenate([b.s for b in batches]),
                          np.concatenate([b.g for b in batches]),
                          np.concatenate([b.c for b in batches]))


@dataclass
class ScheduleSpec:
    strategy: str
    T: int
    D_max: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown schedule {self.strategy!r}")
        if self.T <= 0 or self.D_max < 1:
            raise InvalidInputError("schedule needs T > 0 and D_max >= 1")

    @property
    def t_d(self):
        return self.T // self.D_max + 1

    @property
    def c_d(self):
        return self.T // (2 ** (self.D_max + 1) - 1) + 1


def schedule_depth(spec, progress):
    """Training depth at timestep ``t`` (timestep-based) or cycle ``c`` (cycle-based)."""
    if progress < 0:
        raise InvalidInputError("progress must be nonnegative")
    step = spec.t_d if spec.strategy == "timestep_based" else spec.c_d
    return min(int(progress) // step, spec.D_max)


@dataclass
class VariantConfig:
    actor_variant: str = "midpoint"
    c_cut: float = 30.0
    td_lambda: float | None = None
    symmetric_losses: bool = False
    epsilon: float | None = None

    def __post_init__(self):
        if self.actor_variant not in ACTOR_VARIANTS:
            raise InvalidInputError(f"unknown actor variant {self.actor_variant!r}")
        if self.td_lambda is not None and not 0.0 <= self.td_lambda <= 1.0:
            raise InvalidInputError("td_lambda must lie in [0, 1]")
        if self.actor_variant == "cut":
            if self.epsilon is None:
                raise InvalidInputError("the cut variant needs the task epsilon")
            if self.c_cut <= self.epsilon:
                raise InvalidInputError("c_cut must exceed epsilon")


# ---------------------------------------------------------------------------
# networks


class Actor:
    """Gaussian midpoint policy on top of an MLP."""

    def __init__(self, env, params):
        self.env = env
        self.params = params

    @classmethod
    def create(cls, env, hidden, rng, activation="relu"):
        d = env.d_rep
        return cls(env, nn.init_mlp([2 * d, *hidden, 2 * d], activation, rng))

    def head(self, s, g):
        out, _ = nn.forward(self.params, np.concatenate([s, g], axis=-1))
        return nn.split_head(out)

    def propose(self, s, g, rng=None):
        """Raw prediction: a reparameterized sample when ``rng`` is given, else the mean."""
        head = self.head(s, g)
        if rng is None:
            return head.mean
        return nn.sample_reparameterized(head, rng.standard_normal(head.mean.shape))


class Critic:
    def __init__(self, env, params):
        self.env = env
        self.params = params

    @classmethod
    def create(cls, env, hidden, rng, activation="relu"):
        return cls(env, nn.init_mlp([2 * env.d_rep, *hidden, 1], activation, rng))

    def raw(self, s, g):
        out, _ = nn.forward(self.params, np.concatenate([s, g], axis=-1))
        return out[..., 0]

    def value(self, s, g):
        return np.expm1(self.raw(s, g))

    def probe(self, a, b):
        """Values V(a, b) plus a cache for :meth:`input_grad`."""
        raw, cache = nn.forward(self.params, _pair(a, b))
        ex = np.exp(raw[:, 0])
        return ex - 1.0, (cache, ex)

    def input_grad(self, cache, dvalue):
        """Gradients of sum(dvalue * V(a, b)) w.r.t. a and b; parameters untouched."""
        net_cache, ex = cache
        _, gin = nn.backward(self.params, net_cache, (dvalue * ex)[:, None], param_grads=False)
        d = gin.shape[-1] // 2
        return gin[:, :d], gin[:, d:]


# ---------------------------------------------------------------------------
# tree generation and data collection


def tree_schedule(D):
    """(target, left, right) index triples in generation order."""
    out = []
    for i in range(D):
        for j in range(2**i):
            out.append((2 ** (D - i - 1) * (2 * j + 1), 2 ** (D - i) * j, 2 ** (D - i) * (j + 1)))
    return out


def generate_tree(actor, env, s, g, D, mode="deterministic", rng=None):
    """Fill a midpoint tree between ``s`` and ``g``.

    Accepts single states (returns a :class:`PathSequence`) or batches of shape
    ``(n, d_rep)`` (returns an array ``(n, 2**D + 1, d_rep)``). All pairs of one
    tree level go to the actor in a single call, ordered by ``j``.
    """
    if mode not in ("stochastic", "deterministic"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise InvalidInputError("stochastic generation needs an rng")
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    single = s.ndim == 1
    if single:
        s, g = s[None], g[None]
    n = len(s)
    pts = np.empty((n, 2**D + 1, s.shape[-1]))
    pts[:, 0] = s
    pts[:, -1] = g
    for i in range(D):
        step = 2 ** (D - i)
        left = np.arange(2**i) * step
        right = left + step
        mid = left + step // 2
        a = pts[:, left].reshape(-1, s.shape[-1])
        b = pts[:, right].reshape(-1, s.shape[-1])
        raw = actor.propose(a, b, rng if mode == "stochastic" else None)
        pts[:, mid] = geo.clamp_project(env, raw).reshape(n, len(mid), -1)
    if single:
        return PathSequence(pts[0], D)
    return pts


def cut_cost(costs, epsilon, c_cut):
    """C_eps: keep costs below epsilon, replace the rest by c_cut."""
    return np.where(costs < epsilon, costs, c_cut)


def accumulate_targets(leaf_costs, points=None, critic=None, td_lambda=None):
    """Per-level target tables ``levels[i]`` of shape (n, 2**i), with ``levels[D]`` the leaves.

    With ``td_lambda`` None this is the Monte Carlo sum of child targets;
    otherwise children sums are blended with critic predictions through the
    chosen midpoint.
    """
    leaf_costs = np.asarray(leaf_costs, dtype=np.float64)
    n, segs = leaf_costs.shape
    D = segs.bit_length() - 1
    levels = [None] * (D + 1)
    levels[D] = leaf_costs
    for i in range(D - 1, -1, -1):
        child = levels[i + 1]
        mc = child[:, 0::2] + child[:, 1::2]
        if td_lambda is None or td_lambda == 1.0:
            levels[i] = mc
            continue
        step = 2 ** (D - i)
        left = np.arange(2**i) * step
        mid = left + step // 2
        right = left + step
        d = points.shape[-1]
        pl = points[:, left].reshape(-1, d)
        pm = points[:, mid].reshape(-1, d)
        pr = points[:, right].reshape(-1, d)
        boot = (critic.value(pl, pm) + critic.value(pm, pr)).reshape(n, -1)
        levels[i] = (1.0 - td_lambda) * boot + td_lambda * mc
    return levels


def td_lambda_targets(critic, sequence, leaf_costs, lam):
    """TD(lambda) target table for one :class:`PathSequence`; ``levels[i][j]`` = c_{i,j}."""
    pts = np.asarray(sequence.points)[None]
    levels = accumulate_targets(np.asarray(leaf_costs, dtype=np.float64)[None], pts, critic, lam)
    return [lvl[0] for lvl in levels]


def tuples_from_tree(points, levels):
    """Self tuples, leaf tuples, then internal tuples (i = D-1..0), tree-major order."""
    n, npts, d = points.shape
    D = (npts - 1).bit_length() - 1
    s_parts, g_parts, c_parts = [points], [points], [np.zeros((n, npts))]
    for i in range(D, -1, -1):
        step = 2 ** (D - i)
        left = np.arange(2**i) * step
        s_parts.append(points[:, left])
        g_parts.append(points[:, left + step])
        c_parts.append(levels[i])
    s = np.concatenate(s_parts, axis=1).reshape(-1, d)
    g = np.concatenate(g_parts, axis=1).reshape(-1, d)
    c = np.concatenate(c_parts, axis=1).reshape(-1)
    return TupleBatch(s, g, c)


def tuples_per_cycle(D):
    return (2**D + 1) + (2 ** (D + 1) - 1)


def collect_data(actor, env, D, rng, n_calls=1, variant=None, critic=None, cost_fn=None):
    """Run ``n_calls`` CollectData cycles at depth ``D`` and return their tuples.

    Endpoints come from :func:`geometry.sample_free`; waypoints are stochastic
    actor samples. Leaf costs use the obstructed cost (or ``cost_fn``), cut by
    C_eps for the cut variant.
    """
    variant = variant or VariantConfig()
    s = geo.sample_free(env, rng, 2 * n_calls)
    p0, pend = s[0::2], s[1::2]
    pts = generate_tree(actor, env, p0, pend, D, "stochastic", rng)
    costs = (cost_fn or (lambda a, b: geo.obstructed_cost(env, a, b, check=False)))(
        pts[:, :-1], pts[:, 1:])
    costs = np.asarray(costs, dtype=np.float64).reshape(n_calls, 2**D)
    if variant.actor_variant == "cut":
        costs = cut_cost(costs, variant.epsilon, variant.c_cut)
    levels = accumulate_targets(costs, pts, critic, variant.td_lambda)
    return tuples_from_tree(pts, levels)


# ---------------------------------------------------------------------------
# losses


def _pair(a, b):
    return np.concatenate([a, b], axis=-1)


def critic_loss(critic, s, g, c, symmetric=False):
    """Squared log error against targets, plus the symmetry term when requested.

    Batched: returns ``(loss summed over the batch, parameter gradients)``.
    """
    s = np.atleast_2d(s)
    g = np.atleast_2d(g)
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    params = critic.params
    raw, cache = nn.forward(params, _pair(s, g))
    r = raw[:, 0]
    err = r - np.log1p(c)
    loss = float((err * err).sum())
    gr = 2.0 * err
    grads = None
    if symmetric:
        raw2, cache2 = nn.forward(params, _pair(g, s))
        r2 = raw2[:, 0]
        diff = r - r2
        loss += float((diff * diff).sum())
        gr = gr + 2.0 * diff
        grads2, _ = nn.backward(params, cache2, (-2.0 * diff)[:, None])
        grads = grads2
    g1, _ = nn.backward(params, cache, gr[:, None])
    grads = g1 if grads is None else nn.add_grads(g1, grads)
    return loss, grads


class _ActorTape:
    """Records reparameterized actor calls so their gradients can be replayed."""

    def __init__(self, actor, noise):
        self.actor = actor
        self.noise = noise
        self.calls = []
        self.grads = None

    def __call__(self, a, b, k):
        out, cache = nn.forward(self.actor.params, _pair(a, b))
        head = nn.split_head(out)
        x = nn.sample_reparameterized(head, self.noise[k])
        self.calls.append((cache, head, self.noise[k]))
        # projection is treated as the identity in the backward pass
        return geo.clamp_project(self.actor.env, x)

    def back(self, idx, point_grad):
        cache, head, noise = self.calls[idx]
        gout = nn.reparameterized_grad(head, noise, point_grad)
        grads, gin = nn.backward(self.actor.params, cache, gout)
        self.grads = nn.add_grads(self.grads, grads)
        d = point_grad.shape[-1]
        return gin[:, :d], gin[:, d:]


N_ACTOR_NOISE = 5


def actor_objective(kind, v1, v2):
    """Per-pair core objective from V(s, m) and V(m, g), with its partials.

    midpoint: v1^2 + v2^2; two_one: v1^2 + 2 v2^2; inter and cut: v1 + v2.
    Returns ``(values, d/dv1, d/dv2)``.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if kind == "midpoint":
        return v1 * v1 + v2 * v2, 2 * v1, 2 * v2
    if kind == "two_one":
        return v1 * v1 + 2 * v2 * v2, 2 * v1, 4 * v2
    if kind in ("inter", "cut"):
        return v1 + v2, np.ones_like(v1), np.ones_like(v2)
    raise InvalidInputError(f"unknown actor variant {kind!r}")


def actor_loss(actor, critic, s, g, variant, noise=None, rng=None):
    """Actor objective for the configured variant; critic parameters stay constant.

    ``noise`` has shape (5, n, d_rep): one standard-normal draw per actor call
    (root midpoint, 1:3 point, 3:1 point, their midpoint, reversed midpoint).
    Returns ``(loss summed over the batch, actor parameter gradients)``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    n, d = s.shape
    if noise is None:
        noise = rng.standard_normal((N_ACTOR_NOISE, n, d))
    tape = _ActorTape(actor, noise)
    V = critic.probe
    kind = variant.actor_variant
    symmetric = variant.symmetric_losses and kind != "two_one"

    m = tape(s, g, 0)
    v1, c1 = V(s, m)
    v2, c2 = V(m, g)
    loss, w1, w2 = actor_objective(kind, v1, v2)
    loss = loss.sum()
    gm = critic.input_grad(c1, w1)[1] + critic.input_grad(c2, w2)[0]

    if kind == "midpoint":
        a = tape(s, m, 1)
        b = tape(m, g, 2)
        c = tape(a, b, 3)
        v3, c3 = V(m, c)
        loss += (v3 * v3).sum()
        gm_c, gc = critic.input_grad(c3, 2 * v3)
        gm += gm_c
    if symmetric:
        m2 = tape(g, s, 4)
        v4, c4 = V(m, m2)
        if kind == "midpoint":
            loss += (v4 * v4).sum()
            w4 = 2 * v4
        else:
            loss += v4.sum()
            w4 = np.ones_like(v4)
        gm_s, gm2 = critic.input_grad(c4, w4)
        gm += gm_s
        tape.back(len(tape.calls) - 1, gm2)
    if kind == "midpoint":
        ga, gb = tape.back(3, gc)
        gm += tape.back(2, gb)[0]
        gm += tape.back(1, ga)[1]
    tape.back(0, gm)
    return float(loss), tape.grads


# ---------------------------------------------------------------------------
# training


@dataclass
class LearnerConfig:
    T: int = 1_000_000
    D_max: int = 6
    epsilon: float = 0.1
    schedule: str = "cycle_based"
    variant: str = "midpoint"
    c_cut: float = 30.0
    td_lambda: float | None = None
    lr: float = 3e-5
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    batch_size: int = 256
    n_epochs: int = 10
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    pair_count: int = 100
    pair_seed: int = 12345

    def schedule_spec(self):
        return ScheduleSpec(self.schedule, self.T, self.D_max)

    def variant_config(self, env):
        return VariantConfig(self.variant, self.c_cut, self.td_lambda, env.symmetric, self.epsilon)


@dataclass
class TrainState:
    actor: Actor
    critic: Critic
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    rng: np.random.Generator
    timestep: int = 0
    cycle: int = 0
    rounds: int = 0
    log: list = field(default_factory=list)
    next_eval: int = 0
    next_ckpt: int = 0


def init_state(env, cfg):
    rng = np.random.default_rng(cfg.seed)
    actor = Actor.create(env, cfg.hidden, rng, cfg.activation)
    critic = Critic.create(env, cfg.hidden, rng, cfg.activation)
    return TrainState(actor, critic, nn.init_adam(actor.params, cfg.lr),
                      nn.init_adam(critic.params, cfg.lr), rng)


def plan_round(cfg, state):
    """Depths of the CollectData calls for one round (fill at least one batch)."""
    spec = cfg.schedule_spec()
    depths, count = [], 0
    t, c = state.timestep, state.cycle
    while count < cfg.batch_size:
        D = schedule_depth(spec, t if spec.strategy == "timestep_based" else c)
        depths.append(D)
        count += tuples_per_cycle(D)
        t += 2**D
        c += 1
    return depths


def train_round(env, cfg, state, ledger=None):
    """One outer iteration: collect data, then N_epochs passes of critic/actor updates."""
    variant = cfg.variant_config(env)
    depths = plan_round(cfg, state)
    chunks = []
    k = 0
    while k < len(depths):
        j = k
        while j < len(depths) and depths[j] == depths[k]:
            j += 1
        chunks.append(collect_data(state.actor, env, depths[k], state.rng, j - k, variant,
                                   state.critic))
        k = j
    for D in depths:
        state.timestep += 2**D
        state.cycle += 1
        if ledger is not None:
            ledger.record("tree", D)
    data = TupleBatch.concat(chunks)
    n_batches = max(1, math.ceil(len(data) / cfg.batch_size))
    batches = np.array_split(state.rng.permutation(len(data)), n_batches)
    c_losses, a_losses = [], []
    for _ in range(cfg.n_epochs):
        for idx in batches:
            b = data.take(idx)
            lc, gc = critic_loss(state.critic, b.s, b.g, b.c, variant.symmetric_losses)
            la, ga = actor_loss(state.actor, state.critic, b.s, b.g, variant, rng=state.rng)
            if not (np.isfinite(lc) and np.isfinite(la)):
                raise NonFiniteLossError(
                    "non-finite loss", {"timestep": state.timestep, "cycle": state.cycle,
                                        "critic_loss": lc, "actor_loss": la})
            nn.adam_step(state.critic_opt, state.critic.params, gc)
            nn.adam_step(state.actor_opt, state.actor.params, ga)
            c_losses.append(lc / len(idx))
            a_losses.append(la / len(idx))
    state.rounds += 1
    return max(depths), float(np.mean(c_losses)), float(np.mean(a_losses))


class TreePolicy:
    """Deterministic path generator for evaluation."""

    method = "midpoint_tree"

    def __init__(self, actor, env):
        self.actor = actor
        self.env = env

    def generate(self, s, g, depth):
        return generate_tree(self.actor, self.env, s, g, depth, "deterministic")


def train(env, cfg, eval_pairs=None, out_dir=None, state=None, stop_after=None):
    """Run actor-critic midpoint learning until the timestep ledger reaches ``cfg.T``.

    Evaluation rows (every ``cfg.eval_every`` timesteps and at the end) are
    appended to ``state.log``; checkpoints go to ``out_dir/checkpoints`` when
    an output directory is given. ``stop_after`` limits the number of rounds
    executed in this call, which is how interrupted runs are simulated.
    """
    state = state or init_state(env, cfg)
    ledger = TimestepLedger(state.timestep)
    task = EvalTaskSpec(2**cfg.D_max, cfg.epsilon, len(eval_pairs) if eval_pairs is not None else 1)
    rounds = 0
    depth = 0
    last = (float("nan"), float("nan"))
    while state.timestep < cfg.T:
        if stop_after is not None and rounds >= stop_after:
            return state
        depth, lc, la = train_round(env, cfg, state, ledger)
        last = (lc, la)
        rounds += 1
        if cfg.eval_every and state.timestep >= state.next_eval and state.timestep < cfg.T:
            _log_eval(env, cfg, state, eval_pairs, task, depth, last)
            state.next_eval = (state.timestep // cfg.eval_every + 1) * cfg.eval_every
        if out_dir is not None and cfg.checkpoint_every and state.timestep >= state.next_ckpt:
            save_state(Path(out_dir) / "checkpoints" / f"step_{state.timestep:012d}.ckpt", env, cfg, state)
            state.next_ckpt = (state.timestep // cfg.checkpoint_every + 1) * cfg.checkpoint_every
    _log_eval(env, cfg, state, eval_pairs, task, depth, last)
    if out_dir is not None:
        save_state(Path(out_dir) / "checkpoints" / "final.ckpt", env, cfg, state)
    return state


def _log_eval(env, cfg, state, pairs, task, depth, losses):
    rate = float("nan")
    if pairs is not None:
        rate = evaluate_success(TreePolicy(state.actor, env), env, pairs, task,
                                state.timestep).success_rate
    row = {"timestep": state.timestep, "cycle": state.cycle, "depth": depth,
           "success_rate": rate, "critic_loss": losses[0], "actor_loss": losses[1]}
    state.log.append(row)
    log.info("t=%d depth=%d success=%.3f", state.timestep, depth, rate)


# ---------------------------------------------------------------------------
# persistence


def _rng_state_json(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _rng_from_json(blob):
    rng = np.random.default_rng()
    rng.bit_generator.state = {"bit_generator": blob["bit_generator"],
                               "state": {k: int(v) for k, v in blob["state"].items()},
                               "has_uint32": blob["has_uint32"], "uinteger": blob["uinteger"]}
    return rng


def save_state(path, env, cfg, state):
    meta = {"method": "midpoint_tree", "env": env.to_dict(), "config": asdict(cfg),
            "timestep": state.timestep, "cycle": state.cycle, "rounds": state.rounds,
            "next_eval": state.next_eval, "next_ckpt": state.next_ckpt,
            "rng": _rng_state_json(state.rng), "log": state.log}
    nn.save_checkpoint(path, {"actor": state.actor.params, "critic": state.critic.params},
                       {"actor": state.actor_opt, "critic": state.critic_opt},
                       d_rep=env.d_rep, meta=meta)


def load_state(path):
    """Returns (env, cfg, state) from a learner checkpoint."""
    nets, adams, header, _ = nn.load_checkpoint(path)
    meta = header["meta"]
    env = geo.env_from_dict(meta["env"])
    cfg = LearnerConfig(**meta["config"])
    state = TrainState(Actor(env, nets["actor"]), Critic(env, nets["critic"]),
                       adams["actor"], adams["critic"], _rng_from_json(meta["rng"]),
                       meta["timestep"], meta["cycle"], meta["rounds"], meta["log"],
                       meta["next_eval"], meta["next_ckpt"])
    return env, cfg, state
