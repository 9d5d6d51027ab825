"""Environments: Finsler norms, local costs, free-space predicates and sampling.

Every function here is vectorized over leading axes. A state is an array whose
last axis is the representation space (``env.d_rep``); tangent vectors use the
manifold dimension (``env.d_man``). Angles are stored as ``(cos, sin)`` pairs in
the representation and as scalar angular velocities in tangent vectors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .exceptions import DomainError, InvalidInputError, UnsatisfiableEnvironmentError

KINDS = ("matsumoto", "carlike", "euclid2d_obstacles", "kinematic_arm", "multi_agent")
SYMMETRIC_KINDS = {"euclid2d_obstacles", "kinematic_arm", "multi_agent"}

_BOUND_TOL = 1e-9
MAX_REJECTION_TRIES = 10_000

# Visually similar stand-in for the reference 2D obstacle map; the exact
# rectangle coordinates were never published.
DEFAULT_RECTANGLES = (
    (-0.55, -0.35, -1.0, 0.35),
    (0.35, 0.55, -0.35, 1.0),
    (-0.15, 0.15, -0.6, -0.3),
    (-0.15, 0.15, 0.3, 0.6),
)

# Slab {x > 0.1, -0.1 < y < 0.1}, unbounded in z.
ARM_SLAB = (0.1, -0.1, 0.1)


@dataclass(frozen=True)
class Link:
    """One revolute joint followed by a rigid link along the local x axis."""

    length: float
    axis: tuple = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Environment:
    kind: str
    c_P: float = 0.0
    symmetric: bool = False
    lower: tuple = ()
    upper: tuple = ()
    obstacles: tuple = ()
    chain: tuple = ()
    d_thres: float = 0.5
    c_c: float = 100.0
    r_min: float = 0.2
    slab: tuple = ARM_SLAB
    n_agents: int = 3
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown environment kind {self.kind!r}")
        if self.symmetric and self.kind not in SYMMETRIC_KINDS:
            raise InvalidInputError(f"{self.kind} has an asymmetric metric")
        if self.c_P < 0:
            raise InvalidInputError("c_P must be nonnegative")
        if self.has_free_space and self.c_P <= 0:
            raise InvalidInputError(f"{self.kind} has obstacles and needs c_P > 0")
        if not self.has_free_space and self.c_P != 0:
            raise InvalidInputError(f"{self.kind} has no obstacles; c_P must be 0")
        if len(self.lower) != len(self.upper):
            raise InvalidInputError("lower/upper bounds differ in length")
        if self.kind == "kinematic_arm" and len(self.chain) != len(self.lower):
            raise InvalidInputError("arm joint limits must match the chain length")

    # -- layout ---------------------------------------------------------
    @property
    def has_free_space(self):
        if self.kind == "euclid2d_obstacles":
            return bool(self.obstacles)
        return self.kind in SYMMETRIC_KINDS

    @property
    def d_rep(self):
        if self.kind == "matsumoto":
            return 2
        if self.kind == "carlike":
            return 4
        if self.kind == "euclid2d_obstacles":
            return 2
        if self.kind == "kinematic_arm":
            return len(self.chain)
        return 2 * self.n_agents

    @property
    def d_man(self):
        return self.d_rep - len(self.angular_pairs)

    @property
    def angular_pairs(self):
        """Representation indices of each embedded (cos, sin) pair."""
        return ((2, 3),) if self.kind == "carlike" else ()

    @property
    def disk_bounded(self):
        return self.kind in ("matsumoto", "carlike")

    @property
    def linear_index(self):
        """Representation indices that are plain coordinates (not angle pairs)."""
        ang = {i for pair in self.angular_pairs for i in pair}
        return [i for i in range(self.d_rep) if i not in ang]

    def to_dict(self):
        d = {"kind": self.kind, "c_P": self.c_P, "symmetric": self.symmetric}
        if self.lower:
            d["bounds"] = [list(self.lower), list(self.upper)]
        if self.kind == "euclid2d_obstacles":
            d["obstacles"] = [list(r) for r in self.obstacles]
        if self.kind == "kinematic_arm":
            d["chain"] = [{"length": l.length, "axis": list(l.axis)} for l in self.chain]
        if self.kind == "multi_agent":
            d["d_thres"] = self.d_thres
        if self.kind == "carlike":
            d["c_c"] = self.c_c
            d["r_min"] = self.r_min
        return d


# ---------------------------------------------------------------------------
# construction


def make_env(kind, **overrides):
    """Build an environment with the default constants for ``kind``."""
    if kind == "matsumoto":
        base = dict(kind=kind)
    elif kind == "carlike":
        base = dict(kind=kind)
    elif kind == "euclid2d_obstacles":
        base = dict(kind=kind, c_P=10.0, symmetric=True, lower=(-1.0, -1.0),
                    upper=(1.0, 1.0), obstacles=DEFAULT_RECTANGLES)
    elif kind == "kinematic_arm":
        chain = overrides.pop("chain", None) or (Link(1.0), Link(1.0), Link(1.0))
        chain = tuple(_as_link(l) for l in chain)
        n = len(chain)
        base = dict(kind=kind, c_P=10.0, symmetric=True, chain=chain,
                    lower=(-np.pi,) * n, upper=(np.pi,) * n)
    elif kind == "multi_agent":
        base = dict(kind=kind, c_P=10.0, symmetric=True,
                    lower=(-1.0,) * 6, upper=(1.0,) * 6)
    else:
        raise InvalidInputError(f"unknown environment kind {kind!r}")
    base.update(overrides)
    if "obstacles" in base:
        base["obstacles"] = tuple(tuple(float(v) for v in r) for r in base["obstacles"])
        for r in base["obstacles"]:
            if len(r) != 4 or r[0] > r[1] or r[2] > r[3]:
                raise InvalidInputError(f"bad obstacle rectangle {r}")
    for key in ("lower", "upper"):
        if key in base:
            base[key] = tuple(float(v) for v in base[key])
    return Environment(**base)


def obstacle_free_euclid2d():
    """Plain Euclidean square [-1, 1]^2 with no obstacles."""
    return Environment(kind="euclid2d_obstacles", c_P=0.0, symmetric=True,
                       lower=(-1.0, -1.0), upper=(1.0, 1.0), obstacles=())


def _as_link(spec):
    if isinstance(spec, Link):
        return spec
    if isinstance(spec, (int, float)):
        return Link(float(spec))
    axis = tuple(float(a) for a in spec.get("axis", (0.0, 0.0, 1.0)))
    return Link(float(spec["length"]), axis)


def env_from_dict(cfg):
    """Build an environment from a config mapping (see README for keys)."""
    cfg = dict(cfg)
    if "kind" not in cfg:
        raise InvalidInputError("environment config needs a 'kind'")
    kind = cfg.pop("kind")
    overrides = {}
    if "c_P" in cfg:
        overrides["c_P"] = float(cfg.pop("c_P"))
    if "symmetric" in cfg:
        overrides["symmetric"] = bool(cfg.pop("symmetric"))
    if "bounds" in cfg:
        lo, hi = cfg.pop("bounds")
        overrides["lower"], overrides["upper"] = tuple(lo), tuple(hi)
    if "obstacles" in cfg:
        overrides["obstacles"] = cfg.pop("obstacles")
    if "chain" in cfg:
        overrides["chain"] = tuple(_as_link(l) for l in cfg.pop("chain"))
    for key in ("d_thres", "c_c", "r_min"):
        if key in cfg:
            overrides[key] = float(cfg.pop(key))
    if "name" in cfg:
        overrides["name"] = str(cfg.pop("name"))
    if cfg:
        raise InvalidInputError(f"unknown environment keys: {sorted(cfg)}")
    if kind == "euclid2d_obstacles" and not overrides.get("obstacles", True) and "c_P" not in overrides:
        overrides["c_P"] = 0.0
    return make_env(kind, **overrides)


def load_env(path):
    """Load an environment from a YAML or JSON file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        cfg = yaml.safe_load(text)
    else:
        cfg = json.loads(text)
    return env_from_dict(cfg)


# ---------------------------------------------------------------------------
# validation helpers


def _as_points(env, p, name="p"):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (env.d_rep,):
        raise InvalidInputError(f"{name} must have last axis {env.d_rep}, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return p


def _check_domain(env, p):
    if env.disk_bounded:
        r2 = p[..., 0] ** 2 + p[..., 1] ** 2
        if np.any(r2 > 1.0 + _BOUND_TOL):
            raise DomainError("state lies outside the unit disk")
    if env.lower:
        idx = env.linear_index
        lo, hi = np.asarray(env.lower), np.asarray(env.upper)
        x = p[..., idx]
        if np.any(x < lo - _BOUND_TOL) or np.any(x > hi + _BOUND_TOL):
            raise DomainError("state lies outside the coordinate box")


def angles(env, p):
    """Recover scalar angles from every embedded (cos, sin) pair, shape (..., n_angles)."""
    return np.stack([np.arctan2(p[..., s], p[..., c]) for c, s in env.angular_pairs], axis=-1)


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# metric


def finsler_norm(env, p, v, check=True):
    """Evaluate F(p, v) for states ``p`` (..., d_rep) and tangents ``v`` (..., d_man)."""
    if check:
        p = _as_points(env, p)
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1:] != (env.d_man,):
            raise InvalidInputError(f"tangent must have last axis {env.d_man}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("tangent contains non-finite entries")
        _check_domain(env, p)
    else:
        p = np.asarray(p, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)

    # F is positively homogeneous: evaluate on v / max|v| and rescale, so tiny
    # tangents do not underflow when squared
    scale = np.max(np.abs(v), axis=-1)
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, scale * _unit_norm(env, p, v / safe[..., None]), 0.0)


def _unit_norm(env, p, v):
    if env.kind == "matsumoto":
        # h(p) = -|p|^2, so grad h = -2p
        beta = -2.0 * (v[..., 0] * p[..., 0] + v[..., 1] * p[..., 1])
        alpha2 = v[..., 0] ** 2 + v[..., 1] ** 2 + beta**2
        denom = np.sqrt(alpha2) - beta
        return alpha2 / np.where(denom > 0, denom, 1.0)
    if env.kind == "carlike":
        c, s = p[..., 2], p[..., 3]
        norm = np.hypot(c, s)
        c, s = c / norm, s / norm
        vx, vy, vt = v[..., 0], v[..., 1], v[..., 2]
        side = -vx * s + vy * c
        xi = np.maximum(env.r_min * np.abs(vt) - vx * c - vy * s, 0.0)
        return np.sqrt(vx * vx + vy * vy + env.c_c * (side * side + xi * xi))
    if env.kind == "multi_agent":
        per_agent = v.reshape(v.shape[:-1] + (env.n_agents, 2))
        return np.sqrt((per_agent**2).sum(-1)).sum(-1)
    return np.sqrt((v**2).sum(-1))


def displacement(env, x, y):
    """Tangent-space displacement from x to y; angle differences wrapped to [-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not env.angular_pairs:
        return y - x
    lin = env.linear_index
    dang = wrap_angle(angles(env, y) - angles(env, x))
    return np.concatenate([y[..., lin] - x[..., lin], dang], axis=-1)


def local_cost(env, x, y, check=True):
    """C(x, y) = F(x, displacement(x, y))."""
    if check:
        x = _as_points(env, x, "x")
        y = _as_points(env, y, "y")
    return finsler_norm(env, x, displacement(env, x, y), check=check)


# ---------------------------------------------------------------------------
# free space


def forward_kinematics(env, joint_angles):
    """Base-to-tip joint positions of the configured serial chain, shape (..., n+1, 3)."""
    q = np.asarray(joint_angles, dtype=np.float64)
    if q.shape[-1:] != (len(env.chain),):
        raise InvalidInputError(f"expected {len(env.chain)} joint angles, got shape {q.shape}")
    batch = q.shape[:-1]
    R = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    pos = np.zeros(batch + (3,))
    out = [pos]
    for k, link in enumerate(env.chain):
        R = R @ _axis_rotation(link.axis, q[..., k])
        pos = pos + R[..., :, 0] * link.length
        out.append(pos)
    return np.stack(out, axis=-2)


def _axis_rotation(axis, theta):
    # Rodrigues' formula, batched over theta
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    theta = np.asarray(theta)[..., None, None]
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def segment_hits_slab(a, b, slab=ARM_SLAB):
    """Whether segments a->b (..., 3) meet the open slab {x > x0, y0 < y < y1}."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x0, y0, y1 = slab
    d = b - a
    lo = np.zeros(a.shape[:-1])
    hi = np.ones(a.shape[:-1])
    lo_open = np.zeros(a.shape[:-1], dtype=bool)
    hi_open = np.zeros(a.shape[:-1], dtype=bool)
    ok = np.ones(a.shape[:-1], dtype=bool)
    # each constraint reads  off + slope * t > 0
    for off, slope in ((a[..., 0] - x0, d[..., 0]),
                       (a[..., 1] - y0, d[..., 1]),
                       (y1 - a[..., 1], -d[..., 1])):
        flat = slope == 0
        ok &= ~flat | (off > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(flat, 0.0, -off / np.where(flat, 1.0, slope))
        up = (slope > 0) & (t >= lo)
        lo_open = np.where(up, True, lo_open)
        lo = np.where(up, t, lo)
        down = (slope < 0) & (t <= hi)
        hi_open = np.where(down, True, hi_open)
        hi = np.where(down, t, hi)
    nonempty = (lo < hi) | ((lo == hi) & ~lo_open & ~hi_open)
    return ok & nonempty


def is_free(env, p):
    """Membership in the free space; boolean array over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    free = np.ones(p.shape[:-1], dtype=bool)
    if env.lower:
        idx = env.linear_index
        x = p[..., idx]
        free &= np.all((x >= np.asarray(env.lower) - _BOUND_TOL)
                       & (x <= np.asarray(env.upper) + _BOUND_TOL), axis=-1)
    if env.disk_bounded:
        free &= p[..., 0] ** 2 + p[..., 1] ** 2 <= 1.0 + _BOUND_TOL
    if env.kind == "euclid2d_obstacles":
        for x0, x1, y0, y1 in env.obstacles:
            inside = (p[..., 0] > x0) & (p[..., 0] < x1) & (p[..., 1] > y0) & (p[..., 1] < y1)
            free &= ~inside
    elif env.kind == "kinematic_arm":
        joints = forward_kinematics(env, p)
        hits = segment_hits_slab(joints[..., :-1, :], joints[..., 1:, :], env.slab)
        free &= ~np.any(hits, axis=-1)
    elif env.kind == "multi_agent":
        pts = p.reshape(p.shape[:-1] + (env.n_agents, 2))
        for i in range(env.n_agents):
            for j in range(i + 1, env.n_agents):
                dist = np.sqrt(((pts[..., i, :] - pts[..., j, :]) ** 2).sum(-1))
                free &= dist >= env.d_thres
    return free


def penalty(env, x, y):
    """c_P when exactly one of x, y is free, otherwise 0."""
    if env.c_P == 0:
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]))
    return env.c_P * (is_free(env, x) != is_free(env, y))


def obstructed_cost(env, x, y, check=True):
    """Local cost plus the free-space penalty."""
    return local_cost(env, x, y, check=check) + penalty(env, x, y)


# ---------------------------------------------------------------------------
# sampling and projection


def _sample_box(env, rng, n):
    if env.kind == "matsumoto":
        return _sample_disk(rng, n)
    if env.kind == "carlike":
        xy = _sample_disk(rng, n)
        th = rng.uniform(-np.pi, np.pi, size=n)
        return np.column_stack([xy, np.cos(th), np.sin(th)])
    lo, hi = np.asarray(env.lower), np.asarray(env.upper)
    return rng.uniform(lo, hi, size=(n, len(lo)))


def _sample_disk(rng, n):
    # uniform on the box, rejected to the disk
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (n - len(out)) + 4, 2))
        out = np.vstack([out, cand[(cand**2).sum(1) <= 1.0]])
    return out[:n]


def sample_free(env, rng, size=None, max_tries=MAX_REJECTION_TRIES):
    """Uniform samples from the free space by rejection.

    Returns one state when ``size`` is None, else an array of ``size`` states.
    Each requested state gets at most ``max_tries`` candidates.
    """
    n = 1 if size is None else int(size)
    out = np.empty((0, env.d_rep))
    tries = 0
    while len(out) < n:
        need = n - len(out)
        cand = _sample_box(env, rng, need)
        tries += 1
        out = np.vstack([out, cand[is_free(env, cand)]])
        if len(out) < n and tries >= max_tries:
            raise UnsatisfiableEnvironmentError(
                f"no free state found after {max_tries} rejection rounds for {env.kind}")
    out = out[:n]
    return out[0] if size is None else out


def clamp_project(env, raw):
    """Project raw network outputs back onto valid states."""
    raw = np.asarray(raw, dtype=np.float64)
    out = raw.copy()
    if env.disk_bounded:
        r = np.sqrt(out[..., 0] ** 2 + out[..., 1] ** 2)
        scale = np.where(r > 1.0, 1.0 / np.where(r > 1.0, r, 1.0), 1.0)
        out[..., 0] *= scale
        out[..., 1] *= scale
    if env.lower:
        idx = env.linear_index
        out[..., idx] = np.clip(out[..., idx], env.lower, env.upper)
    for c, s in env.angular_pairs:
        pc = np.clip(out[..., c], -1.0, 1.0)
        ps = np.clip(out[..., s], -1.0, 1.0)
        norm = np.hypot(pc, ps)
        zero = norm == 0
        safe = np.where(zero, 1.0, norm)
        out[..., c] = np.where(zero, 1.0, pc / safe)
        out[..., s] = np.where(zero, 0.0, ps / safe)
    return out


def advance(env, p, step):
    """Move state ``p`` by tangent ``step``; angles advance modulo 2*pi, then clamp."""
    p = np.asarray(p, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    if not env.angular_pairs:
        return clamp_project(env, p + step)
    lin = env.linear_index
    q = p.copy()
    q[..., lin] = p[..., lin] + step[..., : len(lin)]
    th = angles(env, p) + step[..., len(lin):]
    for k, (c, s) in enumerate(env.angular_pairs):
        q[..., c] = np.cos(th[..., k])
        q[..., s] = np.sin(th[..., k])
    return clamp_project(env, q)


def embed(env, manifold_coords):
    """Map manifold coordinates (angles as scalars) to the representation space."""
    m = np.asarray(manifold_coords, dtype=np.float64)
    if not env.angular_pairs:
        return m.copy()
    nlin = len(env.linear_index)
    th = m[..., nlin:]
    parts = [m[..., :nlin]]
    for k in range(len(env.angular_pairs)):
        parts += [np.cos(th[..., k: k + 1]), np.sin(th[..., k: k + 1])]
    return np.concatenate(parts, axis=-1)
