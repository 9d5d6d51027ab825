"""Evaluation protocol: fixed pair sets, success checks, winning rates, timestep ledger."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .exceptions import InvalidInputError

# Floating-point slack for the "C <= eps" test; sequential steps have cost exactly eps.
SUCCESS_RTOL = 1e-9
UNDEFINED = None


@dataclass
class EvalTaskSpec:
    n: int
    epsilon: float
    pair_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.n & (self.n - 1):
            raise InvalidInputError(f"segment count {self.n} is not a power of two")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")

    @property
    def depth(self):
        return int(self.n).bit_length() - 1


@dataclass
class EvalReport:
    success: np.ndarray
    lengths: list
    timestep: int = 0
    method: str = ""
    max_costs: np.ndarray = field(default=None, repr=False)
    # successful paths with a waypoint outside the free space
    violations: int = 0
    pairs_id: str = ""

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self.success) else 0.0


class TimestepLedger:
    """Counts evaluations of C during training.

    A sequential step counts 1 and a depth-D tree generation counts 2**D.
    Evaluation-time cost calls never go through the ledger.
    """

    def __init__(self, total=0):
        self._total = int(total)

    def record(self, kind, depth=0, count=1):
        if kind == "seq":
            self._total += int(count)
        elif kind == "tree":
            self._total += int(count) * 2 ** int(depth)
        else:
            raise InvalidInputError(f"unknown ledger entry kind {kind!r}")
        return self._total

    def total(self):
        return self._total


def check_env_compat(env, pairs):
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 * env.d_rep:
        raise InvalidInputError(f"pairs must have shape (n, {2 * env.d_rep}), got {pairs.shape}")
    return pairs


def pairs_digest(pairs):
    """Short content hash of a pair set, stored in reports to catch mismatched comparisons."""
    arr = np.ascontiguousarray(np.asarray(pairs, dtype="<f8"))
    return hashlib.sha256(arr.tobytes() + repr(arr.shape).encode()).hexdigest()[:16]


def make_eval_set(env, spec, path=None):
    """Seeded start/goal pairs from the free space, shape (pair_count, 2 * d_rep)."""
    rng = np.random.default_rng(spec.seed)
    s = geo.sample_free(env, rng, spec.pair_count)
    g = geo.sample_free(env, rng, spec.pair_count)
    pairs = np.hstack([s, g])
    if path is not None:
        write_pairs(path, env, pairs)
    return pairs


def write_pairs(path, env, pairs):
    d = env.d_rep
    header = [f"s{k}" for k in range(d)] + [f"g{k}" for k in range(d)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in pairs:
        w.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def read_pairs(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)


def path_costs(env, paths):
    """Obstructed cost of every consecutive waypoint pair, shape (n, segments)."""
    paths = np.asarray(paths, dtype=np.float64)
    return geo.obstructed_cost(env, paths[:, :-1], paths[:, 1:], check=False)


def judge_paths(env, paths, epsilon, timestep=0, method=""):
    """Success iff every consecutive obstructed cost is at most epsilon."""
    if isinstance(paths, np.ndarray):
        paths = list(paths)
    success, lengths, worst = [], [], []
    violations = 0
    for p in paths:
        p = np.asarray(p, dtype=np.float64)
        if len(p) < 2:
            costs = np.zeros(1)
        else:
            costs = geo.obstructed_cost(env, p[:-1], p[1:], check=False)
        ok = bool(np.all(costs <= epsilon * (1 + SUCCESS_RTOL)))
        success.append(ok)
        worst.append(float(costs.max()))
        lengths.append(float(costs.sum()) if ok else None)
        if ok and env.has_free_space and not np.all(geo.is_free(env, p)):
            violations += 1
    return EvalReport(np.array(success, dtype=bool), lengths, int(timestep), method,
                      np.array(worst), violations)


def evaluate_success(policy, env, pairs, spec, timestep=0, depth=None):
    """Generate deterministic paths for every pair and judge them.

    ``policy`` needs a ``generate(s, g, depth)`` method returning waypoint
    arrays (or a list of them, for variable-length sequential rollouts).
    """
    pairs = check_env_compat(env, pairs)
    d = env.d_rep
    depth = spec.depth if depth is None else depth
    paths = policy.generate(pairs[:, :d], pairs[:, d:], depth)
    report = judge_paths(env, paths, spec.epsilon, timestep, getattr(policy, "method", ""))
    report.pairs_id = pairs_digest(pairs)
    return report


def winning_rate(report_a, report_b):
    """Share of jointly solved pairs where A is strictly shorter, and the joint share.

    Returns ``(percentage or None, joint_percentage)``.
    """
    if len(report_a.success) != len(report_b.success) or (
            report_a.pairs_id and report_b.pairs_id and report_a.pairs_id != report_b.pairs_id):
        raise InvalidInputError("reports cover different pair sets")
    joint = report_a.success & report_b.success
    n = len(joint)
    k = int(joint.sum())
    if k == 0:
        return UNDEFINED, 0.0
    wins = sum(1 for i in np.flatnonzero(joint) if report_a.lengths[i] < report_b.lengths[i])
    return 100.0 * wins / k, 100.0 * k / n


# ---------------------------------------------------------------------------
# report files

REPORT_HEADER = ["pair", "success", "length", "max_cost"]


def write_report(path, report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# method", report.method, "timestep", report.timestep,
                "success_rate", repr(report.success_rate), "violations", report.violations, "pairs", report.pairs_id])
    w.writerow(REPORT_HEADER)
    for i, ok in enumerate(report.success):
        length = "" if report.lengths[i] is None else repr(report.lengths[i])
        worst = "" if report.max_costs is None else repr(float(report.max_costs[i]))
        w.writerow([i, int(ok), length, worst])
    Path(path).write_text(buf.getvalue())


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    meta = rows[0]
    body = rows[2:]
    success = np.array([r[1] == "1" for r in body], dtype=bool)
    lengths = [float(r[2]) if r[2] else None for r in body]
    worst = np.array([float(r[3]) if r[3] else np.nan for r in body])
    violations = int(meta[7]) if len(meta) > 7 else 0
    pairs_id = meta[9] if len(meta) > 9 else ""
    return EvalReport(success, lengths, int(meta[3]), meta[1], worst, violations, pairs_id)


def format_cell(rate, joint):
    if rate is UNDEFINED:
        return "—"
    return f"{rate:.0f} ({joint:.0f})"


def winning_table(reports):
    """Lower-triangular table: cell (row, col) is the rate at which col beats row."""
    names = list(reports)
    rows = []
    for i, row in enumerate(names):
        cells = []
        for j, col in enumerate(names):
            if j >= i:
                cells.append("")
                continue
            rate, joint = winning_rate(reports[col], reports[row])
            cells.append(format_cell(rate, joint))
        rows.append((row, cells))
    return names, rows


def render_table(names, rows):
    width = max(12, *(len(n) + 2 for n in names))
    lines = ["".ljust(width) + "".join(n.ljust(width) for n in names)]
    for name, cells in rows:
        lines.append(name.ljust(width) + "".join(c.ljust(width) for c in cells))
    return "\n".join(line.rstrip() for line in lines) + "\n"
