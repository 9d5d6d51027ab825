"""Ground truth on finite node sets.

``graph_distance`` gives all-pairs shortest paths over the graph of short
edges. ``vi_init`` / ``vi_step`` / ``vi_converge`` run the iterated midpoint
construction: start from the local cost, pick for each pair the node that
minimizes ``V(x, z)**2 + V(z, y)**2`` and replace ``V(x, y)`` by the two-leg
sum through it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from . import geometry as geo
from .exceptions import InvalidInputError

MAX_NODES = 4096
_CHUNK_ELEMS = 4_000_000


@dataclass
class OracleTable:
    nodes: np.ndarray
    V: np.ndarray
    mid_index: np.ndarray
    iteration: int = 0


class Analytic1D:
    """Speed profile F(x, v) = (1 + x)|v| on [0, 1]; d(a, b) = |Y(b) - Y(a)|, Y(t) = t + t^2/2."""

    @staticmethod
    def cost(x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return ((1.0 + x) * np.abs(y - x)).reshape(np.broadcast_shapes(x.shape, y.shape)[:-1] or ())

    @staticmethod
    def potential(t):
        return t + 0.5 * t * t

    @classmethod
    def grid(cls, n=129):
        return np.linspace(0.0, 1.0, n)[:, None]

    @classmethod
    def distance_matrix(cls, nodes):
        y = cls.potential(np.asarray(nodes)[:, 0])
        return np.abs(y[None, :] - y[:, None])


def analytic_distance(a, b):
    """Exact distance of the 1D fixture."""
    for v in (a, b):
        if not 0.0 <= v <= 1.0:
            raise InvalidInputError(f"{v} lies outside [0, 1]")
    return abs(Analytic1D.potential(b) - Analytic1D.potential(a))


def _cost_fn(cost):
    if isinstance(cost, geo.Environment):
        env = cost
        return lambda x, y: geo.obstructed_cost(env, x, y, check=False)
    return cost


def pairwise_cost(cost, nodes):
    """Matrix of cost(nodes[i], nodes[j])."""
    fn = _cost_fn(cost)
    nodes = np.asarray(nodes, dtype=np.float64)
    n = len(nodes)
    return np.asarray(fn(np.repeat(nodes[:, None], n, axis=1), np.repeat(nodes[None], n, axis=0)),
                      dtype=np.float64).reshape(n, n)


def graph_distance(cost, nodes, edge_cap, max_nodes=MAX_NODES):
    """All-pairs shortest paths over directed edges whose cost is at most ``edge_cap``.

    ``cost`` is an :class:`~midtree.geometry.Environment` (obstructed cost)
    or a callable ``cost(x, y)``. Nodes must be distinct. Unreachable pairs
    are ``inf``.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    if len(nodes) == 0:
        raise InvalidInputError("graph has no nodes")
    if len(nodes) > max_nodes:
        raise InvalidInputError(f"{len(nodes)} nodes exceed the cap of {max_nodes}")
    C = pairwise_cost(cost, nodes)
    mask = (C <= edge_cap) & ~np.eye(len(nodes), dtype=bool) & (C > 0)
    rows, cols = np.nonzero(mask)
    graph = csr_matrix((C[rows, cols], (rows, cols)), shape=C.shape)
    return shortest_path(graph, method="D", directed=True)


def vi_init(nodes, cost):
    """Table with V_0 = C on every node pair."""
    nodes = np.asarray(nodes, dtype=np.float64)
    V = pairwise_cost(cost, nodes)
    n = len(nodes)
    np.fill_diagonal(V, 0.0)
    mid = np.repeat(np.arange(n)[:, None], n, axis=1)
    return OracleTable(nodes, V, mid, 0)


def vi_step(table):
    """One synchronous sweep; argmin ties go to the smallest node index."""
    V = table.V
    n = len(V)
    V2 = V * V
    new_V = np.empty_like(V)
    new_mid = np.empty((n, n), dtype=np.int64)
    rows = max(1, _CHUNK_ELEMS // (n * n))
    cols = np.arange(n)
    for start in range(0, n, rows):
        xs = slice(start, min(n, start + rows))
        # crit[x, z, y] = V(x, z)^2 + V(z, y)^2
        crit = V2[xs, :, None] + V2[None, :, :]
        z = np.argmin(crit, axis=1)
        new_mid[xs] = z
        Vx = V[xs]
        new_V[xs] = np.take_along_axis(Vx, z, axis=1) + V[z, cols[None, :]]
    return OracleTable(table.nodes, new_V, new_mid, table.iteration + 1)


def midpoint_criterion(a, b):
    """a^2 + b^2 and its split (a+b)^2/2 + (a-b)^2/2; the second term vanishes at a midpoint."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a * a + b * b, 0.5 * (a + b) ** 2 + 0.5 * (a - b) ** 2


def two_one_criterion(a, b):
    """a^2 + 2 b^2 and its split 2/3 (a+b)^2 + 1/3 (a-2b)^2; minimized where a = 2b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a * a + 2.0 * b * b, (2.0 / 3.0) * (a + b) ** 2 + (1.0 / 3.0) * (a - 2.0 * b) ** 2


def relative_errors(V, reference):
    off = ~np.eye(len(V), dtype=bool) & np.isfinite(reference) & (reference > 0)
    rel = np.abs(V[off] - reference[off]) / reference[off]
    return float(rel.max()) if rel.size else 0.0, float(rel.mean()) if rel.size else 0.0


def vi_converge(table, max_iters, reference, tol=1e-10):
    """Iterate until ``max_iters`` sweeps or sup-norm relative change below ``tol``.

    Returns ``(final_table, report)``; the report lists, per iteration, the
    max/mean relative error against ``reference`` and the relative change.
    """
    trajectory = []
    mx, mean = relative_errors(table.V, reference)
    trajectory.append({"iteration": table.iteration, "max_rel_err": mx, "mean_rel_err": mean,
                       "max_rel_change": None})
    for _ in range(max_iters):
        nxt = vi_step(table)
        scale = np.maximum(np.abs(table.V), 1e-300)
        off = ~np.eye(len(table.V), dtype=bool)
        change = float((np.abs(nxt.V - table.V)[off] / scale[off]).max()) if off.any() else 0.0
        table = nxt
        mx, mean = relative_errors(table.V, reference)
        trajectory.append({"iteration": table.iteration, "max_rel_err": mx, "mean_rel_err": mean,
                           "max_rel_change": change})
        if change < tol:
            break
    report = {"iterations": table.iteration, "max_rel_err": trajectory[-1]["max_rel_err"],
              "mean_rel_err": trajectory[-1]["mean_rel_err"], "trajectory": trajectory}
    return table, report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def report_csv(report):
    lines = ["iteration,max_rel_err,mean_rel_err,max_rel_change"]
    for row in report["trajectory"]:
        ch = "" if row["max_rel_change"] is None else repr(row["max_rel_change"])
        lines.append(f"{row['iteration']},{row['max_rel_err']!r},{row['mean_rel_err']!r},{ch}")
    return "\n".join(lines) + "\n"


def euclid_grid(k=17, lo=-1.0, hi=1.0):
    """k x k grid of 2D nodes."""
    ax = np.linspace(lo, hi, k)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])
