"""Shared test doubles."""
import numpy as np

from midtree import geometry as geo
from midtree import neural as nn
from midtree.learner import Actor


class ExactEuclideanCritic:
    """Critic protocol backed by the true Euclidean distance."""

    def value(self, a, b):
        return np.linalg.norm(np.asarray(b) - np.asarray(a), axis=-1)

    def probe(self, a, b):
        diff = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
        dist = np.linalg.norm(diff, axis=-1)
        return dist, (diff, dist)

    def input_grad(self, cache, dvalue):
        diff, dist = cache
        unit = diff / np.where(dist > 0, dist, 1.0)[:, None]
        gb = dvalue[:, None] * unit
        return -gb, gb


def constant_actor(env, point, log_std=-5.0):
    """Actor whose head mean is ``point`` for every input (log-std at the clamp floor)."""
    d = env.d_rep
    W = np.zeros((2 * d, 2 * d))
    b = np.concatenate([np.asarray(point, dtype=np.float64), np.full(d, log_std)])
    return Actor(env, nn.NetParams([2 * d, 2 * d], "tanh", [W], [b]))


def averaging_actor(env):
    """Actor whose head mean is (s + g) / 2 exactly."""
    d = env.d_rep
    W = np.zeros((2 * d, 2 * d))
    W[:d, :d] = 0.5 * np.eye(d)
    W[d:, :d] = 0.5 * np.eye(d)
    b = np.concatenate([np.zeros(d), np.full(d, -5.0)])
    return Actor(env, nn.NetParams([2 * d, 2 * d], "tanh", [W], [b]))


def wide_plane(half=100.0):
    """Obstacle-free Euclidean plane with far-away bounds (projection never active)."""
    return geo.make_env("euclid2d_obstacles", c_P=0.0, obstacles=(),
                        lower=(-half, -half), upper=(half, half))


def line_env(lo=-10.0, hi=10.0):
    """Euclidean 'plane' used as a line: only the first coordinate varies in the tests."""
    return geo.make_env("euclid2d_obstacles", c_P=0.0, obstacles=(), lower=(lo, lo), upper=(hi, hi))
