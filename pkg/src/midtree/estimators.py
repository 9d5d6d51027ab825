"""Estimator-style wrappers around the three planners.

``fit`` trains against the environment (there is no supervised ``y``),
``predict`` maps an ``(n, 2 * d_rep)`` array of start/goal pairs to paths and
``score`` returns the success rate on those pairs.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import geometry as geo
from .baselines.pg import PGConfig, pg_train
from .baselines.seq import PPOConfig, ppo_train
from .evaluation import EvalTaskSpec, check_env_compat, judge_paths
from .exceptions import InvalidInputError
from .learner import LearnerConfig, TreePolicy, train


def validate_env(env):
    if isinstance(env, geo.Environment):
        return env
    if isinstance(env, str):
        return geo.make_env(env)
    if isinstance(env, dict):
        return geo.env_from_dict(env)
    raise InvalidInputError(f"cannot build an environment from {type(env).__name__}")


def validate_pairs(env, X):
    """Finite float array of shape (n, 2 * d_rep)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    return check_env_compat(env, X)


class _Planner(BaseEstimator):
    def _split(self, X):
        X = validate_pairs(self.env_, X)
        d = self.env_.d_rep
        return X[:, :d], X[:, d:]

    def predict(self, X, depth=None):
        check_is_fitted(self, "policy_")
        s, g = self._split(X)
        return self.policy_.generate(s, g, self.D_max if depth is None else depth)

    def score(self, X, y=None):
        paths = self.predict(X)
        spec = EvalTaskSpec(2**self.D_max, self.epsilon, len(paths))
        return judge_paths(self.env_, paths, spec.epsilon).success_rate


class MidpointTreePlanner(_Planner):
    """Actor-critic midpoint tree planner."""

    def __init__(self, env="matsumoto", T=1_000_000, D_max=6, epsilon=0.1,
                 schedule="cycle_based", variant="midpoint", lr=3e-5, hidden=(64, 64),
                 activation="relu", batch_size=256, n_epochs=10, td_lambda=None, c_cut=30.0,
                 seed=0):
        self.env = env
        self.T = T
        self.D_max = D_max
        self.epsilon = epsilon
        self.schedule = schedule
        self.variant = variant
        self.lr = lr
        self.hidden = hidden
        self.activation = activation
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.td_lambda = td_lambda
        self.c_cut = c_cut
        self.seed = seed

    def fit(self, X=None, y=None):
        self.env_ = validate_env(self.env)
        cfg = LearnerConfig(T=self.T, D_max=self.D_max, epsilon=self.epsilon,
                            schedule=self.schedule, variant=self.variant, c_cut=self.c_cut,
                            td_lambda=self.td_lambda, lr=self.lr, hidden=list(self.hidden),
                            activation=self.activation, batch_size=self.batch_size,
                            n_epochs=self.n_epochs, seed=self.seed)
        pairs = None if X is None else validate_pairs(self.env_, X)
        self.state_ = train(self.env_, cfg, pairs)
        self.policy_ = TreePolicy(self.state_.actor, self.env_)
        self.timestep_ = self.state_.timestep
        return self


class SeqPPOPlanner(_Planner):
    """Sequential step policy trained with PPO; paths have at most 2**D_max steps."""

    def __init__(self, env="matsumoto", T=500_000, D_max=4, epsilon=0.1, lr=3e-4,
                 hidden=(64, 64), activation="tanh", batch_size=128, n_epochs=10, seed=0):
        self.env = env
        self.T = T
        self.D_max = D_max
        self.epsilon = epsilon
        self.lr = lr
        self.hidden = hidden
        self.activation = activation
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.seed = seed

    def fit(self, X=None, y=None):
        self.env_ = validate_env(self.env)
        cfg = PPOConfig(T=self.T, epsilon=self.epsilon, horizon=2**self.D_max, lr=self.lr,
                        hidden=list(self.hidden), activation=self.activation,
                        batch_size=self.batch_size, n_epochs=self.n_epochs, seed=self.seed)
        pairs = None if X is None else validate_pairs(self.env_, X)
        self.policy_, self.history_ = ppo_train(self.env_, cfg, pairs)
        return self


class PGPlanner(_Planner):
    """Per-depth policy-gradient midpoint planner."""

    def __init__(self, env="matsumoto", D_max=6, epsilon=0.1, cycles=None, lr=5e-3,
                 hidden=(64, 64), activation="tanh", seed=0):
        self.env = env
        self.D_max = D_max
        self.epsilon = epsilon
        self.cycles = cycles
        self.lr = lr
        self.hidden = hidden
        self.activation = activation
        self.seed = seed

    def fit(self, X=None, y=None):
        self.env_ = validate_env(self.env)
        cycles = list(self.cycles) if self.cycles is not None else [100] * self.D_max
        cfg = PGConfig(D_max=self.D_max, epsilon=self.epsilon, cycles=cycles, lr=self.lr,
                       hidden=list(self.hidden), activation=self.activation, seed=self.seed)
        pairs = None if X is None else validate_pairs(self.env_, X)
        self.policy_, self.history_, ledger = pg_train(self.env_, cfg, pairs)
        self.timestep_ = ledger.total()
        return self
