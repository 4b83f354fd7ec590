"""Individual-level nuisance fits and the cluster-level H and G built from them."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from .stack import LEARNERS, ConstantLearner, StackedLearner


class ConfigurationError(ValueError):
    pass


class ConstantTreatment(UserWarning):
    """All training treatments identical; a clipped constant propensity is used."""


@dataclass(frozen=True)
class LearnerSpec:
    learners: tuple = ("logit", "gbt", "knn")
    cv_folds: int = 5
    ensemble: bool = True

    def __post_init__(self):
        object.__setattr__(self, "learners", tuple(self.learners))
        if not self.learners:
            raise ConfigurationError("learner library is empty")
        unknown = set(self.learners) - set(LEARNERS)
        if unknown:
            raise ConfigurationError(f"unknown learners {sorted(unknown)}; choose from {sorted(LEARNERS)}")
        if self.cv_folds < 2:
            raise ConfigurationError("cv_folds must be >= 2")

    @property
    def library(self) -> tuple:
        return self.learners if self.ensemble else ("logit",)

    @classmethod
    def from_dict(cls, d: dict | None) -> "LearnerSpec":
        d = dict(d or {})
        return cls(tuple(d.get("learners", cls.learners)), int(d.get("cv_folds", 5)), bool(d.get("ensemble", True)))


def is_binary(y) -> bool:
    y = np.asarray(y)
    return bool(np.all((y == 0) | (y == 1)))


def outcome_features(a_own, abar_others, x, singleton=None):
    cols = [np.asarray(a_own, float)[:, None], np.asarray(abar_others, float)[:, None], np.asarray(x, float)]
    if singleton is not None:
        cols.append(np.asarray(singleton, float)[:, None])
    return np.hstack(cols)


def _grid_features(x_block, singleton_feature):
    """Outcome-regression rows for every (cluster, unit, own treatment, others treated).

    ``x_block`` is (c, n, p); rows are ordered to reshape to (c, n, 2, n).
    """
    c, n, p = x_block.shape
    t = np.arange(2)
    s = np.arange(n)
    abar = s / (n - 1) if n > 1 else np.zeros(1)
    shape = (c, n, 2, n)
    A = np.broadcast_to(t[None, None, :, None], shape).reshape(-1)
    S = np.broadcast_to(abar[None, None, None, :], shape).reshape(-1)
    X = np.broadcast_to(x_block[:, :, None, None, :], shape + (p,)).reshape(-1, p)
    single = np.full(A.shape, float(n == 1)) if singleton_feature else None
    return outcome_features(A, S, X, single)


@dataclass(frozen=True, eq=False)
class NuisanceModel:
    """Fitted propensity pi*(x_j) and outcome regression g*(a_j, abar_(-j), x_j)."""

    propensity: object
    outcome: object
    clip_eps: float = 0.01
    fold_id: int | None = None
    singleton_feature: bool = False
    binary_outcome: bool = True
    column_names: tuple = ()
    info: dict = field(default_factory=dict)

    def propensity_x(self, x, n=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pi = self.propensity.predict(x)
        return np.clip(pi, self.clip_eps, 1.0 - self.clip_eps)

    def block_arrays(self, x_block):
        """Propensities (c, n) and outcome table (c, n, 2, n) for a same-size block.

        ``table[i, j, t, s]`` is the predicted outcome of unit j when it has
        treatment t and s of the other units are treated.
        """
        c, n, p = x_block.shape
        pi = self.propensity_x(x_block.reshape(c * n, p)).reshape(c, n)
        g = self.outcome.predict(_grid_features(x_block, self.singleton_feature))
        if self.binary_outcome:
            g = np.clip(g, 0.0, 1.0)
        return pi, g.reshape(c, n, 2, n)


def fit_propensity(train: Dataset, spec: LearnerSpec, seed=None, clip_eps=0.01):
    _, a, x, _, _, groups = train.unit_arrays()
    if a.size == 0:
        raise ConfigurationError("empty training set")
    if np.all(a == a[0]):
        warnings.warn("all training treatments are identical; using a constant propensity", ConstantTreatment,
                      stacklevel=2)
        return ConstantLearner(np.clip(a[0], clip_eps, 1 - clip_eps))
    return StackedLearner(spec.library, spec.cv_folds).fit(x, a, groups=groups, seed=seed)


def fit_outcome(train: Dataset, spec: LearnerSpec, seed=None, singleton_feature=None):
    y, a, x, abar, n, groups = train.unit_arrays()
    if singleton_feature is None:
        singleton_feature = train.has_singletons()
    feats = outcome_features(a, abar, x, (n == 1).astype(float) if singleton_feature else None)
    binary = is_binary(y)
    if np.all(y == y[0]):
        return ConstantLearner(y[0])
    return StackedLearner(spec.library, spec.cv_folds, continuous=not binary).fit(feats, y, groups=groups, seed=seed)


def fit_nuisance(train: Dataset, spec: LearnerSpec, seed=None, clip_eps=0.01, fold_id=None,
                 singleton_feature=None) -> NuisanceModel:
    """Fit both nuisance regressions on ``train`` (units pooled across clusters)."""
    ss = np.random.SeedSequence(seed)
    s_prop, s_out = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if singleton_feature is None:
        singleton_feature = train.has_singletons()
    prop = fit_propensity(train, spec, s_prop, clip_eps)
    out = fit_outcome(train, spec, s_out, singleton_feature)
    y_all = np.concatenate([c.y for c in train.clusters])
    info = {}
    for name, learner in (("propensity", prop), ("outcome", out)):
        if isinstance(learner, StackedLearner):
            info[name] = dict(zip(learner.library, np.round(learner.weights_, 6).tolist()))
    return NuisanceModel(prop, out, clip_eps, fold_id, singleton_feature, is_binary(y_all), train.column_names, info)


def cluster_H(model, a, x, n=None) -> float:
    """P(A = a | X, N) under conditional independence of unit treatments."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] if n is None else n
    pi, _ = model.block_arrays(x.reshape(1, n, -1))
    a = np.asarray(a).reshape(n)
    return float(np.exp(np.sum(np.log(np.where(a == 1, pi[0], 1.0 - pi[0])))))


def cluster_G(model, a, x, n=None) -> np.ndarray:
    """Vector of predicted unit outcomes E(Y_j | A = a, X, N)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] if n is None else n
    _, tab = model.block_arrays(x.reshape(1, n, -1))
    a = np.asarray(a, dtype=int).reshape(n)
    others = a.sum() - a
    return tab[0, np.arange(n), a, others]
