"""Convex stacking of base learners by cross-validated loss."""
from __future__ import annotations

import numpy as np

from .gbt import GBTLearner
from .knn import KNNLearner
from .logit import LogitLearner

LEARNERS = {"logit": LogitLearner, "gbt": GBTLearner, "knn": KNNLearner}
PROB_FLOOR = 1e-6


def make_learner(name, continuous=False):
    try:
        return LEARNERS[name](continuous=continuous)
    except KeyError:
        raise ValueError(f"unknown learner {name!r}; choose from {sorted(LEARNERS)}") from None


def project_simplex(v):
    """Euclidean projection onto {w >= 0, sum w = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def stack_loss(w, Z, y, continuous=False):
    p = Z @ w
    if continuous:
        return float(np.mean((y - p) ** 2))
    p = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _stack_grad(w, Z, y, continuous):
    p = Z @ w
    if continuous:
        return 2 * Z.T @ (p - y) / y.size
    p = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    return Z.T @ (-(y / p) + (1 - y) / (1 - p)) / y.size


def stack_weights(Z, y, continuous=False, n_iter=200, step=0.1, tol=1e-9):
    """Simplex weights minimising the loss of ``Z @ w``.

    Starts from the best single column and only accepts non-increasing steps,
    so the result is never worse than the best base learner.
    """
    L = Z.shape[1]
    single = np.array([stack_loss(np.eye(L)[k], Z, y, continuous) for k in range(L)])
    w = np.eye(L)[int(np.argmin(single))]
    loss = single.min()
    for _ in range(n_iter):
        g = _stack_grad(w, Z, y, continuous)
        t = step
        while t > 1e-8:
            cand = project_simplex(w - t * g)
            cand_loss = stack_loss(cand, Z, y, continuous)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            break
        improvement = loss - cand_loss
        w, loss = cand, cand_loss
        if improvement < tol:
            break
    return w, loss, single


class StackedLearner:
    """Super-learner style ensemble with group-respecting CV folds."""

    name = "stack"

    def __init__(self, library=("logit", "gbt", "knn"), cv_folds=5, continuous=False):
        self.library = tuple(library)
        self.cv_folds = cv_folds
        self.continuous = continuous

    def fit(self, x, y, groups=None, seed=None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(seed)
        groups = np.arange(y.size) if groups is None else np.asarray(groups)
        uniq = np.unique(groups)
        order = rng.permutation(uniq.size)
        fold_of_group = np.empty(uniq.size, dtype=int)
        fold_of_group[order] = np.arange(uniq.size) % self.cv_folds
        fold = fold_of_group[np.searchsorted(uniq, groups)]
        seeds = rng.integers(0, 2**63 - 1, size=(len(self.library), self.cv_folds + 1))
        if len(self.library) == 1:
            self.weights_ = np.ones(1)
            self.cv_loss_ = None
            self.single_cv_loss_ = None
        else:
            Z = np.empty((y.size, len(self.library)))
            for v in range(self.cv_folds):
                test = fold == v
                if not test.any():
                    continue
                for l, name in enumerate(self.library):
                    learner = make_learner(name, self.continuous).fit(x[~test], y[~test], seed=seeds[l, v])
                    Z[test, l] = learner.predict(x[test])
            self.weights_, self.cv_loss_, self.single_cv_loss_ = stack_weights(Z, y, self.continuous)
        self.learners_ = []
        for l, name in enumerate(self.library):
            if self.weights_[l] > 0:
                self.learners_.append((self.weights_[l], make_learner(name, self.continuous).fit(x, y, seed=seeds[l, -1])))
        return self

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[0])
        for w, learner in self.learners_:
            out += w * learner.predict(x)
        return out


class ConstantLearner:
    name = "constant"

    def __init__(self, value):
        self.value = float(value)

    def fit(self, x, y, groups=None, seed=None):
        return self

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)
