"""Main-effects logistic regression by iteratively reweighted least squares."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit, log_expit


class SeparationWarning(RuntimeWarning):
    pass


def _design(x):
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones(x.shape[0]), x])


def neg_log_likelihood(beta, X, y, ridge=0.0):
    """Mean negative log-likelihood (plus optional ridge on non-intercept terms)."""
    eta = X @ beta
    nll = -np.mean(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    return nll + 0.5 * ridge * np.sum(beta[1:] ** 2)


def score(beta, X, y, ridge=0.0):
    """Gradient of :func:`neg_log_likelihood`."""
    g = X.T @ (expit(X @ beta) - y) / X.shape[0]
    g[1:] += ridge * beta[1:]
    return g


def irls(X, y, ridge=0.0, max_iter=100, tol=1e-12):
    """Newton-Raphson on the mean negative log-likelihood.

    Returns (beta, converged). Uses step halving so the objective never
    increases; ``tol`` is on the sup-norm of the score.
    """
    n, k = X.shape
    beta = np.zeros(k)
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta[0] = np.log(ybar / (1 - ybar))
    pen = np.full(k, ridge)
    pen[0] = 0.0
    obj = neg_log_likelihood(beta, X, y, ridge)
    for _ in range(max_iter):
        g = score(beta, X, y, ridge)
        if np.max(np.abs(g)) < tol:
            return beta, True
        p = expit(X @ beta)
        w = p * (1 - p)
        hess = (X * w[:, None]).T @ X / n + np.diag(pen)
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, g, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta - t * step
            new_obj = neg_log_likelihood(cand, X, y, ridge)
            if new_obj <= obj + 1e-15:
                break
            t *= 0.5
        beta, obj = cand, new_obj
        if np.max(np.abs(beta)) > 50:
            return beta, False
    return beta, bool(np.max(np.abs(score(beta, X, y, ridge))) < max(tol, 1e-8))


class LogitLearner:
    """Logistic regression on raw features, falling back to a ridge fit on separation."""

    name = "logit"

    def __init__(self, ridge_fallback=1e-4, continuous=False):
        self.ridge_fallback = ridge_fallback
        self.continuous = continuous
        self.coef_ = None
        self.ridge_ = 0.0

    def fit(self, x, y, seed=None):
        X = _design(x)
        y = np.asarray(y, dtype=float)
        if self.continuous:
            self.coef_ = np.linalg.lstsq(X, y, rcond=None)[0]
            return self
        # drop constant columns so the Hessian stays nonsingular
        keep = np.concatenate([[True], np.ptp(X[:, 1:], axis=0) > 0])
        beta, ok = irls(X[:, keep], y)
        if not ok:
            warnings.warn("logistic IRLS did not converge (separation?); refitting with ridge penalty",
                          SeparationWarning, stacklevel=2)
            self.ridge_ = self.ridge_fallback
            beta, _ = irls(X[:, keep], y, ridge=self.ridge_)
        coef = np.zeros(X.shape[1])
        coef[keep] = beta
        self.coef_ = coef
        return self

    def predict(self, x):
        eta = _design(x) @ self.coef_
        return eta if self.continuous else expit(eta)
