"""Histogram gradient-boosted shallow trees (logistic or squared loss)."""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def _bin_edges(x, max_bins):
    edges = []
    qs = np.linspace(0, 1, max_bins + 1)[1:-1]
    for f in range(x.shape[1]):
        col = x[:, f]
        uniq = np.unique(col)
        if uniq.size <= max_bins:
            thr = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            thr = np.unique(np.quantile(col, qs))
        edges.append(thr)
    return edges


class GBTLearner:
    """Depth-limited boosted regression trees with Newton leaf values.

    Splits are searched on quantile histograms of each feature; a split on bin
    ``b`` of feature ``f`` sends ``x[f] <= edges[f][b]`` left.
    """

    name = "gbt"

    def __init__(self, n_trees=200, depth=2, learning_rate=0.1, subsample=0.8,
                 max_bins=32, l2=1.0, min_leaf=5, continuous=False):
        self.n_trees = n_trees
        self.depth = depth
        self.learning_rate = learning_rate
        self.subsample = subsample
        self.max_bins = max_bins
        self.l2 = l2
        self.min_leaf = min_leaf
        self.continuous = continuous

    def _best_split(self, xb, g, h, rows):
        G, H = g[rows].sum(), h[rows].sum()
        parent = G * G / (H + self.l2)
        best = (0.0, None, None)
        for f, thr in enumerate(self.edges_):
            nb = thr.size
            if nb == 0:
                continue
            b = xb[rows, f]
            gl = np.cumsum(np.bincount(b, weights=g[rows], minlength=nb + 1))[:nb]
            hl = np.cumsum(np.bincount(b, weights=h[rows], minlength=nb + 1))[:nb]
            cl = np.cumsum(np.bincount(b, minlength=nb + 1))[:nb]
            gr, hr, cr = G - gl, H - hl, rows.size - cl
            gain = gl * gl / (hl + self.l2) + gr * gr / (hr + self.l2) - parent
            gain[(cl < self.min_leaf) | (cr < self.min_leaf)] = -np.inf
            k = int(np.argmax(gain))
            if gain[k] > best[0] + 1e-12:
                best = (gain[k], f, k)
        return best

    def _grow(self, xb, g, h, rows, depth, nodes):
        """Append nodes depth-first; a node is [feature, bin, value, left, right]."""
        me = len(nodes)
        nodes.append([-1, 0, 0.0, me, me])
        if depth < self.depth and rows.size >= 2 * self.min_leaf:
            gain, f, b = self._best_split(xb, g, h, rows)
            if f is not None:
                go_left = xb[rows, f] <= b
                nodes[me][:2] = [f, b]
                nodes[me][3] = self._grow(xb, g, h, rows[go_left], depth + 1, nodes)
                nodes[me][4] = self._grow(xb, g, h, rows[~go_left], depth + 1, nodes)
                return me
        nodes[me][2] = -self.learning_rate * g[rows].sum() / (h[rows].sum() + self.l2)
        return me

    def fit(self, x, y, seed=None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(seed)
        self.edges_ = _bin_edges(x, self.max_bins)
        xb = self._binned(x)
        if self.continuous:
            self.init_ = float(y.mean())
        else:
            ybar = np.clip(y.mean(), 1e-4, 1 - 1e-4)
            self.init_ = float(np.log(ybar / (1 - ybar)))
        F = np.full(y.shape[0], self.init_)
        n_sub = max(2 * self.min_leaf, int(round(self.subsample * y.shape[0])))
        width = 2 ** (self.depth + 1) - 1
        self.feat_ = np.full((self.n_trees, width), -1, dtype=np.int64)
        self.bin_ = np.zeros((self.n_trees, width), dtype=np.int64)
        self.value_ = np.zeros((self.n_trees, width))
        self.child_ = np.zeros((self.n_trees, 2, width), dtype=np.int64)
        for t in range(self.n_trees):
            if self.continuous:
                g = F - y
                h = np.ones_like(F)
            else:
                p = expit(F)
                g = p - y
                h = p * (1 - p)
            if n_sub < y.shape[0]:
                rows = np.sort(rng.choice(y.shape[0], n_sub, replace=False))
            else:
                rows = np.arange(y.shape[0])
            nodes = []
            self._grow(xb, g, h, rows, 0, nodes)
            arr = np.array(nodes, dtype=float)
            k = len(nodes)
            self.feat_[t, :k] = arr[:, 0]
            self.bin_[t, :k] = arr[:, 1]
            self.value_[t, :k] = arr[:, 2]
            self.child_[t, 0, :k] = arr[:, 3]
            self.child_[t, 1, :k] = arr[:, 4]
            F += self._apply_binned(xb, slice(t, t + 1))
        return self

    def _binned(self, x):
        if not x.shape[1]:
            return np.zeros((x.shape[0], 0), dtype=np.int64)
        return np.column_stack([np.searchsorted(e, x[:, f], side="left") for f, e in enumerate(self.edges_)])

    def _apply_binned(self, xb, trees=slice(None)):
        """Sum of leaf values over the selected trees for binned rows."""
        N = xb.shape[0]
        flat = np.ascontiguousarray(xb.T).ravel()
        offset = np.arange(N)
        out = np.zeros(N)
        for t in range(self.n_trees)[trees]:
            feat, bins, child = self.feat_[t], self.bin_[t], self.child_[t]
            node = np.zeros(N, dtype=np.int64)
            for _ in range(self.depth):
                f = feat[node]
                go_right = flat.take(np.maximum(f, 0) * N + offset) > bins[node]
                node = np.where(f < 0, node, child[go_right.astype(np.int64), node])
            out += self.value_[t][node]
        return out

    def decision_function(self, x, chunk=20_000):
        xb = self._binned(np.asarray(x, dtype=float))
        F = np.full(xb.shape[0], self.init_)
        for s in range(0, xb.shape[0], chunk):
            F[s:s + chunk] += self._apply_binned(xb[s:s + chunk])
        return F

    def predict(self, x):
        F = self.decision_function(x)
        return F if self.continuous else expit(F)
