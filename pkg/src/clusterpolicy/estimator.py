"""Cross-fitted influence-function estimators of policy means and effects.

For each cluster the uncentered influence function of mu(Q) is

    sum_a {Q(a) + phi_Q(A; a)} * mean_j G_j(a)  +  Q(A) / H(A) * (Ybar - mean_j G_j(A))

and the mu_t(Q) version replaces Q(a) by the leave-one-out marginals
Q(a_(-j)) restricted to a_j = t. The lattice sum runs over all 2**n vectors,
or over ``r`` uniform draws weighted by 2**n / r when 2**n is too large. The
observed-vector atom of the policy influence term is always added exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .data import Dataset, enumerate_treatments, subsample_treatments
from .nuisance.model import LearnerSpec, NuisanceModel, fit_nuisance, fit_propensity
from .nuisance.stack import ConstantLearner
from .policies import Policy, PolicyInputs, parse_policy

log = logging.getLogger(__name__)

LOG_CLIP = -30.0
KINDS = ("mu", "mu1", "mu0", "de", "se1", "se0", "oe", "te")
TWO_POLICY = ("se1", "se0", "oe", "te")


class TooFewClusters(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    K: int = 2
    r: int | str = 100
    S: int = 1
    seed: int = 0
    alpha_level: float = 0.05
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    clip_eps: float = 0.01
    exact_floor: int = 4096
    subsample_seed: int | None = None
    block_elems: int = 1_500_000

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.r != "exact" and (not isinstance(self.r, (int, np.integer)) or self.r < 1):
            raise ValueError("r must be a positive integer or 'exact'")
        if not 0.0 < self.alpha_level < 1.0:
            raise ValueError("alpha_level must lie in (0, 1)")

    def is_exact(self, n: int) -> bool:
        return self.r == "exact" or 2**n <= max(int(self.r), self.exact_floor)

    def lattice_size(self, n: int) -> int:
        return 2**n if self.is_exact(n) else int(self.r)


@dataclass(frozen=True)
class EstimandSpec:
    """mu, mu1, mu0, de (one policy) or se1, se0, oe, te (policy vs reference)."""

    kind: str
    policy: Policy
    reference: Policy | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimand {self.kind!r}; choose from {KINDS}")
        if self.kind in TWO_POLICY and self.reference is None:
            raise ValueError(f"estimand {self.kind} needs two policies")
        if self.kind not in TWO_POLICY and self.reference is not None:
            raise ValueError(f"estimand {self.kind} takes a single policy")

    @classmethod
    def parse(cls, text: str) -> "EstimandSpec":
        """``kind:policy`` or ``kind:policy/reference``, e.g. ``oe:cips:delta0=0.5/cips:delta0=1``."""
        kind, _, rest = text.strip().partition(":")
        kind = kind.strip().lower()
        parts = rest.split("/")
        pol = parse_policy(parts[0])
        ref = parse_policy(parts[1]) if len(parts) > 1 else None
        return cls(kind, pol, ref)

    def components(self):
        q, r = self.policy, self.reference
        return {
            "mu": [(1.0, (q, "mu"))],
            "mu1": [(1.0, (q, "mu1"))],
            "mu0": [(1.0, (q, "mu0"))],
            "de": [(1.0, (q, "mu1")), (-1.0, (q, "mu0"))],
            "se1": [(1.0, (q, "mu1")), (-1.0, (r, "mu1"))],
            "se0": [(1.0, (q, "mu0")), (-1.0, (r, "mu0"))],
            "oe": [(1.0, (q, "mu")), (-1.0, (r, "mu"))],
            "te": [(1.0, (q, "mu1")), (-1.0, (r, "mu0"))],
        }[self.kind]

    @property
    def policy_label(self) -> str:
        return self.policy.label if self.reference is None else f"{self.policy.label}|{self.reference.label}"

    @property
    def param(self):
        if self.reference is None:
            return self.policy.param
        return {"policy": self.policy.param, "reference": self.reference.param}

    @property
    def label(self) -> str:
        return f"{self.kind}[{self.policy_label}]"


@dataclass
class EstimateResult:
    spec: EstimandSpec
    point: float
    se: float
    ci: tuple
    per_cluster_eif: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def estimand(self):
        return self.spec.kind

    def to_dict(self):
        return {
            "estimand": self.spec.kind,
            "policy": self.spec.policy_label,
            "param": self.spec.param,
            "point": float(self.point),
            "se": float(self.se),
            "ci_lo": float(self.ci[0]),
            "ci_hi": float(self.ci[1]),
            "flags": list(self.flags),
        }


@dataclass
class EstimateReport:
    meta: dict
    results: list
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"meta": dict(self.meta), "results": [r.to_dict() for r in self.results],
                "diagnostics": self.diagnostics}

    def __getitem__(self, key):
        if isinstance(key, int):
            return self.results[key]
        for r in self.results:
            if r.spec == key or r.spec.label == key:
                return r
        raise KeyError(key)


# --------------------------------------------------------------------------
# per-cluster influence functions

@dataclass
class ClusterBlock(PolicyInputs):
    """Same-size clusters with nuisance predictions attached."""

    y: np.ndarray | None = None       # (c, n)
    gtab: np.ndarray | None = None    # (c, n, 2, n)
    index: np.ndarray | None = None   # (c,) positions in the dataset


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    with np.errstate(divide="ignore"):
        lnum = np.maximum(np.log(num), LOG_CLIP)
        lden = np.maximum(np.log(den), LOG_CLIP)
    return np.where(num > 0, np.exp(lnum - lden), 0.0)


def lattice_outcomes(gtab, bits):
    """G_j(a) for each lattice vector: (c, L, n)."""
    c, n = gtab.shape[:2]
    s = bits.sum(axis=-1, dtype=np.int64)
    others = s[..., None] - bits
    ci = np.arange(c)[:, None, None]
    jj = np.arange(n)[None, None, :]
    return gtab[ci, jj, bits.astype(np.int64), others]


def block_eifs(block: ClusterBlock, policy: Policy, bits, lattice_weight, G=None):
    """Uncentered influence-function values of mu, mu1, mu0 for every cluster in the block.

    ``bits`` is (1 or c, L, n); ``lattice_weight`` is a scalar (1 for the full
    lattice, 2**n / r for a uniform subsample). Returns (dict of (c,) arrays,
    (c,) flags).
    """
    c, n = block.pi.shape
    A = block.a_obs.astype(np.int64)
    if G is None:
        G = lattice_outcomes(block.gtab, bits)
    T = policy.terms(bits, block)
    TA = policy.terms(A[:, None, :].astype(np.int8), block)

    ci = np.arange(c)[:, None]
    jj = np.arange(n)[None, :]
    sA = A.sum(axis=1)
    othersA = sA[:, None] - A
    GA = block.gtab[ci, jj, A, othersA]
    HA = np.prod(np.where(A == 1, block.pi, 1.0 - block.pi), axis=1)
    y = block.y

    out = {}
    gbar = G.mean(axis=-1)
    smooth = ((T.q + T.phi) * gbar).sum(axis=1) * lattice_weight
    atom = T.atom * GA.mean(axis=1)
    correction = _safe_ratio(TA.q[:, 0], HA) * (y.mean(axis=1) - GA.mean(axis=1))
    out["mu"] = smooth + atom + correction

    qm_phim = T.q_marg + T.phi_marg
    resid = y - GA
    for t, key in ((1, "mu1"), (0, "mu0")):
        sel = bits == t
        smooth_t = np.where(sel, qm_phim * G, 0.0).sum(axis=1).mean(axis=-1) * lattice_weight
        Gt = block.gtab[ci, jj, t, othersA]
        atom_t = T.atom * Gt.mean(axis=1)
        num = np.where(A == t, TA.q_marg[:, 0, :], 0.0)
        corr_t = (_safe_ratio(num, HA[:, None]) * resid).mean(axis=1)
        out[key] = smooth_t + atom_t + corr_t
    return out, T.flags | TA.flags


def _lattice_for(n, cfg: EstimatorConfig, block_index, lattice_key):
    if cfg.is_exact(n):
        return enumerate_treatments(n)[None], 1.0
    r = int(cfg.r)
    draws = np.empty((len(block_index), r, n), dtype=np.int8)
    for row, i in enumerate(block_index):
        ss = np.random.SeedSequence(lattice_key[0], spawn_key=(lattice_key[1], int(i)))
        draws[row], w = subsample_treatments(n, r, np.random.default_rng(ss))
    return draws, w


def iter_blocks(data: Dataset, pis, gtabs, cfg: EstimatorConfig, indices=None):
    """Group clusters by size and chunk so lattice arrays stay bounded."""
    indices = np.arange(data.m) if indices is None else np.asarray(indices)
    sizes = np.array([data.clusters[i].n for i in indices])
    for n in np.unique(sizes):
        idx = indices[sizes == n]
        per = max(1, cfg.block_elems // (cfg.lattice_size(int(n)) * int(n)))
        for start in range(0, idx.size, per):
            chunk = idx[start:start + per]
            cl = [data.clusters[i] for i in chunk]
            yield ClusterBlock(
                pi=np.stack([pis[i] for i in chunk]),
                a_obs=np.stack([c.a for c in cl]).astype(float),
                x=np.stack([c.x for c in cl]),
                column_names=data.column_names,
                y=np.stack([c.y for c in cl]),
                gtab=np.stack([gtabs[i] for i in chunk]),
                index=chunk,
            )


def nuisance_arrays(data: Dataset, model, indices):
    """Per-cluster propensities and outcome tables from one fitted model."""
    pis, gtabs = {}, {}
    indices = np.asarray(indices)
    sizes = np.array([data.clusters[i].n for i in indices])
    for n in np.unique(sizes):
        idx = indices[sizes == n]
        xb = np.stack([data.clusters[i].x for i in idx])
        pi, tab = model.block_arrays(xb)
        for row, i in enumerate(idx):
            pis[int(i)] = pi[row]
            gtabs[int(i)] = tab[row]
    return pis, gtabs


def cluster_eifs(data: Dataset, policies: Sequence[Policy], pis, gtabs, cfg: EstimatorConfig,
                 lattice_key=(0, 0)):
    """Uncentered influence values for every cluster, policy and mu/mu1/mu0.

    Returns ({(policy, kind): (m,) array}, {policy: flagged cluster indices}).
    """
    m = data.m
    vals = {(p, k): np.empty(m) for p in policies for k in ("mu", "mu1", "mu0")}
    flagged = {p: [] for p in policies}
    for block in iter_blocks(data, pis, gtabs, cfg):
        n = block.n
        bits, w = _lattice_for(n, cfg, block.index, lattice_key)
        G = lattice_outcomes(block.gtab, bits)
        for p in policies:
            out, flags = block_eifs(block, p, bits, w, G)
            for k, v in out.items():
                vals[(p, k)][block.index] = v
            flagged[p].extend(block.index[flags].tolist())
    return vals, flagged


# --------------------------------------------------------------------------
# cross-fitting

def assign_folds(m: int, K: int, seed) -> np.ndarray:
    """Shuffle clusters, then deal them round-robin into K folds."""
    perm = np.random.default_rng(seed).permutation(m)
    folds = np.empty(m, dtype=int)
    folds[perm] = np.arange(m) % K
    return folds


def default_fitter(cfg: EstimatorConfig, learner: LearnerSpec | None = None):
    spec = learner or cfg.learner

    def fit(train, seed, fold_id=None):
        return fit_nuisance(train, spec, seed=seed, clip_eps=cfg.clip_eps, fold_id=fold_id)
    return fit


@dataclass
class CrossFit:
    """Fold assignments and per-cluster nuisance predictions for each split."""

    folds: list
    pis: list
    gtabs: list
    info: list = field(default_factory=list)


def _split_seeds(cfg):
    return [np.random.SeedSequence(cfg.seed, spawn_key=(s,)) for s in range(cfg.S)]


def crossfit(data: Dataset, cfg: EstimatorConfig, fitter: Callable | None = None) -> CrossFit:
    if data.m < 2 * cfg.K:
        raise TooFewClusters(f"need at least {2 * cfg.K} clusters for K={cfg.K}, have {data.m}")
    fitter = fitter or default_fitter(cfg)
    folds_all, pis_all, gtabs_all, info = [], [], [], []
    for s, ss in enumerate(_split_seeds(cfg)):
        fold_seed, *fit_seeds = ss.spawn(cfg.K + 1)
        folds = assign_folds(data.m, cfg.K, fold_seed)
        pis, gtabs = {}, {}
        split_info = []
        for k in range(cfg.K):
            test = np.flatnonzero(folds == k)
            train = data.subset(np.flatnonzero(folds != k))
            model = fitter(train, int(fit_seeds[k].generate_state(1)[0]), k)
            p, g = nuisance_arrays(data, model, test)
            pis.update(p)
            gtabs.update(g)
            split_info.append(getattr(model, "info", {}))
        folds_all.append(folds)
        pis_all.append(pis)
        gtabs_all.append(gtabs)
        info.append(split_info)
    return CrossFit(folds_all, pis_all, gtabs_all, info)


def fold_average(values, folds, K):
    return float(np.mean([values[folds == k].mean() for k in range(K)]))


def variance(per_cluster_eifs, point, folds=None, K=None) -> float:
    """Mean squared deviation of the influence values from ``point``, averaged within folds."""
    v = np.asarray(per_cluster_eifs, dtype=float)
    dev = (v - point) ** 2
    if folds is None:
        return float(dev.mean())
    K = K or int(folds.max()) + 1
    return fold_average(dev, np.asarray(folds), K)


def wald_ci(point, se, alpha_level):
    z = float(norm.ppf(1 - alpha_level / 2))
    return (float(point - z * se), float(point + z * se))


def evaluate(data: Dataset, estimands: Sequence[EstimandSpec], cfg: EstimatorConfig, cf: CrossFit) -> EstimateReport:
    """Turn a cross-fit into point estimates, standard errors and intervals."""
    m = data.m
    policies = list(dict.fromkeys(p for e in estimands for _, (p, _k) in e.components()))
    for p in policies:
        p.check(data.column_names, data)
    lattice_seed = cfg.seed if cfg.subsample_seed is None else cfg.subsample_seed
    per_split = []
    flagged = {p: set() for p in policies}
    for s in range(len(cf.folds)):
        vals, fl = cluster_eifs(data, policies, cf.pis[s], cf.gtabs[s], cfg, lattice_key=(lattice_seed, s))
        for p in policies:
            flagged[p].update(fl[p])
        per_split.append(vals)
    S = len(per_split)

    def split_stats(vec, point_s, s):
        return variance(vec, point_s, cf.folds[s], cfg.K)

    # component (base) quantities
    base_keys = list(dict.fromkeys(key for e in estimands for _, key in e.components()))
    base = {}
    for key in base_keys:
        pts = np.array([fold_average(per_split[s][key], cf.folds[s], cfg.K) for s in range(S)])
        base[key] = pts

    results = []
    z_meta = {}
    for e in estimands:
        comps = e.components()
        split_points = np.array([sum(sign * base[key][s] for sign, key in comps) for s in range(S)])
        if S == 1:
            point = split_points[0]
            vec = sum(sign * per_split[0][key] for sign, key in comps)
            var = split_stats(vec, point, 0)
        else:
            med = {key: float(np.median(base[key])) for _, key in comps}
            point = sum(sign * med[key] for sign, key in comps)
            vecs = [sum(sign * per_split[s][key] for sign, key in comps) for s in range(S)]
            var = float(np.median([split_stats(vecs[s], split_points[s], s) + (split_points[s] - point) ** 2
                                   for s in range(S)]))
            attached = {key: int(np.argmin(np.abs(base[key] - med[key]))) for _, key in comps}
            vec = sum(sign * per_split[attached[key]][key] for sign, key in comps)
            z_meta[e.label] = {"split_spread": float(np.ptp(split_points))}
        se = float(np.sqrt(max(var, 0.0) / m))
        flags = []
        n_flag = len(set().union(*(flagged[p] for _, (p, _k) in comps)))
        if n_flag:
            flags.append(f"tpb_denominator_floored:{n_flag}")
        results.append(EstimateResult(e, float(point), se, wald_ci(point, se, cfg.alpha_level), vec, flags))

    diag = {
        "fold_sizes": [np.bincount(f, minlength=cfg.K).tolist() for f in cf.folds],
        "flagged_clusters": {p.label: sorted(int(i) for i in v) for p, v in flagged.items() if v},
    }
    if cf.info and any(cf.info):
        diag["stack_weights"] = cf.info
    if z_meta:
        diag["split_spread"] = z_meta
    meta = {"seed": int(cfg.seed), "K": int(cfg.K), "r": cfg.r if cfg.r == "exact" else int(cfg.r),
            "S": int(cfg.S), "m": int(m)}
    return EstimateReport(meta, results, diag)


def estimate(data: Dataset, estimands: Sequence[EstimandSpec], cfg: EstimatorConfig,
             fitter: Callable | None = None) -> EstimateReport:
    """Sample-splitting estimator for every requested estimand.

    ``fitter(train, seed, fold_id)`` returns a nuisance model; by default the
    configured learner library is fitted on each training complement.
    """
    cf = crossfit(data, cfg, fitter)
    return evaluate(data, estimands, cfg, cf)


def fixed_fitter(model):
    """Fitter that ignores the training data and always returns ``model``."""
    def fit(train, seed, fold_id=None):
        return model
    return fit


# --------------------------------------------------------------------------
# inverse-probability-weighted comparator

def ipw_summands(data: Dataset, policies, model, cfg: EstimatorConfig):
    """Per-cluster terms w(A)^T Y / H(A) for mu, mu1 and mu0."""
    pis, gtabs = nuisance_arrays(data, model, np.arange(data.m))
    vals = {(p, k): np.empty(data.m) for p in policies for k in ("mu", "mu1", "mu0")}
    for block in iter_blocks(data, pis, gtabs, replace(cfg, r="exact")):
        A = block.a_obs.astype(np.int8)
        HA = np.prod(np.where(A == 1, block.pi, 1.0 - block.pi), axis=1)
        for p in policies:
            TA = p.terms(A[:, None, :], block)
            vals[(p, "mu")][block.index] = _safe_ratio(TA.q[:, 0], HA) * block.y.mean(axis=1)
            for t, key in ((1, "mu1"), (0, "mu0")):
                num = np.where(A == t, TA.q_marg[:, 0, :], 0.0)
                vals[(p, key)][block.index] = (_safe_ratio(num, HA[:, None]) * block.y).mean(axis=1)
    return vals


def estimate_ipw(data: Dataset, estimands: Sequence[EstimandSpec], cfg: EstimatorConfig,
                 model=None, learner: LearnerSpec | None = None) -> EstimateReport:
    """Horvitz-Thompson style estimator with the propensity fitted on the full sample."""
    if data.m < 2:
        raise TooFewClusters("IPW needs at least 2 clusters")
    if model is None:
        spec = learner or LearnerSpec(ensemble=False)
        seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(10_000,)).generate_state(1)[0])
        prop = fit_propensity(data, spec, seed, cfg.clip_eps)
        model = NuisanceModel(prop, ConstantLearner(0.0), cfg.clip_eps, None, data.has_singletons(), True,
                              data.column_names)
    policies = list(dict.fromkeys(p for e in estimands for _, (p, _k) in e.components()))
    vals = ipw_summands(data, policies, model, cfg)
    results = []
    for e in estimands:
        vec = sum(sign * vals[key] for sign, key in e.components())
        point = float(vec.mean())
        se = float(np.sqrt(vec.var() / data.m))
        results.append(EstimateResult(e, point, se, wald_ci(point, se, cfg.alpha_level), vec, []))
    meta = {"seed": int(cfg.seed), "K": int(cfg.K), "r": cfg.r if cfg.r == "exact" else int(cfg.r),
            "S": int(cfg.S), "m": int(data.m)}
    return EstimateReport(meta, results, {"estimator": "ipw"})


def uncentered_eif(cluster, nuisance, spec: Policy, kind="mu", lattice="exact", seed=0,
                   column_names=()) -> float:
    """Influence value of one cluster for mu (kind='mu') or mu_t ('mu1' / 'mu0').

    ``lattice`` is ``'exact'`` or an integer r for the uniform subsample.
    """
    n = cluster.n
    pi, gtab = nuisance.block_arrays(cluster.x.reshape(1, n, -1))
    block = ClusterBlock(pi=pi, a_obs=np.asarray(cluster.a, float)[None], x=cluster.x[None],
                         column_names=tuple(column_names), y=cluster.y[None], gtab=gtab, index=np.zeros(1, int))
    if lattice == "exact":
        bits, w = enumerate_treatments(n)[None], 1.0
    else:
        r = int(lattice)
        bits, w = subsample_treatments(n, r, seed)
        bits = bits[None]
    out, _ = block_eifs(block, spec, bits, w)
    return float(out[kind][0])


def uncentered_eif_mu(cluster, nuisance, spec, lattice="exact", seed=0, column_names=()):
    return uncentered_eif(cluster, nuisance, spec, "mu", lattice, seed, column_names)


def uncentered_eif_mu_t(cluster, nuisance, spec, t, lattice="exact", seed=0, column_names=()):
    return uncentered_eif(cluster, nuisance, spec, "mu1" if t == 1 else "mu0", lattice, seed, column_names)
