"""Simulated clustered data, ground-truth policy effects and the replication benchmark."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ClusterObservation, Dataset
from .estimator import (
    EstimandSpec,
    EstimatorConfig,
    crossfit,
    default_fitter,
    estimate_ipw,
    evaluate,
    fixed_fitter,
)
from .nuisance.model import LearnerSpec
from .policies import TPB, PolicyInputs, _ProductPolicy

log = logging.getLogger(__name__)

COLUMNS = ("x1", "x2", "c")
SIZE_DISTS = ("uniform:5-20", "point:3", "point:5", "uniform:3-5", "uniform:5-10")
ESTIMATORS = ("nss", "pss", "ipw", "oracle")
METRICS = ("truth", "bias", "rmse", "ase", "ese", "cov", "rmse_ratio")


def parse_size_dist(text: str):
    """Support of a uniform cluster-size law: ``uniform:a-b`` or ``point:k``."""
    kind, _, arg = text.partition(":")
    try:
        if kind == "uniform":
            lo, hi = (int(v) for v in arg.split("-"))
        elif kind == "point":
            lo = hi = int(arg)
        else:
            raise ValueError
    except ValueError:
        raise ValueError(f"bad size distribution {text!r}; use uniform:a-b or point:k") from None
    if not 1 <= lo <= hi:
        raise ValueError(f"bad size range in {text!r}")
    return np.arange(lo, hi + 1)


@dataclass(frozen=True)
class DgpConfig:
    m: int = 500
    size_dist: str = "uniform:5-20"
    seed: int = 0
    n_max: int = 20

    def __post_init__(self):
        support = parse_size_dist(self.size_dist)
        if support.max() > self.n_max:
            raise ValueError(f"size support exceeds n_max={self.n_max}")
        if self.m < 1:
            raise ValueError("m must be positive")


def true_propensity(x):
    """Treatment probability of each unit; ``x`` has columns x1, x2, c."""
    x1, x2, c = np.abs(x[..., 0]), x[..., 1], x[..., 2]
    return expit(0.1 + 0.2 * x1 + 0.2 * x1 * x2 + 0.1 * (c > 0))


def true_outcome(a, abar_others, x):
    x1, x2, c = np.abs(x[..., 0]), x[..., 1], x[..., 2]
    return expit(3 - 2 * a - abar_others - 1.5 * x1 + 2 * x2 - 3 * x1 * x2 - 2 * (c > 0))


def _draw_covariates(rng, sizes):
    total = int(sizes.sum())
    c = rng.standard_normal(sizes.size)
    x1 = rng.standard_normal(total)
    x2 = rng.binomial(1, 0.5, total).astype(float)
    return np.column_stack([x1, x2, np.repeat(c, sizes)])


def generate_dgp(cfg: DgpConfig) -> Dataset:
    """Draw ``cfg.m`` clusters; treatments are drawn first, then outcomes."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    sizes = rng.choice(parse_size_dist(cfg.size_dist), size=cfg.m)
    x = _draw_covariates(rng, sizes)
    a = rng.binomial(1, true_propensity(x)).astype(np.int8)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    tot = np.add.reduceat(a.astype(float), starts)
    n_unit = np.repeat(sizes, sizes)
    others = np.repeat(tot, sizes) - a
    abar = np.where(n_unit > 1, others / np.maximum(n_unit - 1, 1), 0.0)
    y = rng.binomial(1, true_outcome(a, abar, x)).astype(float)
    clusters = []
    for i, (s, n) in enumerate(zip(starts, sizes)):
        sl = slice(s, s + n)
        clusters.append(ClusterObservation(y[sl], a[sl], x[sl], cluster_id=i))
    return Dataset(tuple(clusters), COLUMNS, cfg.n_max)


@dataclass(frozen=True, eq=False)
class OracleNuisance:
    """The data-generating propensity and outcome regression, for oracle runs."""

    clip_eps: float = 0.01
    info: dict = field(default_factory=dict)

    def propensity_x(self, x, n=None):
        return np.clip(true_propensity(np.asarray(x, float)), self.clip_eps, 1 - self.clip_eps)

    def block_arrays(self, x_block):
        c, n, _ = x_block.shape
        pi = self.propensity_x(x_block)
        abar = np.arange(n) / (n - 1) if n > 1 else np.zeros(1)
        xb = x_block[:, :, None, None, :]
        gtab = true_outcome(np.arange(2)[None, None, :, None], abar[None, None, None, :], xb)
        return pi, np.broadcast_to(gtab, (c, n, 2, n)).copy()


# --------------------------------------------------------------------------
# ground truth

def _loo_count_pmf(p):
    """pmf[c, j, s]: probability that s units other than j are treated."""
    c, n = p.shape
    out = np.empty((c, n, n))
    for j in range(n):
        pmf = np.zeros((c, n))
        pmf[:, 0] = 1.0
        for l in range(n):
            if l == j:
                continue
            pl = p[:, l:l + 1]
            pmf[:, 1:] = pmf[:, 1:] * (1 - pl) + pmf[:, :-1] * pl
            pmf[:, 0] *= 1 - p[:, l]
        out[:, j] = pmf
    return out


def cluster_truth(policy, x_block, column_names=COLUMNS):
    """Exact per-cluster mu, mu1, mu0 under the data-generating law.

    Sums over the count of other treated units with a leave-one-out
    Poisson-binomial law, which is equivalent to enumerating all 2**n vectors.
    """
    c, n, _ = x_block.shape
    pi, gtab = OracleNuisance(clip_eps=0.0).block_arrays(x_block)
    own = np.stack([1 - pi, pi], axis=-1)  # (c, n, 2) under the observed law
    if isinstance(policy, TPB):
        k = policy.threshold(n)
        mass, _ = policy.admissible_mass(pi)
        loo = _loo_count_pmf(pi)
        s = np.arange(n)
        ok = (s[None, :] + np.arange(2)[:, None]) >= k  # (2, n): own t, others s
        joint = own[..., None] * loo[:, :, None, :] * ok[None, None] / mass[:, None, None, None]
        marg_others = joint.sum(axis=2)
    elif isinstance(policy, _ProductPolicy):
        inputs = PolicyInputs(pi, np.zeros_like(pi), x_block, tuple(column_names))
        p, _ = policy.unit_shift(inputs)
        loo = _loo_count_pmf(p)
        joint = np.stack([1 - p, p], axis=-1)[..., None] * loo[:, :, None, :]
        marg_others = loo
    else:
        raise TypeError(f"no truth routine for {type(policy).__name__}")
    mu = (joint * gtab).sum(axis=(2, 3)).mean(axis=1)
    mu1 = (marg_others * gtab[:, :, 1, :]).sum(axis=2).mean(axis=1)
    mu0 = (marg_others * gtab[:, :, 0, :]).sum(axis=2).mean(axis=1)
    return {"mu": mu, "mu1": mu1, "mu0": mu0}


def _truth_key(spec: EstimandSpec, dgp: DgpConfig, mc_clusters, seed):
    blob = json.dumps([spec.label, dgp.size_dist, dgp.n_max, int(mc_clusters), int(seed)])
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def default_cache_dir():
    return Path(os.environ.get("CLUSTERPOLICY_CACHE", Path.home() / ".cache" / "clusterpolicy"))


def true_values(estimands, dgp: DgpConfig, mc_clusters: int = 200_000, seed: int = 0, cache_dir=None,
                chunk: int = 20_000):
    """Monte Carlo truth and its standard error for each estimand.

    Clusters are drawn from the data-generating law and the policy sum is
    evaluated exactly within each cluster, so the only error is Monte Carlo
    error over (X, N). Results are cached as JSON under ``cache_dir``
    (``False`` disables caching).
    """
    estimands = list(estimands)
    cache = None if cache_dir is False else Path(cache_dir or default_cache_dir())
    out, todo = {}, []
    for e in estimands:
        path = cache / f"truth-{_truth_key(e, dgp, mc_clusters, seed)}.json" if cache else None
        if path is not None and path.exists():
            doc = json.loads(path.read_text())
            out[e] = (doc["truth"], doc["mc_se"])
        else:
            todo.append((e, path))
    if todo:
        policies = list(dict.fromkeys(p for e, _ in todo for _, (p, _k) in e.components()))
        vals = {(p, k): [] for p in policies for k in ("mu", "mu1", "mu0")}
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(7,))))
        support = parse_size_dist(dgp.size_dist)
        done = 0
        while done < mc_clusters:
            size = min(chunk, mc_clusters - done)
            sizes = rng.choice(support, size=size)
            x = _draw_covariates(rng, sizes)
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            for n in np.unique(sizes):
                idx = np.flatnonzero(sizes == n)
                rows = starts[idx][:, None] + np.arange(n)[None, :]
                xb = x[rows]
                for p in policies:
                    for k, v in cluster_truth(p, xb).items():
                        vals[(p, k)].append(v)
            done += size
        vals = {key: np.concatenate(v) for key, v in vals.items()}
        for e, path in todo:
            vec = sum(sign * vals[key] for sign, key in e.components())
            truth, mc_se = float(vec.mean()), float(vec.std(ddof=1) / np.sqrt(vec.size))
            out[e] = (truth, mc_se)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps({"estimand": e.label, "truth": truth, "mc_se": mc_se}))
    return {e: out[e] for e in estimands}


def true_value(estimand: EstimandSpec, dgp: DgpConfig, mc_clusters: int = 200_000, seed: int = 0,
               cache_dir=None):
    return true_values([estimand], dgp, mc_clusters, seed, cache_dir)[estimand]


# --------------------------------------------------------------------------
# benchmark

def parse_estimator(name: str):
    """``nss``, ``pss``, ``ipw`` or ``oracle``, optionally with ``:r=<int>``."""
    base, _, opt = name.partition(":")
    if base not in ESTIMATORS:
        raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    r = None
    if opt:
        key, _, val = opt.partition("=")
        if key != "r" or not val.isdigit():
            raise ValueError(f"bad estimator option in {name!r}")
        r = int(val)
    return base, r


def replication_seeds(dgp_seed, est_seed, d):
    data_seed = int(np.random.SeedSequence(dgp_seed, spawn_key=(d,)).generate_state(1)[0])
    fit_seed = int(np.random.SeedSequence(est_seed, spawn_key=(d,)).generate_state(1)[0])
    return data_seed, fit_seed


def run_replication(d, dgp: DgpConfig, estimands, estimators, cfg: EstimatorConfig):
    """One simulated dataset, every estimator once. Returns {estimator: [(point, se, lo, hi)]}."""
    data_seed, fit_seed = replication_seeds(dgp.seed, cfg.seed, d)
    data = generate_dgp(replace(dgp, seed=data_seed))
    rcfg = replace(cfg, seed=fit_seed)
    out = {}
    fits = {}
    for name in estimators:
        base, r = parse_estimator(name)
        ecfg = rcfg if r is None else replace(rcfg, r=r)
        if base == "ipw":
            rep = estimate_ipw(data, estimands, ecfg)
        else:
            if base not in fits:
                if base == "oracle":
                    fitter = fixed_fitter(OracleNuisance(cfg.clip_eps))
                elif base == "pss":
                    fitter = default_fitter(rcfg, LearnerSpec(ensemble=False))
                else:
                    fitter = default_fitter(rcfg)
                fits[base] = crossfit(data, rcfg, fitter)
            rep = evaluate(data, estimands, ecfg, fits[base])
        out[name] = [(r_.point, r_.se, r_.ci[0], r_.ci[1]) for r_ in rep.results]
    return out


def _safe_replication(args):
    d = args[0]
    try:
        return d, run_replication(*args), None
    except Exception as exc:  # recorded and excluded
        return d, None, f"{type(exc).__name__}: {exc}"


@dataclass
class BenchmarkResult:
    """Per (estimand, estimator) metrics plus raw per-replication estimates."""

    rows: list
    records: dict
    truths: dict
    failed: list = field(default_factory=list)

    def row(self, estimand_label, estimator):
        for r in self.rows:
            if r["estimand"] == estimand_label and r["estimator"] == estimator:
                return r
        raise KeyError((estimand_label, estimator))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimand", "estimator", *METRICS])
            for r in self.rows:
                w.writerow([r["estimand"], r["estimator"], *(f"{r[k]:.6f}" for k in METRICS)])


def summarize(points, ses, los, his, truth):
    points = np.asarray(points, float)
    err = points - truth
    return {
        "truth": float(truth),
        "bias": float(err.mean()),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "ase": float(np.mean(ses)),
        "ese": float(points.std(ddof=1)) if points.size > 1 else float("nan"),
        "cov": float(np.mean((np.asarray(los) <= truth) & (truth <= np.asarray(his)))),
    }


def run_benchmark(D: int, dgp: DgpConfig, estimands, estimators=("nss", "pss", "ipw"),
                  cfg: EstimatorConfig | None = None, truths=None, threads: int = 1,
                  mc_clusters: int = 200_000, truth_seed: int = 0, cache_dir=None) -> BenchmarkResult:
    if D < 2:
        raise ValueError("D must be >= 2")
    cfg = cfg or EstimatorConfig()
    estimands = list(estimands)
    estimators = list(estimators)
    for name in estimators:
        parse_estimator(name)
    if truths is None:
        truths = {e: t for e, (t, _) in true_values(estimands, dgp, mc_clusters, truth_seed, cache_dir).items()}
    jobs = [(d, dgp, estimands, estimators, cfg) for d in range(D)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_replication, jobs))
    else:
        results = [_safe_replication(j) for j in jobs]
    failed = [(d, msg) for d, res, msg in results if res is None]
    if failed:
        warnings.warn(f"{len(failed)} of {D} replications failed and were excluded", RuntimeWarning, stacklevel=2)
    ok = [res for _, res, _ in sorted(results, key=lambda t: t[0]) if res is not None]
    if len(ok) < 2:
        raise RuntimeError(f"only {len(ok)} replications succeeded: {failed[:3]}")
    records = {}
    rows = []
    for i, e in enumerate(estimands):
        for name in estimators:
            arr = np.array([res[name][i] for res in ok])
            records[(e.label, name)] = arr
            row = {"estimand": e.label, "estimator": name}
            row.update(summarize(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], truths[e]))
            rows.append(row)
    for row in rows:
        ref = [r for r in rows if r["estimand"] == row["estimand"] and r["estimator"] == "pss"]
        row["rmse_ratio"] = row["rmse"] / ref[0]["rmse"] if ref and ref[0]["rmse"] > 0 else float("nan")
    return BenchmarkResult(rows, records, {e.label: truths[e] for e in estimands}, failed)


# estimands of the two simulation tables
def table_estimands(family: str):
    from .policies import CIPS

    if family == "cips":
        pols = [CIPS(0.5), CIPS(1.0), CIPS(2.0)]
    elif family == "tpb":
        pols = [TPB(0.3), TPB(0.45), TPB(0.6)]
    else:
        raise ValueError(family)
    lo, mid, hi = pols
    out = []
    for p in pols:
        out += [EstimandSpec("mu", p), EstimandSpec("mu1", p), EstimandSpec("mu0", p), EstimandSpec("de", p)]
    for q in (lo, hi):
        out += [EstimandSpec(k, q, mid) for k in ("se1", "se0", "oe", "te")]
    return out
