"""Independent reference implementations used as test oracles.

Nothing here calls into the package's policy or estimator internals: policy
masses are written out directly, influence terms come from complex-step
derivatives with respect to the nuisance, and lattice sums are plain loops.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from clusterpolicy.data import enumerate_treatments
from clusterpolicy.policies import CIPS, CMS, TPB, PolicyInputs, TypeB

STEP = 1e-30


def lattice(n):
    return [np.array(a) for a in itertools.product((0, 1), repeat=n)]


def unit_prob(policy, pi, x=None, column_names=()):
    """Per-unit counterfactual treatment probability for product-form policies (complex-safe)."""
    if isinstance(policy, TypeB):
        return np.full(pi.shape, policy.alpha, dtype=pi.dtype)
    if isinstance(policy, CIPS):
        n = pi.shape[0]
        if policy.mode == "constant":
            d = policy.delta0
        elif policy.mode == "varying":
            d = policy.delta0 * (1 + 1 / n)
        else:
            raise NotImplementedError
        return d * pi / (d * pi + 1 - pi)
    if isinstance(policy, CMS):
        k = policy.xstar if isinstance(policy.xstar, int) else list(column_names).index(policy.xstar)
        xs = x[:, k]
        return (1 - policy.lam) * xs + pi * (xs * policy.lam + 1 - xs)
    raise TypeError(policy)


def q_product(policy, a, pi, x=None, column_names=()):
    p = unit_prob(policy, pi, x, column_names)
    return np.prod(np.where(a == 1, p, 1 - p))


def q_tpb(rho, a, hvec, vectors):
    """TPB mass as an explicit function of the joint law ``hvec`` over ``vectors``."""
    n = len(a)
    k = max(0, math.ceil(rho * n - 1e-9))
    den = sum(h for h, v in zip(hvec, vectors) if v.sum() >= k)
    num = hvec[_index(a, vectors)] if a.sum() >= k else 0.0
    return num / den


def _index(a, vectors):
    for i, v in enumerate(vectors):
        if np.array_equal(v, a):
            return i
    raise KeyError(a)


def joint_law(pi, vectors):
    return np.array([np.prod(np.where(v == 1, pi, 1 - pi)) for v in vectors])


def naive_q(policy, a, pi, x=None, column_names=()):
    if isinstance(policy, TPB):
        vectors = lattice(len(pi))
        return float(q_tpb(policy.rho, a, joint_law(pi, vectors), vectors))
    return float(q_product(policy, a, pi, x, column_names))


def naive_phi(policy, a_obs, a, pi, x=None, column_names=()):
    """Influence term of Q(a) at observed a_obs via complex-step derivatives."""
    n = len(pi)
    if isinstance(policy, TPB):
        vectors = lattice(n)
        h = joint_law(pi, vectors).astype(complex)
        total = 0.0
        for i, v in enumerate(vectors):
            hp = h.copy()
            hp[i] += 1j * STEP
            dq = q_tpb(policy.rho, a, hp, vectors).imag / STEP
            total += dq * (float(np.array_equal(a_obs, v)) - h[i].real)
        return total
    total = 0.0
    for l in range(n):
        pp = pi.astype(complex)
        pp[l] += 1j * STEP
        dq = q_product(policy, a, pp, x, column_names).imag / STEP
        total += dq * (a_obs[l] - pi[l])
    return total


def naive_eifs(policy, y, a_obs, pi, gtab, x=None, column_names=()):
    """Uncentered influence values (mu, mu1, mu0) by brute-force double loops.

    ``gtab[j, t, s]`` is the outcome regression of unit j with own treatment t
    and s other units treated.
    """
    n = len(pi)
    vecs = lattice(n)

    def G(a, j):
        return gtab[j, a[j], int(a.sum() - a[j])]

    def q(a):
        return naive_q(policy, a, pi, x, column_names)

    def phi(a):
        return naive_phi(policy, a_obs, a, pi, x, column_names)

    h_obs = np.prod(np.where(a_obs == 1, pi, 1 - pi))
    mu = 0.0
    for a in vecs:
        mu += (q(a) + phi(a)) * np.mean([G(a, j) for j in range(n)])
    mu += q(a_obs) / h_obs * (np.mean(y) - np.mean([G(a_obs, j) for j in range(n)]))

    out = {"mu": mu}
    for t, key in ((1, "mu1"), (0, "mu0")):
        acc = 0.0
        for j in range(n):
            for a in vecs:
                if a[j] != t:
                    continue
                a1, a0 = a.copy(), a.copy()
                a1[j], a0[j] = 1, 0
                q_marg = q(a1) + q(a0)
                phi_marg = phi(a1) + phi(a0)
                acc += (q_marg + phi_marg) * G(a, j)
            if a_obs[j] == t:
                b1, b0 = a_obs.copy(), a_obs.copy()
                b1[j], b0[j] = 1, 0
                acc += (q(b1) + q(b0)) / h_obs * (y[j] - G(a_obs, j))
        out[key] = acc / n
    return out


class TableNuisance:
    """Nuisance that returns fixed propensities and outcome tables for one cluster size."""

    def __init__(self, pi, gtab, clip_eps=0.0):
        self.pi = np.asarray(pi, float)
        self.gtab = np.asarray(gtab, float)
        self.clip_eps = clip_eps
        self.info = {}

    def propensity_x(self, x, n=None):
        return self.pi.copy()

    def block_arrays(self, x_block):
        c = x_block.shape[0]
        return np.broadcast_to(self.pi, (c,) + self.pi.shape).copy(), \
            np.broadcast_to(self.gtab, (c,) + self.gtab.shape).copy()


def random_policy(rng, n_cov_binary_col="xs"):
    kind = rng.integers(0, 4)
    if kind == 0:
        return TypeB(float(rng.uniform(0.05, 0.95)))
    if kind == 1:
        return CIPS(float(np.exp(rng.uniform(-1.5, 1.5))), "varying" if rng.random() < 0.3 else "constant")
    if kind == 2:
        return CMS(float(rng.uniform(0, 1)), n_cov_binary_col)
    return TPB(float(rng.choice([0.0, 0.2, 0.34, 0.5, 0.75, 1.0])))


def phi_matrix(policy, pi, x=None, column_names=()):
    """M[i, k] = phi_Q(A = v_i; a = v_k) for all lattice vectors, via the package hook."""
    n = pi.size
    bits = enumerate_treatments(n)
    L = bits.shape[0]
    xs = None if x is None else np.broadcast_to(x, (L,) + x.shape)
    inputs = PolicyInputs(np.broadcast_to(pi, (L, n)).copy(), bits.astype(float), xs, tuple(column_names))
    t = policy.terms(bits[None], inputs)
    return t.phi + np.diag(t.atom), t.q[0]


def remainder(policy, pi, eps, direction, x=None, names=()):
    """max_a |Q_hat(a) - Q(a) + sum_a' phi_hat(a'; a) H(a')| with pi_hat = pi + eps*direction."""
    bits = enumerate_treatments(pi.size)
    h = np.prod(np.where(bits == 1, pi, 1 - pi), axis=1)
    pi_hat = pi + eps * direction
    M_hat, q_hat = phi_matrix(policy, pi_hat, x, names)
    _, q = phi_matrix(policy, pi, x, names)
    return np.max(np.abs(q_hat - q + h @ M_hat))


def remainder_slope(policy, seed=7, n=4):
    """Log-log slope of the remainder against the nuisance perturbation size."""
    rng = np.random.default_rng(seed)
    pi = rng.uniform(0.2, 0.8, n)
    d = rng.choice([-1.0, 1.0], n)
    eps = np.array([1e-2, 5e-3, 2.5e-3])
    res = np.array([remainder(policy, pi, e, d) for e in eps])
    return np.polyfit(np.log(eps), np.log(res), 1)[0]
