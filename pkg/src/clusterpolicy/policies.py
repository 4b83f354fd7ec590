"""Counterfactual treatment-allocation policies.

Every policy exposes one vectorised hook, :meth:`Policy.terms`, evaluated on a
block of ``c`` same-size clusters and a lattice of ``L`` treatment vectors
(``bits`` of shape ``(c or 1, L, n)``). It returns the policy mass Q(a), the
leave-one-out marginals Q(a_(-j)), and the first-order (influence) terms of
both. The scalar helpers at the bottom of the module are thin wrappers used by
the public API and by tests.

The influence term of a policy is split into a part that is a smooth function
of the lattice vector and an ``atom``: a coefficient multiplying the indicator
1(a = A) of the observed treatment vector. Only TPB has a non-zero atom. Keeping
it separate lets the estimator add that single lattice point exactly instead of
hoping a subsample hits it.
"""
from __future__ import annotations

import ast
import enum
import math
import operator
import re
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .data import enumerate_treatments, pack_treatments

TPB_FLOOR = 1e-6


class DomainError(ValueError):
    pass


class DegenerateDenominator(ArithmeticError):
    pass


class PolicyParseError(ValueError):
    pass


class WeightKind(enum.Enum):
    MU = "mu"
    MU1 = "mu1"
    MU0 = "mu0"

    @property
    def t(self):
        return {WeightKind.MU1: 1, WeightKind.MU0: 0}.get(self)


def shifted_propensity_cips(pi, delta_val):
    """Odds-shifted propensity delta*pi / (delta*pi + 1 - pi)."""
    pi = np.asarray(pi, dtype=float)
    delta_val = np.asarray(delta_val, dtype=float)
    if np.any((pi <= 0) | (pi >= 1)):
        raise DomainError("propensity must lie in (0, 1)")
    if np.any(delta_val <= 0):
        raise DomainError("delta must be positive")
    out = delta_val * pi / (delta_val * pi + 1.0 - pi)
    return float(out) if out.ndim == 0 else out


def shifted_propensity_cms(pi, lam, x_star):
    pi = np.asarray(pi, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    lam = float(lam)
    if np.any((pi <= 0) | (pi >= 1)):
        raise DomainError("propensity must lie in (0, 1)")
    if not 0.0 <= lam <= 1.0:
        raise DomainError("lambda must lie in [0, 1]")
    if np.any((x_star != 0) & (x_star != 1)):
        raise DomainError("targeting covariate must be binary")
    out = (1.0 - lam) * x_star + pi * (x_star * lam + 1.0 - x_star)
    return float(out) if out.ndim == 0 else out


@dataclass
class PolicyTerms:
    q: np.ndarray          # (c, L)
    phi: np.ndarray        # (c, L)   smooth part of the influence term of Q(a)
    q_marg: np.ndarray     # (c, L, n)
    phi_marg: np.ndarray   # (c, L, n)
    atom: np.ndarray       # (c,)
    flags: np.ndarray      # (c,) bool; TPB denominator floored


@dataclass
class PolicyInputs:
    """Minimal per-block inputs a policy needs."""

    pi: np.ndarray                 # (c, n) clipped propensities
    a_obs: np.ndarray              # (c, n) observed treatments
    x: np.ndarray | None = None    # (c, n, p)
    column_names: tuple = ()

    @property
    def n(self) -> int:
        return self.pi.shape[1]


def _dual_products(m0, m1=None):
    """Products of dual numbers (m0 + eps*m1) along the last axis.

    Returns the full product (value, eps-coefficient) and the leave-one-out
    products for every position. Uses prefix/suffix sweeps, so zero masses
    need no special casing. With ``m1=None`` only plain products are formed
    and the eps parts are returned as None.
    """
    n = m0.shape[-1]
    a0 = np.ascontiguousarray(np.moveaxis(m0, -1, 0))
    a1 = None if m1 is None else np.ascontiguousarray(np.moveaxis(m1, -1, 0))
    pre0 = np.empty((n + 1,) + a0.shape[1:])
    suf0 = np.empty_like(pre0)
    pre0[0] = 1.0
    suf0[n] = 1.0
    if a1 is not None:
        pre1 = np.empty_like(pre0)
        suf1 = np.empty_like(pre0)
        pre1[0] = 0.0
        suf1[n] = 0.0
    for k in range(n):
        if a1 is not None:
            np.multiply(pre1[k], a0[k], out=pre1[k + 1])
            pre1[k + 1] += pre0[k] * a1[k]
        np.multiply(pre0[k], a0[k], out=pre0[k + 1])
    for k in range(n - 1, -1, -1):
        if a1 is not None:
            np.multiply(suf1[k + 1], a0[k], out=suf1[k])
            suf1[k] += suf0[k + 1] * a1[k]
        np.multiply(suf0[k + 1], a0[k], out=suf0[k])
    loo0 = np.moveaxis(pre0[:n] * suf0[1:], 0, -1)
    if a1 is None:
        return pre0[n], None, loo0, None
    loo1 = np.moveaxis(pre0[:n] * suf1[1:] + pre1[:n] * suf0[1:], 0, -1)
    return pre0[n], pre1[n], loo0, loo1


def bernoulli_masses(p, bits):
    """p^a (1-p)^(1-a) broadcast over a lattice; p is (c, n), bits (c|1, L, n)."""
    p = p[:, None, :]
    return np.where(bits == 1, p, 1.0 - p)


def count_at_least(pi, k):
    """P(sum of independent Bernoulli(pi_j) >= k) for each row of ``pi``."""
    c, n = pi.shape
    if k <= 0:
        return np.ones(c)
    if k > n:
        return np.zeros(c)
    pmf = np.zeros((c, n + 1))
    pmf[:, 0] = 1.0
    for j in range(n):
        pj = pi[:, j:j + 1]
        pmf[:, 1:] = pmf[:, 1:] * (1 - pj) + pmf[:, :-1] * pj
        pmf[:, 0] *= 1 - pi[:, j]
    return pmf[:, k:].sum(axis=1)


class Policy:
    """Base class. Subclasses are frozen dataclasses."""

    family: ClassVar[str] = ""
    uses_nuisance: ClassVar[bool] = True

    def terms(self, bits, inputs: PolicyInputs) -> PolicyTerms:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def label(self) -> str:
        raise NotImplementedError

    @property
    def param(self):
        raise NotImplementedError

    def check(self, column_names=(), data=None) -> None:
        """Validate policy parameters against a dataset's columns."""

    def __str__(self):
        return self.label


class _ProductPolicy(Policy):
    """Policies whose Q factorises into independent per-unit Bernoulli masses."""

    def unit_shift(self, inputs: PolicyInputs):
        """Shifted propensity (c, n) and its first-order term given A (c, n)."""
        raise NotImplementedError

    def terms(self, bits, inputs):
        p, e = self.unit_shift(inputs)
        m0 = bernoulli_masses(p, bits)
        m1 = np.where(bits == 1, e[:, None, :], -e[:, None, :])
        q, phi, qm, phim = _dual_products(m0, m1)
        c = p.shape[0]
        return PolicyTerms(q, phi, qm, phim, np.zeros(c), np.zeros(c, dtype=bool))


@dataclass(frozen=True)
class TypeB(_ProductPolicy):
    alpha: float
    family: ClassVar[str] = "typeb"
    uses_nuisance: ClassVar[bool] = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")

    def unit_shift(self, inputs):
        p = np.full(inputs.pi.shape, float(self.alpha))
        return p, np.zeros_like(p)

    @property
    def label(self):
        return f"typeb:alpha={self.alpha:g}"

    @property
    def param(self):
        return float(self.alpha)


_ALLOWED_FUNCS = {"exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
                  "minimum": np.minimum, "maximum": np.maximum}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _eval_expr(node, env):
    if isinstance(node, ast.Expression):
        return _eval_expr(node.body, env)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise PolicyParseError(f"unknown name {node.id!r} in delta expression")
        return env[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_expr(node.left, env), _eval_expr(node.right, env))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_expr(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS:
        return _ALLOWED_FUNCS[node.func.id](*[_eval_expr(a, env) for a in node.args])
    raise PolicyParseError(f"unsupported construct in delta expression: {ast.dump(node)}")


@dataclass(frozen=True)
class CIPS(_ProductPolicy):
    """Odds shift by delta(X, N).

    ``mode`` is ``constant`` (delta0), ``varying`` (delta0 * (1 + 1/N)) or
    ``expr``; an expression may use ``n``, ``delta0`` and covariate column
    names, which are bound to the cluster mean of that covariate.
    """

    delta0: float
    mode: str = "constant"
    expr: str | None = None
    family: ClassVar[str] = "cips"

    def __post_init__(self):
        if self.mode not in ("constant", "varying", "expr"):
            raise DomainError(f"unknown CIPS mode {self.mode!r}")
        if self.mode == "expr":
            if not self.expr:
                raise DomainError("CIPS expr mode needs an expression")
            ast.parse(self.expr, mode="eval")
        elif self.delta0 <= 0:
            raise DomainError("delta0 must be positive")

    def delta(self, inputs: PolicyInputs) -> np.ndarray:
        c, n = inputs.pi.shape
        if self.mode == "constant":
            d = np.full(c, float(self.delta0))
        elif self.mode == "varying":
            d = np.full(c, self.delta0 * (1.0 + 1.0 / n))
        else:
            env = {"n": float(n), "delta0": float(self.delta0)}
            if inputs.x is not None:
                for k, name in enumerate(inputs.column_names):
                    if name.isidentifier():
                        env[name] = inputs.x[:, :, k].mean(axis=1)
            d = np.broadcast_to(np.asarray(_eval_expr(ast.parse(self.expr, mode="eval"), env), float), (c,)).copy()
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise DomainError("delta(X, N) must be positive and finite")
        return d

    def unit_shift(self, inputs):
        pi = inputs.pi
        d = self.delta(inputs)[:, None]
        denom = d * pi + 1.0 - pi
        p = d * pi / denom
        e = d * (inputs.a_obs - pi) / denom**2
        return p, e

    def check(self, column_names=(), data=None):
        if self.mode == "expr":
            names = {n.id for n in ast.walk(ast.parse(self.expr, mode="eval")) if isinstance(n, ast.Name)}
            unknown = names - {"n", "delta0"} - set(column_names) - set(_ALLOWED_FUNCS)
            if unknown:
                raise PolicyParseError(f"delta expression references unknown names {sorted(unknown)}")

    @property
    def label(self):
        if self.mode == "expr":
            return f"cips:delta0={self.delta0:g},mode=expr,expr={self.expr}"
        return f"cips:delta0={self.delta0:g},mode={self.mode}"

    @property
    def param(self):
        return float(self.delta0)


@dataclass(frozen=True)
class CMS(_ProductPolicy):
    """Raise propensity to 1 - lam + lam*pi for units with binary covariate X* = 1."""

    lam: float
    xstar: str | int
    family: ClassVar[str] = "cms"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError("lambda must lie in [0, 1]")

    def _column(self, column_names):
        if isinstance(self.xstar, (int, np.integer)):
            return int(self.xstar)
        try:
            return list(column_names).index(self.xstar)
        except ValueError:
            raise PolicyParseError(f"CMS targeting column {self.xstar!r} not in {list(column_names)}") from None

    def unit_shift(self, inputs):
        if inputs.x is None:
            raise DomainError("CMS needs covariates")
        xs = inputs.x[:, :, self._column(inputs.column_names)]
        if np.any((xs != 0) & (xs != 1)):
            raise DomainError("CMS targeting covariate must be binary")
        pi = inputs.pi
        scale = xs * self.lam + 1.0 - xs
        p = (1.0 - self.lam) * xs + pi * scale
        e = (inputs.a_obs - pi) * scale
        return p, e

    def check(self, column_names=(), data=None):
        k = self._column(column_names)
        if data is not None:
            vals = np.concatenate([c.x[:, k] for c in data.clusters])
            if np.any((vals != 0) & (vals != 1)):
                raise PolicyParseError(f"CMS targeting column {self.xstar!r} is not binary")

    @property
    def label(self):
        return f"cms:lambda={self.lam:g},xstar={self.xstar}"

    @property
    def param(self):
        return float(self.lam)


@dataclass(frozen=True)
class TPB(Policy):
    """Observed joint treatment law conditioned on a treated share of at least rho."""

    rho: float
    family: ClassVar[str] = "tpb"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [0, 1]")

    def threshold(self, n: int) -> int:
        return max(0, math.ceil(self.rho * n - 1e-9))

    def admissible_mass(self, pi):
        """P(treated share >= rho | X, N), floored; returns (mass, floored flag)."""
        k = self.threshold(pi.shape[1])
        mass = count_at_least(pi, k)
        flags = mass < TPB_FLOOR
        return np.maximum(mass, TPB_FLOOR), flags

    def terms(self, bits, inputs):
        pi = inputs.pi
        n = pi.shape[1]
        k = self.threshold(n)
        mass, flags = self.admissible_mass(pi)
        m0 = bernoulli_masses(pi, bits)
        h, _, h_loo, _ = _dual_products(m0)
        s = bits.sum(axis=-1, dtype=np.int64)
        s_others = s[..., None] - bits
        P = mass[:, None]
        q = np.where(s >= k, h, 0.0) / P
        pij = pi[:, None, :]
        q_marg = (np.where(s_others + 1 >= k, pij, 0.0) + np.where(s_others >= k, 1.0 - pij, 0.0)) * h_loo / P[..., None]
        obs_ok = (inputs.a_obs.sum(axis=1) >= k).astype(float)
        coef = obs_ok / mass
        phi = -coef[:, None] * q
        phi_marg = -coef[:, None, None] * q_marg
        return PolicyTerms(q, phi, q_marg, phi_marg, coef, flags)

    @property
    def label(self):
        return f"tpb:rho={self.rho:g}"

    @property
    def param(self):
        return float(self.rho)


POLICY_FAMILIES = {"typeb": TypeB, "cips": CIPS, "cms": CMS, "tpb": TPB}


_POLICY_KEYS = {
    "typeb": {"alpha"},
    "cips": {"delta0", "mode", "expr"},
    "cms": {"lambda", "lam", "xstar"},
    "tpb": {"rho"},
}


def parse_policy(text: str) -> Policy:
    """Parse the policy grammar, e.g. ``cips:delta0=2.0,mode=varying``."""
    text = text.strip()
    m = re.fullmatch(r"([A-Za-z]+)\s*:\s*(.*)", text)
    if not m:
        raise PolicyParseError(f"cannot parse policy {text!r}")
    family = m.group(1).lower()
    raw = m.group(2)
    kv = {}
    if family == "cips" and "expr=" in raw:
        head, expr = raw.split("expr=", 1)
        kv["expr"] = expr.strip()
        raw = head.rstrip(", ")
    for part in filter(None, (p.strip() for p in raw.split(","))):
        if "=" not in part:
            raise PolicyParseError(f"expected key=value in {text!r}, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        kv[k.lower()] = v
    allowed = _POLICY_KEYS.get(family)
    if allowed is not None and set(kv) - allowed:
        raise PolicyParseError(f"unknown parameter(s) {sorted(set(kv) - allowed)} for {family} in {text!r}")
    try:
        if family == "typeb":
            return TypeB(float(kv["alpha"]))
        if family == "cips":
            mode = kv.get("mode", "expr" if "expr" in kv else "constant")
            return CIPS(float(kv.get("delta0", "1")), mode, kv.get("expr"))
        if family == "cms":
            xs = kv["xstar"]
            return CMS(float(kv.get("lambda", kv.get("lam"))), int(xs) if xs.isdigit() else xs)
        if family == "tpb":
            return TPB(float(kv["rho"]))
    except KeyError as exc:
        raise PolicyParseError(f"policy {text!r} is missing parameter {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (DomainError, PolicyParseError)):
            raise
        raise PolicyParseError(f"bad parameter in policy {text!r}: {exc}") from None
    raise PolicyParseError(f"unknown policy family {family!r}")


def with_param(policy: Policy, value: float) -> Policy:
    """Copy of ``policy`` with its grid parameter replaced."""
    if isinstance(policy, TypeB):
        return TypeB(value)
    if isinstance(policy, CIPS):
        return CIPS(value, policy.mode, policy.expr)
    if isinstance(policy, CMS):
        return CMS(value, policy.xstar)
    if isinstance(policy, TPB):
        return TPB(value)
    raise TypeError(type(policy))


# scalar helpers (one cluster) ----------------------------------------------

def _as_inputs(x, n, nuisance, a_obs=None, column_names=()):
    x = None if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    if nuisance is None:
        pi = np.full(n, 0.5)
    elif isinstance(nuisance, (np.ndarray, list, tuple)):
        pi = np.asarray(nuisance, dtype=float).reshape(n)
    else:
        pi = nuisance.propensity_x(x, n)
        column_names = column_names or getattr(nuisance, "column_names", ())
    a_obs = np.zeros(n) if a_obs is None else np.asarray(a_obs, dtype=float).reshape(n)
    return PolicyInputs(pi[None, :], a_obs[None, :], None if x is None else x[None], tuple(column_names))


def _bits(a, n):
    return np.asarray(a, dtype=np.int8).reshape(1, 1, n)


def policy_prob(spec: Policy, a, x, n, nuisance=None, column_names=()) -> float:
    """Q(a | x, n). ``nuisance`` is a fitted model or an array of propensities."""
    t = spec.terms(_bits(a, n), _as_inputs(x, n, nuisance, column_names=column_names))
    if t.flags[0]:
        raise DegenerateDenominator("admissible-set probability below tolerance")
    return float(t.q[0, 0])


def policy_prob_marginal(spec: Policy, a_minus_j, j, x, n, nuisance=None, column_names=()) -> float:
    """Q(a_(-j) | x, n) for the length n-1 vector of the other units."""
    a_minus_j = list(np.asarray(a_minus_j, dtype=int).reshape(-1))
    a = np.array(a_minus_j[:j] + [0] + a_minus_j[j:])
    t = spec.terms(_bits(a, n), _as_inputs(x, n, nuisance, column_names=column_names))
    return float(t.q_marg[0, 0, j])


def phi_Q(spec: Policy, a_obs, a, x, n, nuisance=None, column_names=()) -> float:
    """Influence term of Q(a | x, n) at observed treatment vector ``a_obs``."""
    t = spec.terms(_bits(a, n), _as_inputs(x, n, nuisance, a_obs, column_names))
    same = np.array_equal(np.asarray(a_obs).reshape(-1).astype(int), np.asarray(a).reshape(-1).astype(int))
    return float(t.phi[0, 0] + (t.atom[0] if same else 0.0))


def weight(spec: Policy, kind: WeightKind, a, x, n, nuisance=None, column_names=()) -> np.ndarray:
    """Identification weight vector for mu (constant Q/n) or mu_t."""
    a = np.asarray(a, dtype=int).reshape(n)
    t = spec.terms(_bits(a, n), _as_inputs(x, n, nuisance, column_names=column_names))
    if kind is WeightKind.MU:
        return np.full(n, t.q[0, 0] / n)
    return np.where(a == kind.t, t.q_marg[0, 0], 0.0) / n


def phi_weight(spec: Policy, kind: WeightKind, a_obs, a, x, n, nuisance=None, column_names=()) -> np.ndarray:
    """Influence term of the weight vector at observed ``a_obs``."""
    a = np.asarray(a, dtype=int).reshape(n)
    a_obs = np.asarray(a_obs, dtype=int).reshape(n)
    t = spec.terms(_bits(a, n), _as_inputs(x, n, nuisance, a_obs, column_names))
    if kind is WeightKind.MU:
        same = np.array_equal(a, a_obs)
        return np.full(n, (t.phi[0, 0] + (t.atom[0] if same else 0.0)) / n)
    # exactly one completion of a_(-j) equals a_obs when the others agree
    others_agree = np.array([np.array_equal(np.delete(a, j), np.delete(a_obs, j)) for j in range(n)])
    vals = t.phi_marg[0, 0] + np.where(others_agree, t.atom[0], 0.0)
    return np.where(a == kind.t, vals, 0.0) / n


def lattice_total(spec: Policy, n: int, x=None, nuisance=None, column_names=()) -> float:
    """Sum of Q over the full lattice; 1 up to rounding for a valid policy."""
    bits = enumerate_treatments(n)[None]
    t = spec.terms(bits, _as_inputs(x, n, nuisance, column_names=column_names))
    return float(t.q.sum())


__all__ = [
    "CIPS", "CMS", "TPB", "TypeB", "Policy", "PolicyInputs", "PolicyTerms", "WeightKind",
    "DomainError", "DegenerateDenominator", "PolicyParseError", "parse_policy", "with_param",
    "shifted_propensity_cips", "shifted_propensity_cms", "policy_prob", "policy_prob_marginal",
    "phi_Q", "weight", "phi_weight", "count_at_least", "pack_treatments",
]
