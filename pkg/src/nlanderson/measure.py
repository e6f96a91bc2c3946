"""Monte-Carlo and closed-form measures of the small-divisor (resonant) sets.

For a monomial ``n`` the resonant set is

    R_s(n) = {V : |sum_j (n_j - n'_j) v_j| < eps_s^(1/100) / (max(Delta,1)^2 |n|^(Delta+2))}.

It depends on ``n`` only through the divisor vector ``k = n - n'``; each class
is represented by its minimal monomial ``n = (k^+, k^-)``, for which
``Delta(n) = Delta(k)`` and ``|n| = |k|``.  Only charge-neutral classes
(``sum_j k_j = 0``) occur in the lattice Hamiltonian and they are enumerated
by default.  All Monte-Carlo estimates share random numbers across
thresholds and across the monomials of a union.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .formal import Monomial
from .normal_form import NormalFormSchedule, build_schedule
from .potential import nonresonance_threshold

__all__ = [
    "divisor_vectors_near",
    "enumerate_constrained",
    "monomial_threshold",
    "resonant_probability_mc",
    "resonant_probability_exact",
    "UnionResult",
    "union_measure_bound",
    "union_bound_analytic",
    "NonresonantResult",
    "nonresonant_measure",
    "nonresonant_lower_bound",
    "DyadicResult",
    "dyadic_success",
    "dyadic_threshold_log_epsilon",
    "measure_chain_checks",
    "shift_sum_check",
]

_CHUNK = 4096


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**64))


def _vectors_ending_at(top: int, max_norm: int, max_diameter: int, charge_neutral: bool):
    """Integer vectors ``k`` with ``max{j : k_j != 0} = top`` and ``k_top > 0``."""
    out = []
    lo = top - max_diameter

    def rec(site, remaining, acc, total):
        if site < lo:
            if not charge_neutral or total == 0:
                out.append(dict(acc))
            return
        rec(site - 1, remaining, acc, total)
        for x in range(1, remaining + 1):
            for sx in (x, -x):
                acc[site] = sx
                rec(site - 1, remaining - x, acc, total + sx)
            del acc[site]

    for a in range(1, max_norm + 1):
        rec(top - 1, max_norm - a, {top: a}, a)
    return out


def divisor_vectors_near(sites, max_norm: int, max_diameter: int, window_radius: int,
                         charge_neutral: bool = True) -> list[dict[int, int]]:
    """Nonzero in-window vectors touching ``sites`` (one per sign class)."""
    sites = set(sites)
    seen, out = set(), []
    tops = {j + d for j in sites for d in range(0, max_diameter + 1)}
    for top in sorted(t for t in tops if abs(t) <= window_radius):
        for k in _vectors_ending_at(top, max_norm, max_diameter, charge_neutral):
            if min(k) < -window_radius or not (set(k) & sites):
                continue
            key = tuple(sorted(k.items()))
            if key not in seen:
                seen.add(key)
                out.append(k)
    return out


def _check_k(k: int, sched: NormalFormSchedule) -> None:
    if not abs(abs(k) - sched.j0) < math.log(sched.j0):
        raise ValueError(f"site {k} is not within ln(j0) of +-j0")


def enumerate_constrained(k: int, s: int, sched: NormalFormSchedule, kappa: float | None = None, *,
                          charge_neutral: bool = True, check_site: bool = True) -> list[Monomial]:
    """Minimal representatives of the non-resonant classes with ``j_+(n) = k``,
    ``Delta(n) <= 10 ln eps_s / ln eps`` and ``|n| <= 10/kappa`` (one per sign)."""
    if check_site:
        _check_k(k, sched)
    kappa = sched.kappa if kappa is None else kappa
    dcut = math.floor(10.0 * math.log(sched.eps(s)) / math.log(sched.epsilon) + 1e-12)
    ncut = math.floor(10.0 / kappa + 1e-12)
    if ncut < 2 and charge_neutral or ncut < 1:
        return []
    out = []
    for vec in _vectors_ending_at(k, ncut, dcut, charge_neutral):
        out.append(Monomial((j, max(x, 0), max(-x, 0)) for j, x in vec.items()))
    return out


def _as_divisor(n) -> dict[int, int]:
    if isinstance(n, Monomial):
        k = n.divisor_vector()
    else:
        k = {int(j): int(x) for j, x in dict(n).items() if x}
    if not k:
        raise ValueError("monomial is resonant (zero divisor vector)")
    return k


def monomial_threshold(n, gamma: float) -> float:
    """``gamma / (max(Delta(n),1)^2 |n|^(Delta(n)+2))``; for a divisor vector the minimal monomial is used."""
    if isinstance(n, Monomial):
        return nonresonance_threshold(gamma, n.diameter, n.degree)
    k = _as_divisor(n)
    return nonresonance_threshold(gamma, max(k) - min(k), sum(abs(x) for x in k.values()))


def resonant_probability_mc(n, gamma: float, samples: int, seed: int, *,
                            fixed: Mapping[int, float] | None = None) -> tuple[float, float]:
    """Fraction of uniform ``V`` with ``|sum k_j v_j| < threshold`` and its binomial standard error.

    ``fixed`` pins chosen sites to given values (the others stay uniform).
    """
    if samples < 1000:
        raise ValueError("samples must be >= 1000")
    k = _as_divisor(n)
    thr = monomial_threshold(n, gamma)
    fixed = dict(fixed or {})
    free = sorted(j for j in k if j not in fixed)
    const = math.fsum(k[j] * fixed[j] for j in k if j in fixed)
    coef = np.array([k[j] for j in free], dtype=float)
    rng = _rng(seed)
    hits = 0
    done = 0
    while done < samples:
        m = min(_CHUNK * 16, samples - done)
        V = rng.random((m, len(free)))
        hits += int(np.count_nonzero(np.abs(V @ coef + const) < thr))
        done += m
    p = hits / samples
    return p, math.sqrt(max(p * (1 - p), 0.0) / samples)


def resonant_probability_exact(n, gamma: float, fixed: Mapping[int, float]) -> float:
    """Closed form when exactly one active site is free: the length of
    ``{v in [0,1] : |c v + const| < eta}``."""
    k = _as_divisor(n)
    free = [j for j in k if j not in fixed]
    if len(free) != 1:
        raise ValueError("exactly one active site must be free")
    c = k[free[0]]
    const = math.fsum(k[j] * fixed[j] for j in k if j in fixed)
    eta = monomial_threshold(n, gamma)
    a, b = sorted(((-eta - const) / c, (eta - const) / c))
    return max(0.0, min(b, 1.0) - max(a, 0.0))


def union_bound_analytic(sched: NormalFormSchedule, s: int) -> float:
    """``eps^(1/200)`` for ``s = 1`` and ``eps_s^(1/125)`` for ``s >= 2``."""
    return sched.epsilon ** (1 / 200) if s == 1 else sched.eps(s) ** (1 / 125)


def _dense(monomials: list, sites: list[int]):
    pos = {j: i for i, j in enumerate(sites)}
    K = np.zeros((len(monomials), len(sites)))
    for r, n in enumerate(monomials):
        for j, x in _as_divisor(n).items():
            K[r, pos[j]] = x
    return K


def _mc_union(K: np.ndarray, thr: np.ndarray, samples: int, seed: int):
    """Union indicator counts and per-row hit counts with shared uniforms."""
    rng = _rng(seed)
    union = 0
    per = np.zeros(K.shape[0], dtype=np.int64)
    done = 0
    KT = K.T.copy()
    chunk = max(64, min(_CHUNK, int(2e7 // max(K.shape[0], 1))))
    while done < samples:
        m = min(chunk, samples - done)
        V = rng.random((m, K.shape[1]))
        hit = np.abs(V @ KT) < thr
        union += int(np.count_nonzero(hit.any(axis=1)))
        per += hit.sum(axis=0)
        done += m
    return union, per


@dataclass
class UnionResult:
    k: int
    s: int
    estimate: float
    stderr: float
    analytic_bound: float
    n_monomials: int
    per_monomial_sum: float
    per_monomial_sum_stderr: float

    @property
    def holds(self) -> bool:
        return self.estimate <= self.analytic_bound + 3 * self.stderr

    @property
    def subadditive(self) -> bool:
        return self.estimate <= self.per_monomial_sum + 3 * math.hypot(self.stderr, self.per_monomial_sum_stderr)


def union_measure_bound(k: int, s: int, sched: NormalFormSchedule, kappa: float | None = None,
                        samples: int = 100_000, seed: int = 0, *, gamma: float | None = None,
                        check_site: bool = True) -> UnionResult:
    """MC measure of ``union_n R_s(n)`` over :func:`enumerate_constrained` and the analytic bound."""
    mons = enumerate_constrained(k, s, sched, kappa, check_site=check_site)
    bound = union_bound_analytic(sched, s)
    if not mons:
        return UnionResult(k, s, 0.0, 0.0, bound, 0, 0.0, 0.0)
    gamma = sched.eps(s) ** 0.01 if gamma is None else gamma
    sites = sorted({j for n in mons for j in n.support})
    K = _dense(mons, sites)
    thr = np.array([monomial_threshold(n, gamma) for n in mons])
    union, per = _mc_union(K, thr, samples, seed)
    p = union / samples
    ps = per / samples
    return UnionResult(k, s, p, math.sqrt(p * (1 - p) / samples), bound, len(mons), float(ps.sum()),
                       float(math.sqrt(np.sum(ps * (1 - ps)) / samples)))


def nonresonant_lower_bound(j0: int, epsilon: float) -> float:
    """``j0^(-6 eps^(1/1000))``."""
    return float(j0) ** (-6.0 * epsilon ** 0.001)


@dataclass
class NonresonantResult:
    estimate: float
    stderr: float
    lower_bound: float
    n_classes: int
    M: int

    @property
    def holds(self) -> bool:
        return self.estimate >= self.lower_bound - 3 * self.stderr


def nonresonant_measure(j0: int, epsilon: float, tau: float, kappa: float, samples: int = 10_000,
                        seed: int = 0, *, schedule: NormalFormSchedule | None = None) -> NonresonantResult:
    """MC measure of the set of ``V`` avoiding every ``R_s(n)`` with ``j_+(n) = k``,
    ``||k| - j0| < ln j0`` and ``s <= M``.

    A class admitted at several ``s`` keeps its largest threshold, which is
    the one at the first admitting step.
    """
    sched = schedule or build_schedule(epsilon, tau, j0, kappa)
    lj = math.log(j0)
    ks = [k for k in range(-j0 - math.ceil(lj), j0 + math.ceil(lj) + 1) if abs(abs(k) - j0) < lj]
    best: dict[tuple, tuple[Monomial, float]] = {}
    for s in range(1, sched.M + 1):
        gamma = sched.eps(s) ** 0.01
        for k in ks:
            for n in enumerate_constrained(k, s, sched, kappa):
                key = tuple(n)
                thr = monomial_threshold(n, gamma)
                if key not in best or thr > best[key][1]:
                    best[key] = (n, thr)
    if not best:
        return NonresonantResult(1.0, 0.0, nonresonant_lower_bound(j0, epsilon), 0, sched.M)
    mons = [v[0] for v in best.values()]
    thr = np.array([v[1] for v in best.values()])
    sites = sorted({j for n in mons for j in n.support})
    union, _ = _mc_union(_dense(mons, sites), thr, samples, seed)
    p = 1.0 - union / samples
    return NonresonantResult(p, math.sqrt(p * (1 - p) / samples), nonresonant_lower_bound(j0, epsilon),
                             len(mons), sched.M)


@dataclass
class DyadicResult:
    jbar: float
    p_single: float
    trials: int
    probability: float
    target: float
    log_fail: float
    log_fail_target: float

    @property
    def holds(self) -> bool:
        # 1 - (1-p)^m > 1 - e^{-sqrt(jbar)}  <=>  m log(1-p) < -sqrt(jbar)
        return self.log_fail < self.log_fail_target


def dyadic_success(jbar: float, p_single: float | None = None, *, epsilon: float | None = None,
                   log_epsilon: float | None = None) -> DyadicResult:
    """``1 - (1 - p)^floor(jbar / (5 ln jbar))`` against ``1 - exp(-sqrt(jbar))``.

    Without ``p_single`` the per-window probability ``jbar^(-6 eps^(1/1000))``
    is used, with ``eps`` given directly or through ``log_epsilon = ln eps``
    (for ``eps`` below the float range).  The comparison is made on
    ``log(1 - probability)`` so it stays exact when both sides round to 1.
    """
    if jbar < 10:
        raise ValueError("jbar must be >= 10")
    if p_single is None:
        if log_epsilon is None:
            if epsilon is None:
                raise ValueError("give p_single, epsilon or log_epsilon")
            log_epsilon = math.log(epsilon)
        p_single = math.exp(-6.0 * math.exp(log_epsilon / 1000.0) * math.log(jbar))
    if not 0 <= p_single <= 1:
        raise ValueError("p_single must lie in [0, 1]")
    m = math.floor(jbar / (5.0 * math.log(jbar)))
    log_fail = -math.inf if p_single == 1 else m * math.log1p(-p_single)
    prob = -math.expm1(log_fail) if p_single < 1 else 1.0
    return DyadicResult(jbar, p_single, m, prob, -math.expm1(-math.sqrt(jbar)), log_fail, -math.sqrt(jbar))


def dyadic_threshold_log_epsilon(jbar: float, lo: float = -1e6, hi: float = -1e-9) -> float:
    """Largest ``ln eps`` (bisection) at which the dyadic inequality still holds."""
    if not dyadic_success(jbar, log_epsilon=lo).holds:
        return -math.inf
    if dyadic_success(jbar, log_epsilon=hi).holds:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dyadic_success(jbar, log_epsilon=mid).holds:
            lo = mid
        else:
            hi = mid
    return lo


def measure_chain_checks(epsilon: float, j0: float) -> dict:
    """Closed-form evaluation of the determinant and product bounds (all in log form).

    Literal forms: ``j0^-sqrt(eps) < (1-sqrt(eps))^ln j0 < (1+sqrt(eps))^ln j0 < j0^sqrt(eps)``
    and ``(1 - eps^(1/1000))^(5 ln j0) >= j0^(-5 eps^(1/1000))``.  Since
    ``log(1-x) < -x`` the first link and the product bound fail for every
    ``eps``; the corrected forms use ``log(1-x) >= -2x`` (``x <= 1/2``):
    ``(1-sqrt(eps))^ln j0 >= j0^(-2 sqrt(eps))`` and
    ``(1 - eps^(1/1000))^(5 ln j0) >= j0^(-10 eps^(1/1000))``.
    """
    r, lj = math.sqrt(epsilon), math.log(j0)
    e3 = epsilon ** 0.001
    low_outer = -r * lj
    low_inner = lj * math.log1p(-r)
    up_inner = lj * math.log1p(r)
    up_outer = r * lj
    prod = 5 * lj * math.log1p(-e3) if e3 < 1 else -math.inf
    return {
        "log_j0_pow_minus_sqrt_eps": low_outer,
        "log_lower_product": low_inner,
        "log_upper_product": up_inner,
        "log_j0_pow_sqrt_eps": up_outer,
        "lower_chain_holds": low_outer < low_inner,
        "upper_chain_holds": up_inner < up_outer,
        "middle_holds": low_inner < up_inner,
        "lower_chain_corrected_holds": low_inner >= -2 * r * lj,
        "log_product_bound": prod,
        "log_power_bound": -5 * e3 * lj,
        "product_bound_holds": prod >= -5 * e3 * lj,
        "product_bound_corrected_holds": prod >= -10 * e3 * lj,
    }


def shift_sum_check(sched: NormalFormSchedule) -> tuple[float, float]:
    """``(sum_{r<=M} eps_r, sqrt(eps))`` for the Jacobian-entry bound."""
    return math.fsum(sched.eps(r) for r in range(1, sched.M + 1)), math.sqrt(sched.epsilon)
