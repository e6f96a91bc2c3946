"""Iterative Birkhoff normal form on a finite window.

Step ``s`` takes ``H_s = D_s + Z_s + R_s`` (diagonal quadratic / resonant
``|n| >= 4`` / non-resonant), selects the removable part ``R~_s`` of ``R_s``,
solves ``L_V F_s = R~_s`` and sets ``H_{s+1} = H_s o X_{F_s}``.

Conventions.  With the bracket of :mod:`nlanderson.formal` and
``D = 1/2 sum v_j |q_j|^2`` one has ``{D, F}(n) = -(i/2) d(n) F(n)``, where
``d(n) = sum_j (n_j - n'_j) v_j``.  We define ``L_V F := -{D, F}`` so that the
homological equation is solved by ``F(n) = R~(n) / ((i/2) d(n))``.  Because
``{D, F} = -R~`` exactly, the transformed Hamiltonian is assembled as

    H_{s+1} = D + (Z + R - R~) o X_F + sum_{k>=1} k/(k+1)! ad_F^k R~,

with ``ad_F G = {G, F}``, which removes ``R~`` without a numerical residual.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .formal import (
    PRUNE_FLOOR, FormalHamiltonian, Monomial, PruneStats, TameWindow, dump_hamiltonian,
    hamiltonian_flow, initial_hamiltonian, physical_flow, poisson_bracket, triple_norm,
    triple_norm_sup,
)
from .potential import nonresonance_threshold, vector_diameter, vector_norm

__all__ = [
    "ScheduleError",
    "ResonanceError",
    "LieSeriesDivergence",
    "BoundViolation",
    "ScheduleStep",
    "NormalFormSchedule",
    "build_schedule",
    "delta_factor",
    "epsilon_threshold",
    "epsilon_threshold_table",
    "window_sites",
    "select_removable",
    "diagonal_frequencies",
    "solve_homological",
    "homological_residual",
    "LieResult",
    "lie_series",
    "lie_transform",
    "split_hamiltonian",
    "NormalFormState",
    "initial_state",
    "normal_form_step",
    "run_normal_form",
    "apply_transform",
    "conjugation_error",
    "prescreen_seed",
    "find_nonresonant_seed",
]

SLACK = 1e-8
# roundoff allowance for frequencies that must stay unshifted
SHIFT_ROUNDOFF = 64 * np.finfo(float).eps
MAX_SCHEDULE_STEPS = 10_000


class ScheduleError(ValueError):
    """The ``eps_s`` recurrence does not reach the target."""


class ResonanceError(RuntimeError):
    def __init__(self, monomial, k, divisor, threshold):
        self.monomial, self.k, self.divisor, self.threshold = monomial, k, divisor, threshold
        super().__init__(f"small divisor for k={k}: |d|={abs(divisor):.3e} < threshold {threshold:.3e}")


class LieSeriesDivergence(RuntimeError):
    pass


class BoundViolation(RuntimeError):
    def __init__(self, check: dict):
        self.check = check
        super().__init__(
            f"{check['name']} violated at step {check.get('step')}: value {check['value']:.6e} > "
            f"bound {check['bound']:.6e}" + (f" (monomial {check['monomial']})" if check.get("monomial") else "")
        )


# ---------------------------------------------------------------- schedule

def delta_factor(s: int) -> float:
    """``delta_s = prod_{j<s} (1 - 1/(5 j^2))``, ``delta_1 = 1``; ``delta_0`` is taken as 1."""
    out = 1.0
    for j in range(1, max(s, 1)):
        out *= 1.0 - 0.2 / (j * j)
    return out


@dataclass(frozen=True)
class ScheduleStep:
    s: int
    epsilon: float
    delta: float
    N: float

    @property
    def N_sites(self) -> int:
        """Integer annulus half-width (``N_s`` rounded up); ``-1`` for an empty annulus."""
        return math.ceil(self.N) if self.N >= 0 else -1


@dataclass(frozen=True)
class NormalFormSchedule:
    epsilon: float
    tau: float
    j0: int
    kappa: float
    steps: tuple  # ScheduleStep for s = 1 .. M+1
    M: int
    converged: bool
    window_constant: float = 20.0

    @property
    def target(self) -> float:
        return float(self.j0) ** (-3.0 / self.kappa)

    def step(self, s: int) -> ScheduleStep:
        if not 1 <= s <= len(self.steps):
            raise IndexError(f"schedule has no step {s}")
        return self.steps[s - 1]

    def eps(self, s: int) -> float:
        return self.step(s).epsilon

    def delta(self, s: int) -> float:
        return 1.0 if s == 0 else self.step(s).delta

    def N(self, s: int) -> float:
        return self.step(s).N

    def diameter_cutoff(self, s: int) -> float:
        """``10 ln eps_{s+1} / ln eps``."""
        return 10.0 * math.log(self.eps(s + 1)) / math.log(self.epsilon)

    @property
    def degree_cutoff(self) -> float:
        return 10.0 / self.kappa

    def as_table(self) -> list[dict]:
        return [{"s": st.s, "epsilon_s": st.epsilon, "delta_s": st.delta, "N_s": st.N,
                 "N_sites": st.N_sites} for st in self.steps]


def build_schedule(epsilon: float, tau: float, j0: int, kappa: float, *, steps: int | None = None,
                   window_constant: float = 20.0, max_steps: int = MAX_SCHEDULE_STEPS,
                   min_j0: int = 10) -> NormalFormSchedule:
    """Sequences ``eps_s, delta_s, N_s`` up to ``s = M + 1``.

    ``M`` is the first index with ``eps_{M+1} <= j0^(-3/kappa)``.  ``steps``
    forces ``M`` (the schedule is then flagged unconverged if the target is
    missed).  ``window_constant`` is the factor ``c`` in
    ``N_s = ln j0 - c ln eps_s / ln eps``.  ``min_j0`` lowers the ``j0 >= 10``
    guard for toy windows.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not 0 < tau < 0.01:
        raise ValueError("tau must lie in (0, 1/100)")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if j0 < min_j0 or j0 < 1:
        raise ValueError(f"j0 must be at least {min_j0}")
    target = float(j0) ** (-3.0 / kappa)
    shrink = float(j0) ** (-tau / 2.0)
    lj, le = math.log(j0), math.log(epsilon)
    eps = [epsilon]
    limit = steps if steps is not None else max_steps
    while True:
        e = eps[-1]
        nxt = e**1.5 + shrink * e
        eps.append(nxt)
        M = len(eps) - 1
        if steps is None:
            if nxt <= target:
                break
            if not nxt < e:
                raise ScheduleError(
                    f"epsilon above threshold: eps_s stops decreasing at s={M} "
                    f"(sqrt(eps_s) + j0^(-tau/2) = {math.sqrt(e) + shrink:.4f} >= 1)")
            if M >= limit:
                raise ScheduleError(f"epsilon above threshold: target {target:.3e} not reached "
                                    f"within {limit} steps (eps_{M + 1} = {nxt:.3e})")
        elif M >= limit:
            break
    M = len(eps) - 1
    table = []
    delta = 1.0
    for s, e in enumerate(eps, start=1):
        if s >= 2:
            delta *= 1.0 - 0.2 / ((s - 1) ** 2)
        N = lj - window_constant * math.log(e) / le if e > 0 else -math.inf
        table.append(ScheduleStep(s, e, delta, N))
    return NormalFormSchedule(epsilon, tau, int(j0), kappa, tuple(table), M,
                              eps[-1] <= target, window_constant)


def _schedule_ok(epsilon, tau, j0, kappa, window_constant):
    try:
        sched = build_schedule(epsilon, tau, j0, kappa, window_constant=window_constant)
    except ScheduleError:
        return False, False
    return True, sched.N(sched.M) >= 0.5 * math.log(j0)


def epsilon_threshold(kappa: float, tau: float, j0: int, *, window_constant: float = 20.0,
                      require_window: bool = True, log10_range=(-300.0, -1e-9), iters: int = 200) -> float:
    """Empirical ``eps_0``: largest ``eps`` (bisection in ``log10 eps``) for which the schedule
    converges and, if ``require_window``, the last annulus keeps ``N_M >= ln(j0)/2``."""
    def ok(le):
        conv, win = _schedule_ok(10.0**le, tau, j0, kappa, window_constant)
        return conv and (win or not require_window)

    lo, hi = log10_range
    if not ok(lo):
        return 0.0
    if ok(hi):
        return 10.0**hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    return 10.0**lo


def epsilon_threshold_table(kappas: Iterable[float], tau: float, j0: int, **kw) -> list[dict]:
    rows = []
    for kappa in kappas:
        rows.append({
            "kappa": kappa, "tau": tau, "j0": j0,
            "eps0_convergence": epsilon_threshold(kappa, tau, j0, require_window=False, **kw),
            "eps0_window": epsilon_threshold(kappa, tau, j0, require_window=True, **kw),
        })
    return rows


# ---------------------------------------------------------------- selection and homological equation

def window_sites(sched: NormalFormSchedule, s: int, w: TameWindow | None = None,
                 window_radius: int | None = None) -> frozenset[int]:
    w = w or TameWindow(sched.tau, sched.j0)
    return w.annulus(sched.step(s).N_sites, window_radius)


def select_removable(R: FormalHamiltonian, sched: NormalFormSchedule, s: int, w: TameWindow | None = None,
                     window_radius: int | None = None):
    """Split ``R`` into ``(R~_s, R - R~_s)``.

    ``R~_s`` keeps non-resonant monomials touching ``A(j0, N_s)`` with
    ``Delta(n) <= 10 ln eps_{s+1}/ln eps`` and ``|n| <= 10/kappa``.
    """
    sites = window_sites(sched, s, w, window_radius)
    dcut = sched.diameter_cutoff(s)
    ncut = sched.degree_cutoff

    def keep(m: Monomial) -> bool:
        return (not m.is_resonant and m.diameter <= dcut + 1e-12 and m.degree <= ncut + 1e-12
                and m.touches(sites))

    return R.partition(keep)


def diagonal_frequencies(D: FormalHamiltonian) -> tuple[dict[int, float], dict[int, dict[int, float]]]:
    """``v_j = 2 Re D(|q_j|^2)`` and ``d v_j / d v_l``."""
    v, dv = {}, {}
    for m in D:
        if not m.is_diagonal_quadratic:
            raise ValueError(f"D contains a non-diagonal monomial {m}")
        j = m[0][0]
        v[j] = 2.0 * D.value(m).real
        dv[j] = {l: 2.0 * x.real for l, x in D.derivatives(m).items()}
    return v, dv


def solve_homological(Rt: FormalHamiltonian, D: FormalHamiltonian, gamma: float | None = None,
                      *, floor: float = PRUNE_FLOOR) -> FormalHamiltonian:
    """``F(n) = R~(n) / ((i/2) d(n))`` with the quotient rule for v-derivatives.

    With ``gamma`` set, every divisor vector ``k = n - n'`` is checked
    against the threshold ``gamma / (max(Delta(k),1)^2 |k|^(Delta(k)+2))``.
    """
    v, dv = diagonal_frequencies(D)
    val, der = {}, {}
    a = 0.5j
    for n in Rt:
        if n.is_resonant:
            raise ValueError(f"resonant monomial {n} cannot be removed")
        k = n.divisor_vector()
        missing = [j for j in k if j not in v]
        if missing:
            raise ValueError(f"sites {missing} have no frequency in D")
        d = math.fsum(kj * v[j] for j, kj in sorted(k.items()))
        if gamma is not None:
            thr = nonresonance_threshold(gamma, vector_diameter(k), vector_norm(k))
            if not abs(d) >= thr:
                raise ResonanceError(n, k, d, thr)
        elif d == 0:
            raise ResonanceError(n, k, d, 0.0)
        r = Rt.value(n)
        dd: dict[int, float] = {}
        for j, kj in k.items():
            for l, x in dv[j].items():
                dd[l] = dd.get(l, 0.0) + kj * x
        dr = Rt.derivatives(n)
        f = r / (a * d)
        fd = {}
        for l in set(dr) | set(dd):
            x = dr.get(l, 0j) / (a * d) - r * dd.get(l, 0.0) / (a * d * d)
            if x != 0:
                fd[l] = x
        val[n], der[n] = f, fd
    return FormalHamiltonian(val, der, floor=floor)


def homological_residual(D: FormalHamiltonian, F: FormalHamiltonian, Rt: FormalHamiltonian) -> float:
    """Largest termwise mismatch between ``-{D, F}`` (rebuilt with the bracket) and ``R~``.

    Each value or derivative entry is compared relative to the larger of its
    reference value and the sum of absolute contributions entering it, the
    scale at which double-precision cancellation acts.  Monomials present on
    only one side count in full.
    """
    lhs = -poisson_bracket(D, F, floor=0.0)
    v, dv = diagonal_frequencies(D)
    worst = 0.0
    for m in set(lhs) | set(Rt):
        a, b = lhs.value(m), Rt.value(m)
        da, db = lhs.derivatives(m), Rt.derivatives(m)
        if m not in F:
            if a != 0 or any(da.values()):
                return math.inf
            continue
        f, df = F.value(m), F.derivatives(m)
        k = m.divisor_vector()
        sv = 0.5 * math.fsum(abs(x * v[j]) for j, x in k.items())
        worst = max(worst, abs(a - b) / max(abs(b), sv * abs(f)))
        for l in set(da) | set(db) | set(df):
            sdl = 0.5 * (math.fsum(abs(x * dv[j].get(l, 0.0)) for j, x in k.items()) * abs(f)
                         + sv * abs(df.get(l, 0j)))
            ref = abs(db.get(l, 0j))
            scale = max(ref, sdl)
            diff = abs(da.get(l, 0j) - db.get(l, 0j))
            if scale == 0.0:
                if diff:
                    return math.inf
                continue
            worst = max(worst, diff / scale)
    return worst


# ---------------------------------------------------------------- Lie series

@dataclass
class LieResult:
    hamiltonian: FormalHamiltonian
    orders: int
    term_norms: list
    tail_bound: float
    dropped_norm: float
    stats: PruneStats
    stopped: str


def _sup_norm(H: FormalHamiltonian, w: TameWindow | None) -> float:
    if w is not None:
        return triple_norm_sup(H, w)
    return max((abs(H.value(m)) + max((abs(x) for x in H.derivatives(m).values()), default=0.0)
                for m in H), default=0.0)


def lie_series(H: FormalHamiltonian, F: FormalHamiltonian, weight: Callable[[int], float], *,
               order_cap: int, floor: float = 0.0, w: TameWindow | None = None,
               degree_cap: int | None = None, prune_floor: float = PRUNE_FLOOR,
               include_zeroth: bool = True) -> LieResult:
    """``sum_k weight(k) ad_F^k H`` truncated at ``order_cap`` or once a term's norm is ``<= floor``.

    Terms above ``degree_cap`` are dropped before the next bracket and their
    largest norm is reported.  Three consecutive increases of the term norm
    raise :class:`LieSeriesDivergence`.
    """
    if order_cap < 1:
        raise ValueError("order_cap must be >= 1")
    if floor < 0:
        raise ValueError("floor must be >= 0")
    stats = PruneStats()
    dropped = 0.0
    total = H.scale(weight(0)) if include_zeroth and weight(0) != 0 else FormalHamiltonian.zero()
    term = H
    norms = [_sup_norm(H, w)]
    rises = 0
    stopped = "order_cap"
    k = 0
    if len(F) == 0 or len(H) == 0:
        return LieResult(total, 0, norms, 0.0, 0.0, stats, "exact")
    for k in range(1, order_cap + 1):
        term = poisson_bracket(term, F, floor=prune_floor, stats=stats)
        if degree_cap is not None:
            term, over = term.partition(lambda m: m.degree <= degree_cap)
            if len(over):
                dropped = max(dropped, abs(weight(k)) * _sup_norm(over, w))
        c = weight(k)
        norm = abs(c) * _sup_norm(term, w)
        norms.append(norm)
        if len(term) == 0:
            stopped = "exact"
            break
        total = total + term.scale(c)
        if k >= 2 and norm > norms[-2]:
            rises += 1
            if rises >= 3:
                raise LieSeriesDivergence(
                    f"Lie series term norms grow for 3 consecutive orders: {norms[-4:]}")
        else:
            rises = 0
        if norm <= floor:
            stopped = "floor"
            break
    if stopped == "exact":
        tail = 0.0
    else:
        prev = norms[-2] if len(norms) >= 2 else 0.0
        r = norms[-1] / prev if prev > 0 else math.inf
        tail = norms[-1] * r / (1.0 - r) if r < 1 else math.inf
    return LieResult(total, k, norms, tail, dropped, stats, stopped)


def lie_transform(H: FormalHamiltonian, F: FormalHamiltonian, order_cap: int, floor: float = 0.0,
                  **kw) -> FormalHamiltonian:
    """Truncated ``H o X_F = sum_k ad_F^k H / k!``."""
    return lie_series(H, F, lambda k: 1.0 / math.factorial(k), order_cap=order_cap, floor=floor,
                      **kw).hamiltonian


def split_hamiltonian(H: FormalHamiltonian):
    """Partition into diagonal quadratic, resonant ``|n| >= 4`` and non-resonant parts."""
    D = H.filter(lambda m: m.is_diagonal_quadratic)
    Z = H.filter(lambda m: m.is_resonant and m.degree >= 4)
    R = H.filter(lambda m: not m.is_resonant)
    if len(D) + len(Z) + len(R) != len(H):
        other = [m for m in H if m.is_resonant and m.degree < 4 and not m.is_diagonal_quadratic]
        raise ValueError(f"monomials outside the D/Z/R classes: {other[:3]}")
    return D, Z, R


# ---------------------------------------------------------------- iteration

@dataclass
class NormalFormState:
    s: int
    D: FormalHamiltonian
    Z: FormalHamiltonian
    R: FormalHamiltonian
    window_radius: int
    base_frequencies: dict
    transforms: list = field(default_factory=list)

    @property
    def hamiltonian(self) -> FormalHamiltonian:
        return self.D + self.Z + self.R

    def frequencies(self) -> dict[int, float]:
        return diagonal_frequencies(self.D)[0]

    def frequency_shift(self) -> dict[int, float]:
        v = self.frequencies()
        return {j: v[j] - self.base_frequencies[j] for j in v}


def initial_state(pot, epsilon: float, window_radius: int | None = None) -> NormalFormState:
    D, Z, R = initial_hamiltonian(pot, epsilon, window_radius=window_radius)
    W = pot.window_radius if window_radius is None else window_radius
    state = NormalFormState(1, D, Z, R, W, {})
    state.base_frequencies = state.frequencies()
    return state


def _decay_bound(w: TameWindow, epsilon: float, expo: float, m: Monomial) -> float:
    return float(w.j0) ** (expo * (2 - m.degree) * w.tau) * epsilon ** (expo * max(m.diameter, 1))


def _check(name, value, bound, step, slack=SLACK, **extra) -> dict:
    ok = value <= bound * (1.0 + slack)
    return {"name": name, "step": step, "value": float(value), "bound": float(bound),
            "margin": float(bound * (1.0 + slack) - value), "ok": bool(ok), **extra}


def _termwise_check(name, H, w, epsilon, expo, step, slack):
    worst, worst_m, worst_ratio = 0.0, None, -math.inf
    for m in H:
        val = triple_norm(H, w, m)
        b = _decay_bound(w, epsilon, expo, m)
        ratio = val / b
        if ratio > worst_ratio:
            worst_ratio, worst, worst_m = ratio, (val, b), m
    if worst_m is None:
        return _check(name, 0.0, 1.0, step, slack, monomial=None, ratio=0.0)
    c = _check(name, worst[0], worst[1], step, slack, monomial=repr(worst_m), ratio=worst_ratio)
    return c


def _residual_norm(R, w, sites):
    return max((triple_norm(R, w, m) for m in R if m.touches(sites)), default=0.0)


def entry_checks(state: NormalFormState, sched: NormalFormSchedule, w: TameWindow, slack=SLACK) -> list:
    s = state.s
    d = sched.delta(s - 1)
    sites = window_sites(sched, s, w, state.window_radius)
    return [
        _termwise_check("entry Z decay", state.Z, w, sched.epsilon, d, s, slack),
        _termwise_check("entry R decay", state.R, w, sched.epsilon, d, s, slack),
        _check("entry window residual", _residual_norm(state.R, w, sites), sched.eps(s), s, slack),
    ]


def _raise_on(checks, strict):
    if strict:
        for c in checks:
            if not c["ok"]:
                raise BoundViolation(c)


def normal_form_step(state: NormalFormState, sched: NormalFormSchedule, w: TameWindow | None = None, *,
                     order_cap: int | None = None, floor: float | None = None,
                     degree_cap: int | None = None, strict: bool = True, slack: float = SLACK,
                     prune_floor: float = PRUNE_FLOOR, check_nonresonance: bool = True):
    """One iteration ``H_s -> H_{s+1} = H_s o X_{F_s}``; returns ``(new_state, record)``."""
    w = w or TameWindow(sched.tau, sched.j0)
    s = state.s
    if s > sched.M:
        raise ValueError(f"step {s} beyond schedule length M={sched.M}")
    t0 = time.perf_counter()
    order_cap = order_cap or math.ceil(10.0 / sched.kappa) + 4
    floor = sched.eps(s + 1) * 1e-3 if floor is None else floor
    degree_cap = degree_cap or max(4, math.floor(10.0 / sched.kappa))
    eps_s, eps_next = sched.eps(s), sched.eps(s + 1)
    record = {"s": s, "epsilon_s": eps_s, "delta_s": sched.delta(s), "N_s": sched.N(s),
              "N_sites": sched.step(s).N_sites, "counts_in": {"D": len(state.D), "Z": len(state.Z),
                                                           "R": len(state.R)}}
    checks = entry_checks(state, sched, w, slack)
    _raise_on(checks, strict)

    Rt, rest = select_removable(state.R, sched, s, w, state.window_radius)
    record["removed"] = len(Rt)
    gamma = eps_s ** 0.01 if check_nonresonance else None
    F = solve_homological(Rt, state.D, gamma, floor=prune_floor)
    record["homological_residual"] = homological_residual(state.D, F, Rt) if len(F) else 0.0
    stats = PruneStats()
    if len(F) == 0:
        new = NormalFormState(s + 1, state.D, state.Z, state.R, state.window_radius,
                              state.base_frequencies, state.transforms + [F])
        record.update(lie_orders=0, tail_bound=0.0, dropped_degree_norm=0.0)
    else:
        A = lie_series(state.Z + rest, F, lambda k: 1.0 / math.factorial(k), order_cap=order_cap,
                       floor=floor, w=w, degree_cap=degree_cap, prune_floor=prune_floor)
        B = lie_series(Rt, F, lambda k: k / math.factorial(k + 1), order_cap=order_cap, floor=floor,
                       w=w, degree_cap=degree_cap, prune_floor=prune_floor, include_zeroth=False)
        stats.merge(A.stats)
        stats.merge(B.stats)
        Hn = (state.D + A.hamiltonian + B.hamiltonian).pruned(prune_floor, stats)
        D, Z, R = split_hamiltonian(Hn)
        new = NormalFormState(s + 1, D, Z, R, state.window_radius, state.base_frequencies,
                              state.transforms + [F])
        record.update(lie_orders=max(A.orders, B.orders), tail_bound=A.tail_bound + B.tail_bound,
                      dropped_degree_norm=max(A.dropped_norm, B.dropped_norm),
                      lie_stopped=[A.stopped, B.stopped])
    record["prune"] = {"pruned": stats.pruned, "max_pruned": stats.max_pruned, "cancelled": stats.cancelled}

    exit_checks = [_check("generator norm", triple_norm_sup(F, w), eps_s ** 0.9, s, slack)]
    exit_checks.append(_termwise_check("exit Z decay", new.Z, w, sched.epsilon, sched.delta(s), s, slack))
    exit_checks.append(_termwise_check("exit R decay", new.R, w, sched.epsilon, sched.delta(s), s, slack))
    if s + 1 <= len(sched.steps):
        sites = window_sites(sched, s + 1, w, state.window_radius)
        exit_checks.append(_check("exit window residual", _residual_norm(new.R, w, sites), eps_next, s, slack))
    worst_m, worst = None, 0.0
    for m in Rt:
        if m in new.R:
            val = triple_norm(new.R, w, m)
            if val > worst:
                worst, worst_m = val, m
    exit_checks.append(_check("eliminated monomials", worst, eps_next, s, slack,
                              monomial=repr(worst_m) if worst_m else None))
    shift = new.frequency_shift()
    lnj = math.log(sched.j0)
    outside = max((abs(x) for j, x in shift.items() if abs(abs(j) - sched.j0) > lnj), default=0.0)
    exit_checks.append(_check("frequency shift localized", outside, SHIFT_ROUNDOFF, s, 0.0))
    step_shift = max((abs(new.frequencies()[j] - v) for j, v in state.frequencies().items()), default=0.0)
    exit_checks.append(_check("frequency shift size", step_shift, eps_s, s, slack))
    record["checks"] = checks + exit_checks
    record["counts_out"] = {"D": len(new.D), "Z": len(new.Z), "R": len(new.R)}
    record["wall_time"] = time.perf_counter() - t0
    _raise_on(exit_checks, strict)
    return new, record


def final_checks(state: NormalFormState, sched: NormalFormSchedule, w: TameWindow, slack=SLACK) -> list:
    """Exit bounds of the whole construction: decay with exponent 1/2 and the residual
    on ``A(j0, ln(j0)/2)`` against ``j0^(-3/kappa)``."""
    step = state.s
    sites = w.annulus(0.5 * math.log(sched.j0), state.window_radius)
    return [
        _termwise_check("final Z decay", state.Z, w, sched.epsilon, 0.5, step, slack),
        _termwise_check("final R decay", state.R, w, sched.epsilon, 0.5, step, slack),
        _check("final window residual", _residual_norm(state.R, w, sites), sched.target, step, slack),
        _check("delta_M >= 1/2", 0.5, sched.delta(sched.M), step, 0.0),
    ]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def run_normal_form(pot, epsilon: float, tau: float, j0: int, kappa: float,
                    window_radius: int | None = None, *, steps: int | None = None,
                    window_constant: float = 20.0, degree_cap: int | None = None,
                    order_cap: int | None = None, floor: float | None = None, strict: bool = True,
                    slack: float = SLACK, prune_floor: float = PRUNE_FLOOR, dump_dir=None,
                    check_nonresonance: bool = True, progress: Callable[[dict], None] | None = None,
                    min_j0: int = 10):
    """Run ``M`` steps from the lattice Hamiltonian; returns ``(final_state, report)``.

    Raises :class:`ScheduleError` if the schedule fails and
    :class:`ResonanceError` on a small divisor.
    """
    sched = build_schedule(epsilon, tau, j0, kappa, steps=steps, window_constant=window_constant,
                           min_j0=min_j0)
    w = TameWindow(tau, j0)
    W = pot.window_radius if window_radius is None else int(window_radius)
    state = initial_state(pot, epsilon, W)
    dump = Path(dump_dir) if dump_dir is not None else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    report = {
        "parameters": {"epsilon": epsilon, "tau": tau, "j0": j0, "kappa": kappa, "window_radius": W,
                       "steps_override": steps, "window_constant": window_constant,
                       "degree_cap": degree_cap or max(4, math.floor(10.0 / kappa)),
                       "strict": strict, "prune_floor": prune_floor, "seed": getattr(pot, "seed", None)},
        "production_scale": w.production_scale,
        "schedule": sched.as_table(), "M": sched.M, "schedule_converged": sched.converged,
        "steps": [],
    }
    t0 = time.perf_counter()
    for _ in range(sched.M):
        state, rec = normal_form_step(state, sched, w, order_cap=order_cap, floor=floor,
                                      degree_cap=degree_cap, strict=strict, slack=slack,
                                      prune_floor=prune_floor, check_nonresonance=check_nonresonance)
        report["steps"].append(rec)
        if dump is not None:
            s = rec["s"]
            (dump / f"step_{s:02d}.json").write_text(json.dumps(_jsonable(rec), indent=2))
            dump_hamiltonian(state.transforms[-1], dump / f"F_{s:02d}.txt")
            for name in ("D", "Z", "R"):
                dump_hamiltonian(getattr(state, name), dump / f"H_{s + 1:02d}_{name}.txt")
        if progress is not None:
            progress(rec)
    fin = final_checks(state, sched, w, slack)
    report["final_checks"] = fin
    report["wall_time"] = time.perf_counter() - t0
    all_checks = [c for r in report["steps"] for c in r["checks"]] + fin
    report["all_bounds_hold"] = all(c["ok"] for c in all_checks)
    report["max_homological_residual"] = max((r["homological_residual"] for r in report["steps"]), default=0.0)
    if dump is not None:
        (dump / "report.json").write_text(json.dumps(_jsonable(report), indent=2))
    if strict:
        _raise_on(fin, True)
    return state, report


# ---------------------------------------------------------------- conjugation oracle

def apply_transform(transforms: list, q: np.ndarray, inverse: bool = False, **kw) -> np.ndarray:
    """``Gamma = X_{F_1} o ... o X_{F_M}`` (``X_{F_M}`` acts first) or its inverse."""
    q = np.asarray(q, np.complex128)
    seq = transforms if inverse else list(reversed(transforms))
    for F in seq:
        if len(F):
            q = hamiltonian_flow(F, q, -1.0 if inverse else 1.0, **kw)
    return q


def conjugation_error(original: FormalHamiltonian, transformed: FormalHamiltonian, transforms: list,
                      p0: np.ndarray, times: Iterable[float]) -> float:
    """``max_t |Gamma(p(t)) - q(t)| / max|q|`` with ``p`` the transformed flow from ``p0`` and
    ``q`` the original flow from ``Gamma(p0)``."""
    q0 = apply_transform(transforms, p0)
    worst = 0.0
    for t in times:
        q = physical_flow(original, q0, t)
        p = physical_flow(transformed, p0, t)
        worst = max(worst, float(np.max(np.abs(apply_transform(transforms, p) - q)) / np.max(np.abs(q))))
    return worst


# ---------------------------------------------------------------- seed screening

def prescreen_seed(pot, sched: NormalFormSchedule, *, max_norm: int = 4, max_diameter: int = 2,
                   window_radius: int | None = None) -> bool:
    """Cheap necessary check: low-order divisor vectors near the first annulus are
    ``eps^(1/100)``-non-resonant for the unshifted frequencies."""
    from .measure import divisor_vectors_near
    W = pot.window_radius if window_radius is None else window_radius
    sites = window_sites(sched, 1, None, W)
    gamma = sched.epsilon ** 0.01
    for k in divisor_vectors_near(sites, max_norm, max_diameter, W):
        d = math.fsum(x * pot[j] for j, x in k.items())
        if abs(d) < nonresonance_threshold(gamma, vector_diameter(k), vector_norm(k)):
            return False
    return True


def find_nonresonant_seed(sample: Callable[[int], object], sched: NormalFormSchedule,
                          seeds: Iterable[int], **kw):
    """First seed whose potential passes :func:`prescreen_seed`, or ``None``."""
    for seed in seeds:
        if prescreen_seed(sample(seed), sched, **kw):
            return seed
    return None
