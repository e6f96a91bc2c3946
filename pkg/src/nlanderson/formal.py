"""Sparse formal Hamiltonians in the monomials ``prod_j q_j^{n_j} conj(q_j)^{n'_j}``.

A :class:`FormalHamiltonian` maps canonical :class:`Monomial` keys to complex
coefficients, each optionally carrying forward derivatives ``d H(n) / d v_l``
with respect to the original site frequencies.  The Poisson bracket is

    {H, G} = i sum_k (dH/dq_k dG/dq̄_k - dH/dq̄_k dG/dq_k),

evaluated termwise.  Every output coefficient is accumulated with
:func:`math.fsum` over its individual contributions, so results do not depend
on iteration order and ``{H, G} == -{G, H}`` holds bit-for-bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "PRUNE_FLOOR",
    "Monomial",
    "Coefficient",
    "FormalHamiltonian",
    "PruneStats",
    "TameWindow",
    "poisson_bracket",
    "tame_weight",
    "tame_norm",
    "lipschitz_norm",
    "triple_norm",
    "triple_norm_sup",
    "initial_hamiltonian",
    "amplitude_rescaling",
    "evaluate",
    "CompiledHamiltonian",
    "hamiltonian_flow",
    "physical_flow",
    "dump_hamiltonian",
    "load_hamiltonian",
]

PRUNE_FLOOR = 1e-30


class Monomial(tuple):
    """Canonical sorted tuple of ``(site, n_j, n'_j)`` triples with no all-zero entry."""

    __slots__ = ()

    def __new__(cls, triples: Iterable = ()):
        acc: dict[int, list[int]] = {}
        for j, a, b in triples:
            if a < 0 or b < 0:
                raise ValueError("exponents must be non-negative")
            e = acc.setdefault(int(j), [0, 0])
            e[0] += int(a)
            e[1] += int(b)
        return tuple.__new__(cls, tuple(sorted((j, a, b) for j, (a, b) in acc.items() if a or b)))

    @classmethod
    def _raw(cls, triples: tuple) -> "Monomial":
        return tuple.__new__(cls, triples)

    @classmethod
    def from_exponents(cls, n: Mapping[int, int], nbar: Mapping[int, int]) -> "Monomial":
        sites = set(n) | set(nbar)
        return cls((j, n.get(j, 0), nbar.get(j, 0)) for j in sites)

    @classmethod
    def action(cls, site: int, power: int = 1) -> "Monomial":
        """``|q_site|^(2 power)``."""
        return cls._raw(((int(site), power, power),))

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(t[0] for t in self)

    @property
    def diameter(self) -> int:
        return self[-1][0] - self[0][0] if self else 0

    @property
    def degree(self) -> int:
        return sum(a + b for _, a, b in self)

    @property
    def is_resonant(self) -> bool:
        return all(a == b for _, a, b in self)

    @property
    def is_diagonal_quadratic(self) -> bool:
        return len(self) == 1 and self[0][1] == 1 and self[0][2] == 1

    def conj(self) -> "Monomial":
        return Monomial._raw(tuple((j, b, a) for j, a, b in self))

    def divisor_vector(self) -> dict[int, int]:
        """``k = n - n'`` restricted to its nonzero entries."""
        return {j: a - b for j, a, b in self if a != b}

    def exponents(self) -> dict[int, tuple[int, int]]:
        return {j: (a, b) for j, a, b in self}

    def touches(self, sites) -> bool:
        return any(j in sites for j, _, _ in self)

    def __repr__(self) -> str:
        return "Monomial(" + " ".join(f"{j}:{a}:{b}" for j, a, b in self) + ")"


@dataclass(frozen=True)
class Coefficient:
    value: complex
    v_derivatives: Mapping[int, complex] = field(default_factory=dict)

    def lipschitz(self) -> float:
        return max((abs(d) for d in self.v_derivatives.values()), default=0.0)


@dataclass
class PruneStats:
    """Terms dropped below the prune floor, and exact cancellations."""

    pruned: int = 0
    max_pruned: float = 0.0
    cancelled: int = 0

    def record(self, magnitude: float) -> None:
        if magnitude == 0.0:
            self.cancelled += 1
        else:
            self.pruned += 1
            self.max_pruned = max(self.max_pruned, magnitude)

    def merge(self, other: "PruneStats") -> None:
        self.pruned += other.pruned
        self.cancelled += other.cancelled
        self.max_pruned = max(self.max_pruned, other.max_pruned)


class FormalHamiltonian:
    """Immutable sparse map ``Monomial -> Coefficient``.

    Values live in ``_val``; derivative maps in ``_der`` only for terms that
    depend on the frequencies.
    """

    __slots__ = ("_val", "_der", "_index")

    def __init__(self, values: Mapping | None = None, derivatives: Mapping | None = None,
                 *, floor: float = 0.0, stats: PruneStats | None = None):
        val: dict[Monomial, complex] = {}
        der: dict[Monomial, dict[int, complex]] = {}
        derivatives = derivatives or {}
        for m, c in (values or {}).items():
            if not isinstance(m, Monomial):
                m = Monomial(m)
            if len(m) == 0:
                raise ValueError("constant monomials are not stored")
            c = complex(c)
            d = {int(j): complex(x) for j, x in derivatives.get(m, {}).items() if x != 0}
            mag = max(abs(c), max((abs(x) for x in d.values()), default=0.0))
            if mag <= floor or mag == 0.0:
                if stats is not None:
                    stats.record(mag)
                continue
            val[m] = c
            if d:
                der[m] = d
        self._val = val
        self._der = der
        self._index = None

    @classmethod
    def _from_dicts(cls, val, der) -> "FormalHamiltonian":
        h = cls.__new__(cls)
        h._val, h._der, h._index = val, der, None
        return h

    @classmethod
    def zero(cls) -> "FormalHamiltonian":
        return cls._from_dicts({}, {})

    # mapping protocol
    def __len__(self) -> int:
        return len(self._val)

    def __iter__(self) -> Iterator[Monomial]:
        return iter(self._val)

    def __contains__(self, m) -> bool:
        return m in self._val

    def __getitem__(self, m) -> Coefficient:
        return Coefficient(self._val[m], dict(self._der.get(m, {})))

    def value(self, m, default: complex = 0j) -> complex:
        return self._val.get(m, default)

    def derivatives(self, m) -> dict[int, complex]:
        return dict(self._der.get(m, {}))

    def items(self) -> Iterator[tuple[Monomial, Coefficient]]:
        for m in self._val:
            yield m, self[m]

    def monomials(self) -> list[Monomial]:
        return sorted(self._val)

    def site_index(self) -> dict[int, list[Monomial]]:
        if self._index is None:
            idx: dict[int, list[Monomial]] = {}
            for m in self._val:
                for j, _, _ in m:
                    idx.setdefault(j, []).append(m)
            self._index = idx
        return self._index

    @property
    def max_degree(self) -> int:
        return max((m.degree for m in self._val), default=0)

    @property
    def is_v_independent(self) -> bool:
        return not self._der

    # algebra
    def __add__(self, other: "FormalHamiltonian") -> "FormalHamiltonian":
        return _combine(self, other, 1.0)

    def __sub__(self, other: "FormalHamiltonian") -> "FormalHamiltonian":
        return _combine(self, other, -1.0)

    def __neg__(self) -> "FormalHamiltonian":
        return self.scale(-1.0)

    def scale(self, a: complex) -> "FormalHamiltonian":
        if a == 0:
            return FormalHamiltonian.zero()
        val = {m: a * c for m, c in self._val.items()}
        der = {m: {j: a * x for j, x in d.items()} for m, d in self._der.items()}
        return FormalHamiltonian._from_dicts(val, der)

    __rmul__ = scale

    def __mul__(self, a):
        return self.scale(a)

    def filter(self, pred: Callable[[Monomial], bool]) -> "FormalHamiltonian":
        val = {m: c for m, c in self._val.items() if pred(m)}
        der = {m: d for m, d in self._der.items() if m in val}
        return FormalHamiltonian._from_dicts(val, der)

    def partition(self, pred) -> tuple["FormalHamiltonian", "FormalHamiltonian"]:
        return self.filter(pred), self.filter(lambda m: not pred(m))

    def pruned(self, floor: float, stats: PruneStats | None = None) -> "FormalHamiltonian":
        return FormalHamiltonian(self._val, self._der, floor=floor, stats=stats)

    def equals(self, other: "FormalHamiltonian", tol: float = 0.0, relative: bool = False) -> bool:
        """Coefficient-map equality, values and derivatives, up to ``tol``."""
        return self.max_difference(other, relative) <= tol

    def max_difference(self, other: "FormalHamiltonian", relative: bool = False) -> float:
        worst = 0.0
        for m in set(self._val) | set(other._val):
            a, b = self._val.get(m, 0j), other._val.get(m, 0j)
            da, db = self._der.get(m, {}), other._der.get(m, {})
            pairs = [(a, b)] + [(da.get(j, 0j), db.get(j, 0j)) for j in set(da) | set(db)]
            for x, y in pairs:
                diff = abs(x - y)
                if relative:
                    scale = max(abs(x), abs(y))
                    diff = diff / scale if scale > 0 else 0.0
                worst = max(worst, diff)
        return worst

    def is_real(self, tol: float = 0.0) -> bool:
        """Each term's conjugate monomial carries the conjugate coefficient."""
        for m, c in self._val.items():
            cm = m.conj()
            if abs(self._val.get(cm, 0j) - c.conjugate()) > tol * max(1.0, abs(c)):
                return False
            d, dc = self._der.get(m, {}), self._der.get(cm, {})
            for j in set(d) | set(dc):
                if abs(dc.get(j, 0j) - d.get(j, 0j).conjugate()) > tol * max(1.0, abs(d.get(j, 0j))):
                    return False
        return True

    def __repr__(self) -> str:
        return f"FormalHamiltonian({len(self)} terms, max degree {self.max_degree})"


def _combine(h: FormalHamiltonian, g: FormalHamiltonian, sign: float) -> FormalHamiltonian:
    val = dict(h._val)
    der = {m: dict(d) for m, d in h._der.items()}
    for m, c in g._val.items():
        val[m] = val.get(m, 0j) + sign * c
    for m, d in g._der.items():
        t = der.setdefault(m, {})
        for j, x in d.items():
            t[j] = t.get(j, 0j) + sign * x
    for m in [m for m, c in val.items() if c == 0 and not any(der.get(m, {}).values())]:
        del val[m]
        der.pop(m, None)
    for m in list(der):
        d = {j: x for j, x in der[m].items() if x != 0}
        if d and m in val:
            der[m] = d
        else:
            del der[m]
    return FormalHamiltonian._from_dicts(val, der)


def _product_lowered(en: dict, m: Monomial, k: int) -> Monomial:
    """Monomial of ``q^(n+m) qbar^(n'+m')`` with one ``q_k`` and one ``qbar_k`` removed."""
    acc = {j: [a, b] for j, (a, b) in en.items()}
    for j, a, b in m:
        e = acc.get(j)
        if e is None:
            acc[j] = [a, b]
        else:
            e[0] += a
            e[1] += b
    e = acc[k]
    e[0] -= 1
    e[1] -= 1
    assert e[0] >= 0 and e[1] >= 0, "negative exponent in bracket"
    return Monomial._raw(tuple(sorted((j, a, b) for j, (a, b) in acc.items() if a or b)))


def poisson_bracket(H: FormalHamiltonian, G: FormalHamiltonian, *, floor: float = PRUNE_FLOOR,
                    stats: PruneStats | None = None) -> FormalHamiltonian:
    """``{H, G}`` with forward v-derivatives by the product rule.

    Only pairs sharing a site ``k`` contribute, and each shared site gives
    one output monomial with integer factor ``n_k m'_k - n'_k m_k``.
    """
    if len(H) == 0 or len(G) == 0:
        return FormalHamiltonian.zero()
    gidx = G.site_index()
    gexp: dict[Monomial, dict] = {}
    re: dict[Monomial, list[float]] = {}
    im: dict[Monomial, list[float]] = {}
    dre: dict[Monomial, dict[int, list[float]]] = {}
    dim: dict[Monomial, dict[int, list[float]]] = {}
    hval, hder, gval, gder = H._val, H._der, G._val, G._der

    for n, h in hval.items():
        en = n.exponents()
        hd = hder.get(n)
        for k, nk, nbk in n:
            for m in gidx.get(k, ()):
                em = gexp.get(m)
                if em is None:
                    em = gexp[m] = m.exponents()
                mk, mbk = em[k]
                c = nk * mbk - nbk * mk
                if c == 0:
                    continue
                out = _product_lowered(en, m, k)
                g = gval[m]
                p = h * g
                # i * c * p, written out so that the sign flips exactly under H <-> G
                lr = re.get(out)
                if lr is None:
                    lr = re[out] = []
                    im[out] = []
                lr.append(-c * p.imag)
                im[out].append(c * p.real)
                gd = gder.get(m)
                if hd or gd:
                    dr = dre.setdefault(out, {})
                    di = dim.setdefault(out, {})
                    if hd:
                        for j, x in hd.items():
                            t = x * g
                            dr.setdefault(j, []).append(-c * t.imag)
                            di.setdefault(j, []).append(c * t.real)
                    if gd:
                        for j, x in gd.items():
                            t = h * x
                            dr.setdefault(j, []).append(-c * t.imag)
                            di.setdefault(j, []).append(c * t.real)

    fsum = math.fsum
    val: dict[Monomial, complex] = {}
    der: dict[Monomial, dict[int, complex]] = {}
    for out, lr in re.items():
        v = complex(fsum(lr), fsum(im[out]))
        d = {}
        if out in dre:
            di = dim[out]
            for j, xs in dre[out].items():
                x = complex(fsum(xs), fsum(di[j]))
                if abs(x) > floor:
                    d[j] = x
                elif stats is not None and x != 0:
                    stats.record(abs(x))
        mag = max(abs(v), max((abs(x) for x in d.values()), default=0.0))
        if mag <= floor:
            if stats is not None:
                stats.record(mag)
            continue
        val[out] = v
        if d:
            der[out] = d
    return FormalHamiltonian._from_dicts(val, der)


@dataclass(frozen=True)
class TameWindow:
    """Weight parameters ``(tau, j0)`` and the annuli ``A(j0, N) = {j : ||j| - j0| <= N}``."""

    tau: float
    j0: int

    def __post_init__(self):
        if not 0 < self.tau < 0.01:
            raise ValueError("tau must lie in (0, 1/100)")
        if self.j0 < 1:
            raise ValueError("j0 must be positive")

    @property
    def production_scale(self) -> bool:
        return self.j0 >= 10_000 and self.j0 > 100 * math.log(self.j0) ** 2

    def annulus(self, N: float, window_radius: int | None = None) -> frozenset[int]:
        if N < 0:
            return frozenset()
        lo, hi = math.ceil(self.j0 - N), math.floor(self.j0 + N)
        sites = set()
        for r in range(max(lo, 0), hi + 1):
            sites.update((r, -r))
        if window_radius is not None:
            sites = {j for j in sites if abs(j) <= window_radius}
        return frozenset(sites)


def tame_weight(w: TameWindow, degree: int) -> float:
    return float(w.j0) ** ((2 - degree) * w.tau)


def tame_norm(H: FormalHamiltonian, w: TameWindow, n: Monomial) -> float:
    """``j0^((2-|n|) tau) |H(n)|``; zero for absent ``n``."""
    if n not in H:
        return 0.0
    return tame_weight(w, n.degree) * abs(H.value(n))


def lipschitz_norm(H: FormalHamiltonian, w: TameWindow, n: Monomial) -> float:
    """``j0^((2-|n|) tau) sup_l |d H(n) / d v_l|``."""
    d = H._der.get(n)
    if not d:
        return 0.0
    return tame_weight(w, n.degree) * max(abs(x) for x in d.values())


def triple_norm(H: FormalHamiltonian, w: TameWindow, n: Monomial) -> float:
    return tame_norm(H, w, n) + lipschitz_norm(H, w, n)


def triple_norm_sup(H: FormalHamiltonian, w: TameWindow) -> float:
    return max((triple_norm(H, w, n) for n in H), default=0.0)


def amplitude_rescaling(epsilon: float, delta: float) -> float:
    """Factor ``c`` with ``p = c q`` turning quartic strength ``delta`` into ``epsilon``.

    ``c = sqrt(delta / epsilon)``; the equation of motion keeps its form since
    ``H(q) = c^-2 H_eps(p)``.
    """
    if epsilon <= 0 or delta <= 0:
        raise ValueError("epsilon and delta must be positive")
    return math.sqrt(delta / epsilon)


def initial_hamiltonian(pot, epsilon: float, delta: float | None = None,
                        window_radius: int | None = None):
    """``(D, Z, R)`` of the lattice Hamiltonian on the window.

    ``D = 1/2 sum v_j |q_j|^2`` with ``dD(j)/dv_j = 1/2``; ``Z`` holds the
    on-site quartics ``delta/4 |q_j|^4``; ``R`` the hopping terms
    ``eps/2 (q̄_j q_{j+1} + q_j q̄_{j+1})``.  The normal-form iteration uses
    ``delta = epsilon`` (the default); other values can be mapped there with
    :func:`amplitude_rescaling`.
    """
    W = pot.window_radius if window_radius is None else int(window_radius)
    if W > pot.window_radius:
        raise ValueError("window exceeds potential")
    delta = epsilon if delta is None else delta
    dval, dder, zval, rval = {}, {}, {}, {}
    for j in range(-W, W + 1):
        m = Monomial.action(j)
        dval[m] = 0.5 * pot[j]
        dder[m] = {j: 0.5}
        if delta != 0:
            zval[Monomial.action(j, 2)] = 0.25 * delta
    if epsilon != 0:
        for j in range(-W, W):
            rval[Monomial._raw(((j, 0, 1), (j + 1, 1, 0)))] = 0.5 * epsilon
            rval[Monomial._raw(((j, 1, 0), (j + 1, 0, 1)))] = 0.5 * epsilon
    return (FormalHamiltonian(dval, dder), FormalHamiltonian(zval), FormalHamiltonian(rval))


def _state_array(state):
    q = getattr(state, "amplitudes", None)
    if q is None:
        raise TypeError("expected a LatticeState")
    return np.asarray(q), state.window_radius


def evaluate(H: FormalHamiltonian, state) -> complex:
    """``sum_n H(n) prod q_j^n_j conj(q_j)^n'_j`` at a lattice state."""
    q, W = _state_array(state)
    qb = np.conj(q)
    parts = []
    for m, c in H._val.items():
        x = c
        for j, a, b in m:
            if abs(j) > W:
                raise ValueError(f"monomial site {j} outside the state window")
            i = j + W
            x = x * q[i] ** a * qb[i] ** b
        parts.append(x)
    return complex(math.fsum(p.real for p in parts), math.fsum(p.imag for p in parts))


class CompiledHamiltonian:
    """Dense exponent tables for fast value and gradient evaluation on a window."""

    def __init__(self, H: FormalHamiltonian, window_radius: int):
        W = int(window_radius)
        L = 2 * W + 1
        ms = H.monomials()
        self.W = W
        self.coeffs = np.array([H.value(m) for m in ms], dtype=np.complex128)
        self.E = np.zeros((len(ms), L), dtype=np.int64)
        self.Eb = np.zeros((len(ms), L), dtype=np.int64)
        for t, m in enumerate(ms):
            for j, a, b in m:
                if abs(j) > W:
                    raise ValueError(f"monomial site {j} outside the window")
                self.E[t, j + W] = a
                self.Eb[t, j + W] = b

    def _powers(self, q):
        return np.prod(q[None, :] ** self.E, axis=1), np.prod(np.conj(q)[None, :] ** self.Eb, axis=1)

    def value(self, q: np.ndarray) -> complex:
        a, b = self._powers(q)
        return complex(np.sum(self.coeffs * a * b))

    def grad_conj(self, q: np.ndarray) -> np.ndarray:
        """``dH/d qbar_j`` for every window site."""
        qb = np.conj(q)
        pq = np.prod(q[None, :] ** self.E, axis=1) * self.coeffs
        out = np.zeros(q.shape[0], np.complex128)
        for i in range(q.shape[0]):
            col = self.Eb[:, i]
            rows = np.nonzero(col)[0]
            if rows.size == 0:
                continue
            Eb = self.Eb[rows].copy()
            Eb[:, i] -= 1
            out[i] = np.sum(col[rows] * pq[rows] * np.prod(qb[None, :] ** Eb, axis=1))
        return out


def _integrate(field, q0: np.ndarray, t: float, rtol: float, atol: float) -> np.ndarray:
    L = q0.shape[0]

    def f(_, y):
        z = field(y[:L] + 1j * y[L:])
        return np.concatenate([z.real, z.imag])

    y0 = np.concatenate([q0.real, q0.imag])
    if t == 0:
        return q0.copy()
    sol = solve_ivp(f, (0.0, t), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    y = sol.y[:, -1]
    return y[:L] + 1j * y[L:]


def hamiltonian_flow(F: FormalHamiltonian, q0: np.ndarray, t: float = 1.0, *,
                     window_radius: int | None = None, rtol: float = 1e-12,
                     atol: float = 1e-14) -> np.ndarray:
    """Time-``t`` map of ``dq/dt = i dF/dqbar`` (the flow along which ``G o X_F`` has
    ``d/dt = {G, F}``)."""
    q0 = np.asarray(q0, np.complex128)
    W = (q0.shape[0] - 1) // 2 if window_radius is None else window_radius
    c = CompiledHamiltonian(F, W)
    return _integrate(lambda q: 1j * c.grad_conj(q), q0, t, rtol, atol)


def physical_flow(H: FormalHamiltonian, q0: np.ndarray, t: float, *, rtol: float = 1e-12,
                  atol: float = 1e-14) -> np.ndarray:
    """Time-``t`` map of ``i dq/dt = 2 dH/dqbar``."""
    q0 = np.asarray(q0, np.complex128)
    c = CompiledHamiltonian(H, (q0.shape[0] - 1) // 2)
    return _integrate(lambda q: -2j * c.grad_conj(q), q0, t, rtol, atol)


def _fmt_monomial(m: Monomial) -> str:
    return " ".join(f"{j}:{a}:{b}" for j, a, b in m)


def dump_hamiltonian(H: FormalHamiltonian, path) -> None:
    """One line per monomial, canonical order:

    ``site:n:n' ... | re im | l:dre:dim ...``
    """
    with open(path, "w") as fh:
        for m in H.monomials():
            c = H.value(m)
            d = H._der.get(m, {})
            ders = " ".join(f"{j}:{x.real!r}:{x.imag!r}" for j, x in sorted(d.items()))
            fh.write(f"{_fmt_monomial(m)} | {c.real!r} {c.imag!r} | {ders}\n".rstrip() + "\n")


def load_hamiltonian(path) -> FormalHamiltonian:
    val, der = {}, {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split("|")]
            m = Monomial(tuple(int(x) for x in tok.split(":")) for tok in parts[0].split())
            re, im = (float(x) for x in parts[1].split())
            val[m] = complex(re, im)
            if len(parts) > 2 and parts[2]:
                d = {}
                for tok in parts[2].split():
                    j, a, b = tok.split(":")
                    d[int(j)] = complex(float(a), float(b))
                der[m] = d
    return FormalHamiltonian(val, der)
