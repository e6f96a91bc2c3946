"""Time integration of the disordered cubic lattice NLS

    i dq_j/dt = eps (q_{j-1} + q_{j+1}) + v_j q_j + delta |q_j|^2 q_j

by Strang splitting into two exactly solvable sub-flows:

* on-site flow ``A``: ``q_j -> exp(-i (v_j + delta |q_j|^2) h) q_j`` (``|q_j|`` is conserved);
* hopping flow ``B``: ``q -> exp(-i h eps T) q`` with ``T`` the nearest-neighbour
  adjacency of the window (periodic ring or Dirichlet segment).

``B`` is applied as a short real-space stencil from the Jacobi-Anger expansion
``exp(-i a (z + 1/z)) = sum_m (-i)^m J_m(2a) z^m``, truncated once the Bessel
coefficients drop below ``1e-20``; this is the Chebyshev expansion of the
propagator in the spectrum ``[-2, 2]`` of ``T`` and is exact to roundoff.
Spectral (FFT / DST-I) versions are kept as independent references.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numba
import numpy as np
import scipy.fft
import scipy.linalg
from scipy.special import jv

from .lattice import DiffusionTrace, LatticeState, diffusion_moment, tail_mass
from .potential import Potential

__all__ = [
    "ModelParams",
    "BoundaryMassError",
    "rhs",
    "hamiltonian_energy",
    "hopping_stencil",
    "hopping_flow",
    "onsite_flow",
    "step_strang",
    "advance",
    "integrate",
    "exact_onsite_solution",
    "exact_linear_solution",
    "LinearPropagator",
    "log_sample_grid",
    "boundary_mass_fraction",
]

BOUNDARIES = ("periodic", "dirichlet")
STENCIL_TOL = 1e-20
DENSE_WINDOW_LIMIT = 2048


@dataclass(frozen=True)
class ModelParams:
    epsilon: float
    delta: float
    dt: float = 0.01
    boundary: str = "periodic"

    def __post_init__(self):
        if self.epsilon < 0 or self.delta < 0:
            raise ValueError("epsilon and delta must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")

    def as_dict(self) -> dict:
        return asdict(self)


class BoundaryMassError(RuntimeError):
    """Mass reached the window edge; the finite-window trajectory is no longer trusted."""

    def __init__(self, time, fraction, limit, width):
        self.time, self.fraction, self.limit, self.width = time, fraction, limit, width
        super().__init__(
            f"boundary mass fraction {fraction:.3e} exceeds {limit:.1e} at t={time:g} "
            f"(outer {width} sites per side); enlarge the window"
        )


def _check_window(state: LatticeState, pot: Potential) -> None:
    if state.window_radius != pot.window_radius:
        raise ValueError(
            f"window mismatch: state W={state.window_radius}, potential W={pot.window_radius}"
        )


def _neighbour_sum(q: np.ndarray, boundary: str) -> np.ndarray:
    s = np.zeros_like(q)
    s[1:] += q[:-1]
    s[:-1] += q[1:]
    if boundary == "periodic" and q.shape[0] > 2:
        s[0] += q[-1]
        s[-1] += q[0]
    return s


def rhs(state: LatticeState, pot: Potential, params: ModelParams) -> np.ndarray:
    """``dq/dt = -i [eps (q_{j-1}+q_{j+1}) + v_j q_j + delta |q_j|^2 q_j]``."""
    _check_window(state, pot)
    q = state.amplitudes
    a = q.real**2 + q.imag**2
    return -1j * (params.epsilon * _neighbour_sum(q, params.boundary)
                  + (pot.values + params.delta * a) * q)


def hamiltonian_energy(state: LatticeState, pot: Potential, params: ModelParams) -> float:
    """``H = 1/2 (sum v|q|^2 + eps sum (conj(q_j) q_{j+1} + c.c.) + delta/2 sum |q|^4)``.

    With this normalisation the equation of motion is ``i dq/dt = 2 dH/d conj(q)``.
    """
    _check_window(state, pot)
    q = state.amplitudes
    a = q.real**2 + q.imag**2
    bonds = np.conj(q[:-1]) * q[1:]
    hop = 2.0 * float(np.sum(bonds.real))
    if params.boundary == "periodic" and q.shape[0] > 2:
        hop += 2.0 * float((np.conj(q[-1]) * q[0]).real)
    return 0.5 * (float(np.dot(pot.values, a)) + params.epsilon * hop
                  + 0.5 * params.delta * float(np.dot(a, a)))


def hopping_stencil(a: float, tol: float = STENCIL_TOL) -> np.ndarray:
    """Coefficients ``c_m = (-i)^m J_m(2a)``, ``m = 0..M``, of ``exp(-i a T)``.

    ``M`` is the first order past ``|2a|`` after which ``|J_m(2a)| < tol``.
    """
    x = 2.0 * a
    coeffs = [complex(jv(0, x))]
    m = 0
    while True:
        m += 1
        c = jv(m, x)
        if m > abs(x) and abs(c) < tol:
            break
        coeffs.append(complex((-1j) ** m * c))
    return np.array(coeffs, dtype=np.complex128)


def _stencil_apply(q: np.ndarray, c: np.ndarray, periodic: bool) -> np.ndarray:
    L = q.shape[0]
    M = c.shape[0] - 1
    buf = np.zeros(L + 2 * M, np.complex128)
    buf[M:M + L] = q
    if periodic:
        for m in range(1, M + 1):
            buf[M - m] = q[(-m) % L]
            buf[M + L - 1 + m] = q[(L - 1 + m) % L]
    else:
        # odd reflection about the ghost sites -1 and L
        for m in range(2, M + 1):
            if m - 2 < L:
                buf[M - m] = -q[m - 2]
                buf[M + L - 1 + m] = -q[L - m + 1]
    out = c[0] * q
    for m in range(1, M + 1):
        out = out + c[m] * (buf[M - m:M - m + L] + buf[M + m:M + m + L])
    return out


def _spectral_hop(q: np.ndarray, a: float, periodic: bool) -> np.ndarray:
    L = q.shape[0]
    if periodic:
        k = np.arange(L)
        phase = np.exp(-1j * a * 2.0 * np.cos(2.0 * np.pi * k / L))
        return np.fft.ifft(phase * np.fft.fft(q))
    p = np.arange(1, L + 1)
    phase = np.exp(-1j * a * 2.0 * np.cos(np.pi * p / (L + 1)))
    fwd = scipy.fft.dst(q, type=1, norm="ortho")
    return scipy.fft.dst(phase * fwd, type=1, norm="ortho")


def _stencil_ok(M: int, L: int, periodic: bool) -> bool:
    return (2 * M + 1 <= L) if periodic else (M <= L)


def hopping_flow(q: np.ndarray, epsilon: float, h: float, boundary: str = "periodic",
                 method: str = "stencil") -> np.ndarray:
    """Exact solution of ``i dq/dt = eps (q_{j-1}+q_{j+1})`` over time ``h``."""
    periodic = boundary == "periodic"
    a = epsilon * h
    if method == "stencil":
        c = hopping_stencil(a)
        if _stencil_ok(c.shape[0] - 1, q.shape[0], periodic):
            return _stencil_apply(np.asarray(q, np.complex128), c, periodic)
        method = "spectral"
    if method == "spectral":
        return _spectral_hop(np.asarray(q, np.complex128), a, periodic)
    raise ValueError(f"unknown method {method!r}")


def onsite_flow(q: np.ndarray, v: np.ndarray, delta: float, h: float) -> np.ndarray:
    a = q.real**2 + q.imag**2
    return np.exp(-1j * (v + delta * a) * h) * q


def step_strang(state: LatticeState, pot: Potential, params: ModelParams,
                dt: float | None = None) -> LatticeState:
    """One ``A(dt/2) B(dt) A(dt/2)`` step; a negative ``dt`` runs the step backwards."""
    _check_window(state, pot)
    h = params.dt if dt is None else float(dt)
    q = onsite_flow(state.amplitudes, pot.values, params.delta, 0.5 * h)
    q = hopping_flow(q, params.epsilon, h, params.boundary)
    q = onsite_flow(q, pot.values, params.delta, 0.5 * h)
    return state.with_amplitudes(q, state.time + h)


@numba.njit(cache=True)
def _strang_kernel(q, v, delta, dt, c, nsteps, periodic):  # pragma: no cover - compiled
    L = q.shape[0]
    M = c.shape[0] - 1
    buf = np.zeros(L + 2 * M, np.complex128)
    h = 0.5 * dt
    for j in range(L):
        x = q[j].real
        y = q[j].imag
        th = (v[j] + delta * (x * x + y * y)) * h
        q[j] = q[j] * complex(math.cos(th), -math.sin(th))
    for s in range(nsteps):
        for j in range(L):
            buf[M + j] = q[j]
        if periodic:
            for m in range(1, M + 1):
                buf[M - m] = q[(L - m) % L]
                buf[M + L - 1 + m] = q[(m - 1) % L]
        else:
            for m in range(2, M + 1):
                buf[M - m] = -q[m - 2]
                buf[M + L - 1 + m] = -q[L - m + 1]
        h = dt if s < nsteps - 1 else 0.5 * dt
        for j in range(L):
            acc = c[0] * buf[M + j]
            for m in range(1, M + 1):
                acc += c[m] * (buf[M + j - m] + buf[M + j + m])
            x = acc.real
            y = acc.imag
            th = (v[j] + delta * (x * x + y * y)) * h
            q[j] = acc * complex(math.cos(th), -math.sin(th))
    return q


def advance(state: LatticeState, pot: Potential, params: ModelParams, nsteps: int) -> LatticeState:
    """``nsteps`` Strang steps with the interior half-steps of ``A`` fused."""
    _check_window(state, pot)
    if nsteps < 0:
        raise ValueError("nsteps must be non-negative")
    if nsteps == 0:
        return state
    periodic = params.boundary == "periodic"
    c = hopping_stencil(params.epsilon * params.dt)
    q = np.array(state.amplitudes, dtype=np.complex128)
    if _stencil_ok(c.shape[0] - 1, q.shape[0], periodic):
        q = _strang_kernel(q, pot.values, float(params.delta), float(params.dt), c,
                           int(nsteps), periodic)
        return state.with_amplitudes(q, state.time + nsteps * params.dt)
    for _ in range(nsteps):
        state = step_strang(state, pot, params)
    return state


def log_sample_grid(t_final: float, dt: float, per_decade: int = 32, t_min: float | None = None) -> np.ndarray:
    """``0`` followed by log-spaced times in ``[t_min, t_final]`` snapped to multiples of ``dt``."""
    if t_final <= 0:
        return np.array([0.0])
    t_min = dt if t_min is None else max(t_min, dt)
    if t_min >= t_final:
        pts = np.array([t_final])
    else:
        n = max(2, int(math.ceil(per_decade * math.log10(t_final / t_min))) + 1)
        pts = np.logspace(math.log10(t_min), math.log10(t_final), n)
    steps = np.unique(np.round(pts / dt).astype(np.int64))
    steps = steps[steps > 0]
    return np.concatenate([[0.0], steps * dt])


def boundary_mass_fraction(state: LatticeState, width: int) -> float:
    q = state.amplitudes
    a = q.real**2 + q.imag**2
    total = float(np.sum(a))
    if total == 0.0:
        return 0.0
    return float(np.sum(a[:width]) + np.sum(a[-width:])) / total


def _default_boundary_width(W: int) -> int:
    return max(1, min(W, max(8, W // 16)))


def integrate(state: LatticeState, pot: Potential, params: ModelParams, t_final: float,
              sample_grid=None, *, tail_j0: int | None = None,
              boundary_fraction: float = 1e-6, boundary_width: int | None = None,
              metadata: dict | None = None, return_state: bool = False):
    """Evolve to ``t_final`` recording ``D``, l2 mass, energy and tail mass on the grid.

    Sample times are snapped to whole steps. Raises :class:`BoundaryMassError`
    when the outer ``boundary_width`` sites on either side carry more than
    ``boundary_fraction`` of the mass at a sample time.
    """
    _check_window(state, pot)
    dt = params.dt
    n_total = int(round(t_final / dt))
    if abs(n_total * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise ValueError("t_final must be a multiple of dt")
    if sample_grid is None:
        sample_grid = log_sample_grid(t_final, dt)
    grid = np.asarray(sample_grid, dtype=float)
    if grid.size == 0 or np.any(grid < 0) or np.any(grid > t_final + 1e-12) or np.any(np.diff(grid) < 0):
        raise ValueError("sample_grid must be ascending within [0, t_final]")
    steps = np.unique(np.round(grid / dt).astype(np.int64))
    W = state.window_radius
    j0 = tail_j0 if tail_j0 is not None else max(1, W // 2)
    width = boundary_width if boundary_width is not None else _default_boundary_width(W)
    rows = []
    current = 0
    for n in steps:
        state = advance(state, pot, params, int(n - current))
        current = int(n)
        t = current * dt
        frac = boundary_mass_fraction(state, width)
        if frac > boundary_fraction:
            raise BoundaryMassError(t, frac, boundary_fraction, width)
        rows.append((t, diffusion_moment(state), state.mass(),
                     hamiltonian_energy(state, pot, params), tail_mass(state, j0)))
    arr = np.array(rows, dtype=float)
    meta = {"seed": pot.seed, "epsilon": params.epsilon, "delta": params.delta,
            "window_radius": W, "dt": dt, "j0": j0, "boundary": params.boundary}
    meta.update(metadata or {})
    trace = DiffusionTrace(*arr.T, metadata=meta)
    if return_state:
        return trace, state
    return trace


def exact_onsite_solution(q0: LatticeState, pot: Potential, delta: float, t: float) -> LatticeState:
    """Closed form of the ``eps = 0`` flow: each site only rotates its phase."""
    _check_window(q0, pot)
    q = q0.amplitudes
    a = q.real**2 + q.imag**2
    return q0.with_amplitudes(np.exp(-1j * (pot.values + delta * a) * t) * q, q0.time + t)


class LinearPropagator:
    """Dense eigendecomposition of ``(H0 q)_j = eps (q_{j-1}+q_{j+1}) + v_j q_j``."""

    def __init__(self, pot: Potential, epsilon: float, boundary: str = "periodic"):
        if pot.window_radius > DENSE_WINDOW_LIMIT:
            raise ValueError(f"window radius {pot.window_radius} too large for dense solve "
                             f"(limit {DENSE_WINDOW_LIMIT})")
        if boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        v = pot.values
        L = v.shape[0]
        off = np.full(L - 1, float(epsilon))
        if boundary == "dirichlet" or L <= 2:
            self.energies, self.vectors = scipy.linalg.eigh_tridiagonal(v, off)
        else:
            H = np.diag(v) + np.diag(off, 1) + np.diag(off, -1)
            H[0, -1] = H[-1, 0] = epsilon
            self.energies, self.vectors = np.linalg.eigh(H)
        self.pot = pot
        self.epsilon = epsilon
        self.boundary = boundary

    def evolve(self, q0: LatticeState, t: float) -> LatticeState:
        _check_window(q0, self.pot)
        c = self.vectors.T @ q0.amplitudes
        q = self.vectors @ (np.exp(-1j * self.energies * t) * c)
        return q0.with_amplitudes(q, q0.time + t)


def exact_linear_solution(q0: LatticeState, pot: Potential, epsilon: float, t: float,
                          boundary: str = "periodic") -> LatticeState:
    """``exp(-i t H0) q0`` by dense diagonalisation (window radius <= 2048)."""
    return LinearPropagator(pot, epsilon, boundary).evolve(q0, t)
