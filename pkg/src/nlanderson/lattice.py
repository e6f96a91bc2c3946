"""Lattice wavefunctions on a finite window and their diffusion observables.

A state lives on the sites ``j = -W, ..., W`` and is stored as one dense
complex array; index ``i`` of the array holds site ``i - W``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "LatticeState",
    "DiffusionTrace",
    "TAME_CONSTANT_BASE",
    "tame_constant",
    "diffusion_moment",
    "sobolev_norm_sq",
    "tail_mass",
    "convolve",
    "convolution_tame_check",
    "self_convolution_bound",
    "save_state_csv",
    "load_state_csv",
    "save_state_npz",
    "load_state_npz",
]

# C(s) = 2**(s + 1) in the tame inequality; a testing constant, not a sharp one.
TAME_CONSTANT_BASE = 2.0


def tame_constant(s: float) -> float:
    return TAME_CONSTANT_BASE ** (s + 1.0)


@dataclass(frozen=True, eq=False)
class LatticeState:
    """Complex amplitudes ``q_j`` on the window ``[-W, W]`` at a given time.

    Sites outside the window are zero by construction.
    """

    window_radius: int
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        W = int(self.window_radius)
        if W < 0:
            raise ValueError("window_radius must be non-negative")
        q = np.array(self.amplitudes, dtype=np.complex128)
        if q.shape != (2 * W + 1,):
            raise ValueError(
                f"amplitudes must have shape ({2 * W + 1},) for window radius {W}, got {q.shape}"
            )
        q.setflags(write=False)
        object.__setattr__(self, "window_radius", W)
        object.__setattr__(self, "amplitudes", q)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def zeros(cls, window_radius: int, time: float = 0.0) -> "LatticeState":
        return cls(window_radius, np.zeros(2 * window_radius + 1, np.complex128), time)

    @classmethod
    def from_sites(cls, window_radius: int, values: dict, time: float = 0.0) -> "LatticeState":
        """Build a state from a ``{site: amplitude}`` mapping."""
        q = np.zeros(2 * window_radius + 1, np.complex128)
        for j, a in values.items():
            if abs(j) > window_radius:
                raise ValueError(f"site {j} outside window [-{window_radius}, {window_radius}]")
            q[j + window_radius] = a
        return cls(window_radius, q, time)

    @classmethod
    def delta(cls, window_radius: int, site: int = 0) -> "LatticeState":
        """Unit mass at one site (the ``q(0) = delta_0`` datum for ``site=0``)."""
        return cls.from_sites(window_radius, {site: 1.0})

    @property
    def sites(self) -> np.ndarray:
        W = self.window_radius
        return np.arange(-W, W + 1)

    @property
    def size(self) -> int:
        return self.amplitudes.shape[0]

    def __getitem__(self, site: int) -> complex:
        if abs(site) > self.window_radius:
            return 0j
        return complex(self.amplitudes[site + self.window_radius])

    def mass(self) -> float:
        """The l2 mass ``sum |q_j|^2``."""
        q = self.amplitudes
        return float(np.sum(q.real**2 + q.imag**2))

    def with_amplitudes(self, amplitudes, time: float | None = None) -> "LatticeState":
        return LatticeState(self.window_radius, amplitudes, self.time if time is None else time)

    def extended(self, window_radius: int) -> "LatticeState":
        """Zero-pad (or restrict, if the dropped sites are zero) to a new window."""
        W0, W1 = self.window_radius, int(window_radius)
        q = np.zeros(2 * W1 + 1, np.complex128)
        if W1 >= W0:
            q[W1 - W0 : W1 + W0 + 1] = self.amplitudes
        else:
            drop = np.concatenate([self.amplitudes[: W0 - W1], self.amplitudes[W0 + W1 + 1 :]])
            if np.any(drop != 0):
                raise ValueError("cannot shrink window: state has mass on dropped sites")
            q[:] = self.amplitudes[W0 - W1 : W0 + W1 + 1]
        return LatticeState(W1, q, self.time)


def _abs2(q: np.ndarray) -> np.ndarray:
    return q.real**2 + q.imag**2


def diffusion_moment(state: LatticeState) -> float:
    """Second moment ``D = sum_j j^2 |q_j|^2``."""
    j = state.sites.astype(float)
    return float(np.sum(j * j * _abs2(state.amplitudes)))


def sobolev_norm_sq(state: LatticeState, s: float) -> float:
    """Squared homogeneous norm ``sum_j |j|^(2s) |q_j|^2``.

    The origin contributes ``|q_0|^2`` for ``s == 0`` and nothing for ``s > 0``.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    a = _abs2(state.amplitudes)
    if s == 0:
        return float(np.sum(a))
    return float(np.sum(_weights(state.sites, s) * a))


def _weights(sites: np.ndarray, s: float) -> np.ndarray:
    j = np.abs(sites).astype(float)
    w = j ** (2.0 * s)
    if s > 0:
        w[j == 0] = 0.0
    return w


def tail_mass(state: LatticeState, j0: int) -> float:
    """Mass beyond ``|k| > j0``."""
    if j0 <= 0:
        raise ValueError("j0 must be positive")
    if j0 > state.window_radius:
        raise ValueError(f"j0={j0} exceeds window radius {state.window_radius}")
    W = state.window_radius
    q = state.amplitudes
    return float(np.sum(_abs2(q[: W - j0])) + np.sum(_abs2(q[W + j0 + 1 :])))


def convolve(p: LatticeState, q: LatticeState) -> LatticeState:
    """Lattice convolution ``(p*q)_j = sum_i p_{j-i} q_i``; lives on ``[-(Wp+Wq), Wp+Wq]``."""
    out = np.convolve(p.amplitudes, q.amplitudes)
    return LatticeState(p.window_radius + q.window_radius, out)


def _hs_norm(state: LatticeState, s: float) -> float:
    return float(np.sqrt(sobolev_norm_sq(state, s)))


def convolution_tame_check(p: LatticeState, q: LatticeState, s: float) -> tuple[float, float]:
    """Both sides of the tame inequality for the convolution ``p*q``.

    Returns ``(lhs, rhs)`` with ``lhs = ||p*q||_{H^s}`` and
    ``rhs = C(s) (||p||_{H^s} ||q||_{H^1} + ||p||_{H^1} ||q||_{H^s})``,
    ``C(s) = 2**(s+1)``.  With the homogeneous norm the inequality can fail
    for states carrying mass at the origin; callers use it as an oracle on
    states supported away from 0.
    """
    lhs = _hs_norm(convolve(p, q), s)
    rhs = tame_constant(s) * (
        _hs_norm(p, s) * _hs_norm(q, 1.0) + _hs_norm(p, 1.0) * _hs_norm(q, s)
    )
    return lhs, rhs


def self_convolution_bound(q: LatticeState, s: float, j0: int) -> tuple[float, float]:
    """``(||q*q||_{H^s}, C(s) j0^(1-s) ||q||_{H^s}^2)`` for ``q`` vanishing on ``|j| <= j0``.

    The bound holds for ``s >= 1``.
    """
    inner = np.abs(q.sites) <= j0
    if np.any(q.amplitudes[inner] != 0):
        raise ValueError(f"state must vanish on |j| <= {j0}")
    lhs = _hs_norm(convolve(q, q), s)
    rhs = tame_constant(s) * float(j0) ** (1.0 - s) * sobolev_norm_sq(q, s)
    return lhs, rhs


@dataclass
class DiffusionTrace:
    """Observables sampled along one trajectory."""

    sample_times: np.ndarray
    diffusion_values: np.ndarray
    l2_values: np.ndarray
    energy_values: np.ndarray
    tail_values: np.ndarray
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("t", "D", "l2", "energy", "tail")

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in
                  (self.sample_times, self.diffusion_values, self.l2_values,
                   self.energy_values, self.tail_values)]
        n = arrays[0].shape[0]
        if any(a.shape != (n,) for a in arrays):
            raise ValueError("trace arrays must share one length")
        if n > 1 and np.any(np.diff(arrays[0]) <= 0):
            raise ValueError("sample_times must be strictly increasing")
        (self.sample_times, self.diffusion_values, self.l2_values,
         self.energy_values, self.tail_values) = arrays

    def __len__(self) -> int:
        return self.sample_times.shape[0]

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.sample_times, self.diffusion_values, self.l2_values,
                                self.energy_values, self.tail_values])

    def write_csv(self, path) -> None:
        """CSV with header ``t,D,l2,energy,tail``; floats written with ``repr``."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.as_array():
                w.writerow([repr(float(x)) for x in row])
        tmp.replace(path)

    @classmethod
    def read_csv(cls, path, metadata: dict | None = None) -> "DiffusionTrace":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected trace header {header}")
            rows = np.array([[float(x) for x in row] for row in r], dtype=float).reshape(-1, 5)
        return cls(*rows.T, metadata=dict(metadata or {}))


def save_state_csv(state: LatticeState, path) -> None:
    """Checkpoint as CSV rows ``site,re,im`` after a ``# time=...`` comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# window_radius={state.window_radius} time={state.time!r}\n")
        w = csv.writer(fh)
        w.writerow(("site", "re", "im"))
        for j, a in zip(state.sites, state.amplitudes):
            w.writerow((int(j), repr(float(a.real)), repr(float(a.imag))))


def load_state_csv(path) -> LatticeState:
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = dict(kv.split("=") for kv in first.lstrip("#").split())
        r = csv.reader(fh)
        next(r)
        W = int(meta["window_radius"])
        q = np.zeros(2 * W + 1, np.complex128)
        for site, re, im in r:
            q[int(site) + W] = complex(float(re), float(im))
    return LatticeState(W, q, float(meta["time"]))


def save_state_npz(state: LatticeState, path) -> None:
    """Binary checkpoint: ``sites``, ``re``, ``im`` arrays plus window and time."""
    np.savez(path, sites=state.sites, re=state.amplitudes.real, im=state.amplitudes.imag,
             window_radius=state.window_radius, time=state.time)


def load_state_npz(path) -> LatticeState:
    with np.load(path) as z:
        return LatticeState(int(z["window_radius"]), z["re"] + 1j * z["im"], float(z["time"]))
