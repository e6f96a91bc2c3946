"""Random on-site frequencies and the small-divisor (non-resonance) test.

Site values are drawn from a Philox counter-based stream keyed by the seed;
site ``j`` always reads the first word of counter block ``2**63 + j``, so a
value never depends on the window it was sampled in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "GENERATOR_ID",
    "Potential",
    "sample_potential",
    "uniform_at_sites",
    "integer_vector",
    "vector_diameter",
    "vector_norm",
    "small_divisor",
    "nonresonance_threshold",
    "check_nonresonance",
    "save_potential_csv",
    "load_potential_csv",
]

GENERATOR_ID = "philox4x64/site-block"
_SITE_OFFSET = 2**63


def uniform_at_sites(seed: int, first_site: int, count: int) -> np.ndarray:
    """Uniform [0, 1) draws for the consecutive sites ``first_site .. first_site+count-1``."""
    bg = np.random.Philox(key=int(seed) % 2**64)
    bg.advance(_SITE_OFFSET + int(first_site))
    raw = bg.random_raw(4 * count)[::4]
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True, eq=False)
class Potential:
    """Frequencies ``v_j`` on ``[-W, W]`` (array index ``j + W``)."""

    window_radius: int
    values: np.ndarray
    seed: int | None = None
    generator_id: str = GENERATOR_ID

    def __post_init__(self):
        W = int(self.window_radius)
        v = np.array(self.values, dtype=float)
        if v.shape != (2 * W + 1,):
            raise ValueError(f"values must have shape ({2 * W + 1},)")
        v.setflags(write=False)
        object.__setattr__(self, "window_radius", W)
        object.__setattr__(self, "values", v)

    @property
    def sites(self) -> np.ndarray:
        return np.arange(-self.window_radius, self.window_radius + 1)

    def __getitem__(self, site: int) -> float:
        if abs(site) > self.window_radius:
            raise KeyError(f"site {site} outside window")
        return float(self.values[site + self.window_radius])

    def __contains__(self, site: int) -> bool:
        return abs(site) <= self.window_radius

    def shifted(self, shifts: Mapping[int, float], tag: str = "shifted") -> "Potential":
        """A copy with ``v_j += shifts[j]``; used for the normal-form frequencies ``V_s``."""
        v = self.values.copy()
        for j, dv in shifts.items():
            v[j + self.window_radius] += dv
        return Potential(self.window_radius, v, self.seed, f"{self.generator_id}+{tag}")

    def with_values(self, values: Mapping[int, float], tag: str = "edited") -> "Potential":
        v = self.values.copy()
        for j, x in values.items():
            v[j + self.window_radius] = x
        return Potential(self.window_radius, v, self.seed, f"{self.generator_id}+{tag}")


def sample_potential(seed: int, window_radius: int) -> Potential:
    """I.i.d. uniform [0, 1] frequencies on ``[-W, W]``, reproducible from ``seed``."""
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    v = uniform_at_sites(seed, -window_radius, 2 * window_radius + 1)
    return Potential(window_radius, v, int(seed), GENERATOR_ID)


def integer_vector(entries: Mapping[int, int]) -> dict[int, int]:
    """Drop zero entries from a ``{site: k_j}`` map."""
    return {int(j): int(k) for j, k in entries.items() if k != 0}


def vector_diameter(k: Mapping[int, int]) -> int:
    sites = [j for j, x in k.items() if x != 0]
    return max(sites) - min(sites) if sites else 0


def vector_norm(k: Mapping[int, int]) -> int:
    return sum(abs(x) for x in k.values())


def small_divisor(pot: Potential, k: Mapping[int, int]) -> float:
    """``sum_j k_j v_j``."""
    k = integer_vector(k)
    if not k:
        raise ValueError("divisor vector must be nonzero")
    return float(sum(x * pot[j] for j, x in sorted(k.items())))


def nonresonance_threshold(gamma: float, diameter: int, norm: int) -> float:
    """``gamma / (max(Delta,1)^2 |k|^(Delta+2))``.

    ``Delta = 0`` would zero the denominator; it is raised to 1 there.
    """
    d = max(int(diameter), 1)
    return gamma / (d * d * float(norm) ** (diameter + 2))


def check_nonresonance(pot: Potential, k: Mapping[int, int], gamma: float) -> bool:
    """True when ``|sum k_j v_j|`` reaches the non-resonance threshold for ``k``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    k = integer_vector(k)
    thr = nonresonance_threshold(gamma, vector_diameter(k), vector_norm(k))
    return abs(small_divisor(pot, k)) >= thr


def save_potential_csv(pot: Potential, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# seed={pot.seed} generator={pot.generator_id}\n")
        fh.write("site,value\n")
        for j, v in zip(pot.sites, pot.values):
            fh.write(f"{int(j)},{float(v)!r}\n")


def load_potential_csv(path) -> Potential:
    with open(path) as fh:
        meta = dict(kv.split("=", 1) for kv in fh.readline().lstrip("#").split())
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    sites = np.array([int(r[0]) for r in rows])
    vals = np.array([float(r[1]) for r in rows])
    W = int(sites.max())
    seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
    return Potential(W, vals[np.argsort(sites)], seed, meta.get("generator", GENERATOR_ID))
