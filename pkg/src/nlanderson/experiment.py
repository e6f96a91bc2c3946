"""Experiment configuration, seed ensembles, power-law fits and plots.

A configuration is a flat ``key = value`` text file; every key of
:class:`ExperimentConfig` may appear, lists are comma separated and
``#`` starts a comment.  Ensemble runs write one CSV per seed plus a JSON
sidecar carrying the configuration hash, so an interrupted run restarts
where it stopped.
"""
from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    BOUNDARIES, BoundaryMassError, LinearPropagator, ModelParams, _default_boundary_width,
    boundary_mass_fraction, hamiltonian_energy, integrate, log_sample_grid,
)
from .lattice import (
    DiffusionTrace, LatticeState, diffusion_moment, self_convolution_bound, tail_mass,
)
from .potential import sample_potential

__all__ = [
    "ConfigError",
    "FitError",
    "ExperimentConfig",
    "parse_seeds",
    "EnsembleResult",
    "run_seed",
    "run_ensemble",
    "linear_trace",
    "ensemble_quartiles",
    "PowerLawFit",
    "fit_power_law",
    "TailRate",
    "tail_rate_check",
    "emit_plots",
    "tame_check",
]

log = logging.getLogger(__name__)

MODES = ("simulate", "normal-form", "measure", "fit", "tame-check")
PROPAGATORS = ("split", "exact")


class ConfigError(ValueError):
    pass


class FitError(ValueError):
    pass


def parse_seeds(text) -> tuple[int, ...]:
    """``"0-19"``, ``"1,5,7"`` or a mix such as ``"0-3,10"``; an int ``n`` means ``0..n-1``."""
    if isinstance(text, int):
        return tuple(range(text))
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            try:
                out.extend(range(int(a), int(b) + 1))
            except ValueError as exc:
                raise ConfigError(f"bad seed range {part!r}") from exc
        else:
            out.append(int(part))
    return tuple(out)


@dataclass
class ExperimentConfig:
    """All run parameters; see the module docstring for the file format."""

    mode: str = "simulate"
    # model
    epsilon: float = 0.05
    delta: float = 0.05
    window: int = 1024
    dt: float = 0.01
    boundary: str = "periodic"
    propagator: str = "split"
    # disorder and observables
    seeds: tuple = tuple(range(20))
    t_final: float = 1.0e4
    per_decade: int = 32
    t_min: float = 0.0
    tail_j0: tuple = ()
    initial_site: int = 0
    boundary_fraction: float = 1e-6
    # fitting
    fit_t_min: float = 100.0
    fit_t_max: float = 0.0
    # normal form
    tau: float = 0.009
    kappa: float = 1.0
    j0: int = 40
    degree_cap: int = 0
    window_constant: float = 20.0
    steps: int = 0
    # measure
    samples: int = 100_000
    # tame check
    tame_s: float = 2.0
    tame_states: int = 100
    # output
    outdir: str = "runs/default"
    workers: int = 1

    _LISTS = ("seeds", "tail_j0")

    def __post_init__(self):
        self.seeds = parse_seeds(self.seeds)
        self.tail_j0 = tuple(int(x) for x in (self.tail_j0 if not isinstance(self.tail_j0, str)
                                              else [s for s in self.tail_j0.split(",") if s.strip()]))

    # -- validation
    def validate(self) -> "ExperimentConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}")
        need(self.epsilon >= 0 and self.delta >= 0, "epsilon and delta must be >= 0")
        need(self.window >= 1, "window must be >= 1")
        need(self.dt > 0, "dt must be > 0")
        need(self.boundary in BOUNDARIES, f"boundary must be one of {BOUNDARIES}")
        need(self.propagator in PROPAGATORS, f"propagator must be one of {PROPAGATORS}")
        need(self.propagator != "exact" or self.delta == 0, "exact propagator needs delta = 0")
        need(len(self.seeds) > 0, "need at least one seed")
        need(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        need(self.t_final >= 0, "t_final must be >= 0")
        need(self.propagator == "exact" or abs(round(self.t_final / self.dt) * self.dt - self.t_final)
             <= 1e-9 * max(1.0, self.t_final), "t_final must be a multiple of dt")
        need(self.per_decade >= 1, "per_decade must be >= 1")
        need(abs(self.initial_site) <= self.window, "initial_site outside the window")
        need(all(0 <= j <= self.window for j in self.tail_j0), "tail_j0 entries must lie in [0, window]")
        need(0 < self.tau < 0.01, "tau must lie in (0, 1/100)")
        need(self.kappa > 0, "kappa must be > 0")
        need(self.j0 >= 1, "j0 must be >= 1")
        need(self.degree_cap >= 0 and self.steps >= 0, "degree_cap and steps must be >= 0")
        need(self.samples >= 1000, "samples must be >= 1000")
        need(self.tame_s >= 1, "tame_s must be >= 1")
        need(self.tame_states >= 1, "tame_states must be >= 1")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.fit_t_min >= 0 and self.fit_t_max >= 0, "fit window must be >= 0")
        return self

    # -- text format
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in self._LISTS:
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw = {}
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        return cls().with_overrides(raw)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with string (or typed) values replacing the named keys."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        kw = {}
        for k, v in overrides.items():
            key = k.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {k!r}")
            default = getattr(ExperimentConfig(), key)
            try:
                if key in self._LISTS:
                    kw[key] = v
                elif isinstance(default, bool):
                    kw[key] = str(v).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kw[key] = int(v)
                elif isinstance(default, float):
                    kw[key] = float(v)
                else:
                    kw[key] = str(v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {v!r}") from exc
        try:
            return dataclasses.replace(self, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def run_hash(self) -> str:
        """SHA-256 over the keys that change a single-seed trace."""
        keys = ("epsilon", "delta", "window", "dt", "boundary", "propagator", "t_final",
                "per_decade", "t_min", "tail_j0", "initial_site", "boundary_fraction")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def sample_grid(self) -> np.ndarray:
        t_min = self.t_min if self.t_min > 0 else None
        return log_sample_grid(self.t_final, self.dt, self.per_decade, t_min)


# ---------------------------------------------------------------- ensembles

def linear_trace(state: LatticeState, pot, epsilon: float, grid, *, boundary: str = "periodic",
                 tail_j0: int | None = None, boundary_fraction: float | None = None,
                 boundary_width: int | None = None, metadata: dict | None = None) -> DiffusionTrace:
    """:class:`DiffusionTrace` of the ``delta = 0`` flow from the dense eigendecomposition.

    With ``boundary_fraction`` set, the edge mass is checked at every sample
    as in :func:`~nlanderson.dynamics.integrate`.
    """
    prop = LinearPropagator(pot, epsilon, boundary)
    params = ModelParams(epsilon, 0.0, 1.0, boundary)
    W = state.window_radius
    j0 = tail_j0 if tail_j0 is not None else max(1, W // 2)
    width = boundary_width if boundary_width is not None else _default_boundary_width(W)
    rows = []
    for t in np.asarray(grid, dtype=float):
        q = prop.evolve(state, float(t))
        if boundary_fraction is not None:
            frac = boundary_mass_fraction(q, width)
            if frac > boundary_fraction:
                raise BoundaryMassError(float(t), frac, boundary_fraction, width)
        rows.append((t, diffusion_moment(q), q.mass(), hamiltonian_energy(q, pot, params), tail_mass(q, j0)))
    meta = {"seed": pot.seed, "epsilon": epsilon, "delta": 0.0, "window_radius": W, "dt": None,
            "j0": j0, "boundary": boundary, "propagator": "exact"}
    meta.update(metadata or {})
    return DiffusionTrace(*np.array(rows, dtype=float).T, metadata=meta)


def _trace_paths(outdir: Path, seed: int):
    base = outdir / "traces" / f"seed_{seed:06d}"
    return base.with_suffix(".csv"), base.with_suffix(".json")


def run_seed(config: ExperimentConfig, seed: int) -> DiffusionTrace:
    """One trajectory from the unit datum at ``config.initial_site``."""
    pot = sample_potential(seed, config.window)
    q0 = LatticeState.delta(config.window, config.initial_site)
    grid = config.sample_grid()
    tail = config.tail_j0[0] if config.tail_j0 else None
    meta = {"config_hash": config.run_hash()}
    if config.propagator == "exact":
        return linear_trace(q0, pot, config.epsilon, grid, boundary=config.boundary, tail_j0=tail,
                            boundary_fraction=config.boundary_fraction, metadata=meta)
    params = ModelParams(config.epsilon, config.delta, config.dt, config.boundary)
    return integrate(q0, pot, params, config.t_final, grid, tail_j0=tail,
                     boundary_fraction=config.boundary_fraction, metadata=meta)


def _seed_job(config: ExperimentConfig, seed: int, outdir: str):
    csv_path, json_path = _trace_paths(Path(outdir), seed)
    side = {"seed": seed, "config_hash": config.run_hash()}
    try:
        trace = run_seed(config, seed)
    except (BoundaryMassError, ArithmeticError, ValueError, RuntimeError) as exc:
        side.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        _write_json(json_path, side)
        return seed, None, side["error"]
    trace.write_csv(csv_path)
    side.update(status="ok", metadata=trace.metadata, rows=len(trace))
    _write_json(json_path, side)
    return seed, str(csv_path), None


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    tmp.replace(path)


@dataclass
class EnsembleResult:
    traces: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def ordered(self) -> list[DiffusionTrace]:
        return [self.traces[s] for s in sorted(self.traces)]


def _completed(config: ExperimentConfig, outdir: Path, seed: int):
    csv_path, json_path = _trace_paths(outdir, seed)
    if not (csv_path.exists() and json_path.exists()):
        return None
    try:
        side = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if side.get("status") != "ok" or side.get("config_hash") != config.run_hash():
        return None
    return DiffusionTrace.read_csv(csv_path, side.get("metadata"))


def run_ensemble(config: ExperimentConfig, *, workers: int | None = None,
                 outdir=None) -> EnsembleResult:
    """Run (or resume) every seed; per-seed failures are recorded, not raised."""
    config.validate()
    out = Path(outdir if outdir is not None else config.outdir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    res = EnsembleResult()
    todo = []
    for seed in config.seeds:
        tr = _completed(config, out, seed)
        if tr is not None:
            res.traces[seed] = tr
            res.skipped.append(seed)
        else:
            todo.append(seed)
    if res.skipped:
        log.info("skipping %d completed seeds", len(res.skipped))
    workers = workers or config.workers
    if workers > 1 and len(todo) > 1:
        with cf.ProcessPoolExecutor(max_workers=min(workers, len(todo))) as pool:
            results = list(pool.map(_seed_job, [config] * len(todo), todo, [str(out)] * len(todo)))
    else:
        results = [_seed_job(config, s, str(out)) for s in todo]
    for seed, path, err in results:
        if err is not None:
            log.warning("seed %d failed: %s", seed, err)
            res.failures[seed] = err
        else:
            side = json.loads(_trace_paths(out, seed)[1].read_text())
            res.traces[seed] = DiffusionTrace.read_csv(path, side.get("metadata"))
    return res


def ensemble_quartiles(traces) -> dict:
    """``t`` and the 25/50/75 % quantiles of ``D`` over traces sharing one grid."""
    traces = list(traces.ordered() if isinstance(traces, EnsembleResult) else traces)
    if not traces:
        raise ValueError("no traces")
    t = traces[0].sample_times
    for tr in traces[1:]:
        if tr.sample_times.shape != t.shape or np.any(tr.sample_times != t):
            raise ValueError("traces do not share a sample grid")
    D = np.stack([tr.diffusion_values for tr in traces])
    q25, q50, q75 = np.quantile(D, [0.25, 0.5, 0.75], axis=0)
    return {"t": t, "q25": q25, "median": q50, "q75": q75, "n": len(traces)}


# ---------------------------------------------------------------- fitting and diagnostics

@dataclass(frozen=True)
class PowerLawFit:
    kappa: float
    stderr: float
    r2: float
    prefactor: float
    n: int
    t_min: float
    t_max: float

    def predict(self, t):
        """``prefactor * t^kappa``; NaN at ``t <= 0``."""
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, np.nan)
        pos = t > 0
        out[pos] = self.prefactor * t[pos] ** self.kappa
        return out


def _series(data):
    if isinstance(data, DiffusionTrace):
        return data.sample_times, data.diffusion_values
    if isinstance(data, (EnsembleResult, list)) and not isinstance(data, tuple):
        q = ensemble_quartiles(data)
        return q["t"], q["median"]
    if isinstance(data, dict):
        return np.asarray(data["t"]), np.asarray(data["median"])
    t, D = data
    return np.asarray(t, dtype=float), np.asarray(D, dtype=float)


def fit_power_law(data, t_min: float | None = None, t_max: float | None = None) -> PowerLawFit:
    """Least-squares slope of ``log D`` against ``log t``.

    ``data`` is a trace, an ensemble (its median is fitted), a quartile dict
    or a ``(t, D)`` pair.  The default window is the last two decades of the
    run with ``t >= 100``.
    """
    t, D = _series(data)
    t_max = float(t[-1]) if not t_max else float(t_max)
    t_min = max(100.0, t_max / 100.0) if t_min is None else float(t_min)
    sel = (t >= t_min * (1 - 1e-12)) & (t <= t_max * (1 + 1e-12)) & (t > 0)
    if np.count_nonzero(sel) < 10:
        raise FitError(f"need >= 10 samples in [{t_min}, {t_max}], have {int(np.count_nonzero(sel))}")
    ts, Ds = t[sel], D[sel]
    if np.any(~(Ds > 0)):
        raise FitError("D must be positive in the fit window")
    x, y = np.log(ts), np.log(Ds)
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    icpt = float(ym - slope * xm)
    resid = y - (icpt + slope * x)
    sse = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    stderr = math.sqrt(sse / (n - 2) / sxx)
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    return PowerLawFit(slope, stderr, r2, math.exp(icpt), n, t_min, t_max)


@dataclass(frozen=True)
class TailRate:
    max_rate: float
    bound: float
    j0: int
    times: np.ndarray
    rates: np.ndarray

    @property
    def within_bound(self) -> bool:
        return self.max_rate <= self.bound


def tail_rate_check(trace: DiffusionTrace, j0: int | None = None, kappa: float = 1.0) -> TailRate:
    """Central-difference ``d/dt`` of the tail mass beyond ``j0`` against ``j0^(-3/kappa)``."""
    tj = trace.metadata.get("j0")
    if j0 is None:
        if tj is None:
            raise ValueError("trace carries no tail j0")
        j0 = int(tj)
    elif tj is not None and int(tj) != int(j0):
        raise ValueError(f"trace tail mass is for j0={tj}, not {j0}")
    if len(trace) < 3:
        raise ValueError("need at least 3 samples to difference the tail mass")
    rates = np.gradient(trace.tail_values, trace.sample_times)
    return TailRate(float(np.max(rates)), float(j0) ** (-3.0 / kappa), int(j0), trace.sample_times, rates)


def emit_plots(ensemble, outdir, fit: PowerLawFit | None = None, name: str = "diffusion") -> list[Path]:
    """Aggregated CSV (t, quartiles, fitted line) and a log-log PNG."""
    traces = ensemble.ordered() if isinstance(ensemble, EnsembleResult) else list(ensemble)
    if not traces:
        raise ValueError("no traces")
    q = ensemble_quartiles(traces)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    fitted = fit.predict(q["t"]) if fit is not None else np.full_like(q["t"], np.nan)
    csv_path = out / f"{name}.csv"
    np.savetxt(csv_path, np.column_stack([q["t"], q["q25"], q["median"], q["q75"], fitted]),
               delimiter=",", header="t,q25,median,q75,fit", comments="", fmt="%.17g")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pos = q["t"] > 0
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(q["t"][pos], q["q25"][pos], q["q75"][pos], alpha=0.3, label="quartiles")
    ax.plot(q["t"][pos], q["median"][pos], lw=1.5, label=f"median of {q['n']}")
    if fit is not None:
        win = pos & (q["t"] >= fit.t_min) & (q["t"] <= fit.t_max)
        ax.plot(q["t"][win], fitted[win], "k--",
                label=f"fit t^{fit.kappa:.3f} ± {fit.stderr:.3f}")
    ax.set_xscale("log")
    if np.all(q["median"][pos] > 0):
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("D(t)")
    ax.legend()
    fig.tight_layout()
    png_path = out / f"{name}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


# ---------------------------------------------------------------- tame inequality

def tame_check(window: int, j0: int, s: float = 2.0, n_states: int = 100, seed: int = 0) -> list[dict]:
    """Self-convolution bound on random states supported on ``j0 < |j| <= window``.

    Each state gets Gaussian amplitudes on a random subset of the allowed sites.
    """
    if not 0 <= j0 < window:
        raise ValueError("need 0 <= j0 < window")
    rng = np.random.default_rng(seed)
    allowed = np.concatenate([np.arange(-window, -j0), np.arange(j0 + 1, window + 1)])
    rows = []
    for i in range(n_states):
        k = int(rng.integers(1, allowed.size + 1))
        sites = rng.choice(allowed, size=k, replace=False)
        vals = rng.standard_normal(k) + 1j * rng.standard_normal(k)
        q = LatticeState.from_sites(window, dict(zip(sites.tolist(), vals.tolist())))
        lhs, rhs = self_convolution_bound(q, s, j0)
        rows.append({"state": i, "support": k, "lhs": lhs, "rhs": rhs, "holds": lhs <= rhs})
    return rows
