import json

import numpy as np
import pytest

from nlanderson.dynamics import ModelParams, integrate
from nlanderson.experiment import (
    ConfigError, ExperimentConfig, FitError, emit_plots, ensemble_quartiles, fit_power_law,
    linear_trace, parse_seeds, run_ensemble, run_seed, tail_rate_check, tame_check,
)
from nlanderson.lattice import DiffusionTrace, LatticeState
from nlanderson.potential import sample_potential


def small_config(tmp_path, **kw):
    base = dict(epsilon=0.05, delta=0.05, window=32, dt=0.01, t_final=5.0, seeds="0-2",
                tail_j0="8", outdir=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


def synthetic_trace(t, D, j0=None):
    z = np.zeros_like(t)
    meta = {} if j0 is None else {"j0": j0}
    return DiffusionTrace(t, D, z + 1, z, z, metadata=meta)


# ---------------------------------------------------------------- config

def test_parse_seeds():
    assert parse_seeds("0-3,10") == (0, 1, 2, 3, 10)
    assert parse_seeds(3) == (0, 1, 2)
    assert parse_seeds("7") == (7,)
    with pytest.raises(ConfigError):
        parse_seeds("a-b")


def test_config_round_trip(tmp_path):
    c = ExperimentConfig(epsilon=0.1 + 1e-17, seeds="3,5-6", tail_j0="4,9", outdir="x/y", kappa=1 / 3)
    path = tmp_path / "c.txt"
    c.save(path)
    back = ExperimentConfig.load(path)
    assert back == c
    assert back.to_text() == c.to_text()


def test_config_file_comments_and_overrides():
    text = "# header\nepsilon = 0.2   # hopping\n\nwindow=64\nseeds = 0-4\n"
    c = ExperimentConfig.from_text(text)
    assert c.epsilon == 0.2 and c.window == 64 and c.seeds == (0, 1, 2, 3, 4)
    d = c.with_overrides({"window": "128", "t-final": "10"})
    assert d.window == 128 and d.t_final == 10.0 and c.window == 64


@pytest.mark.parametrize("bad", [
    {"window": "0"}, {"dt": "-1"}, {"boundary": "open"}, {"tau": "0.5"},
    {"propagator": "exact"}, {"seeds": "1,1"}, {"t_final": "0.015"},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(bad).validate()


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("window 3\n")


# ---------------------------------------------------------------- ensembles

def test_single_seed_zero_time(tmp_path):
    c = small_config(tmp_path, seeds="4", t_final=0.0)
    res = run_ensemble(c)
    tr = res.traces[4]
    assert len(tr) == 1 and tr.sample_times[0] == 0.0
    assert tr.l2_values[0] == 1.0


def test_zero_coupling_keeps_moment_zero(tmp_path):
    c = small_config(tmp_path, epsilon=0.0, delta=0.0, t_final=20.0)
    res = run_ensemble(c)
    for tr in res.ordered():
        assert np.all(tr.diffusion_values == 0.0)


def test_ensemble_files_and_resume(tmp_path):
    c = small_config(tmp_path)
    first = run_ensemble(c)
    assert sorted(first.traces) == [0, 1, 2] and not first.skipped
    side = json.loads((tmp_path / "run" / "traces" / "seed_000001.json").read_text())
    assert side["status"] == "ok" and side["config_hash"] == c.run_hash()
    # simulate a crash after seed 0: drop the later sidecars
    (tmp_path / "run" / "traces" / "seed_000002.json").unlink()
    second = run_ensemble(c)
    assert sorted(second.skipped) == [0, 1]
    for s in (0, 1, 2):
        np.testing.assert_array_equal(second.traces[s].as_array(), first.traces[s].as_array())
    # a changed model parameter invalidates the cache
    third = run_ensemble(c.with_overrides({"epsilon": "0.06"}))
    assert third.skipped == []


def test_rerun_is_bit_identical(tmp_path):
    c = small_config(tmp_path, seeds="5")
    run_ensemble(c, outdir=tmp_path / "a")
    run_ensemble(c, outdir=tmp_path / "b")
    a = (tmp_path / "a" / "traces" / "seed_000005.csv").read_bytes()
    b = (tmp_path / "b" / "traces" / "seed_000005.csv").read_bytes()
    assert a == b


def test_failures_recorded_and_ensemble_continues(tmp_path):
    # a tiny window pushes mass into the edge band immediately
    c = small_config(tmp_path, window=8, epsilon=0.5, delta=0.0, t_final=50.0, tail_j0="2",
                     boundary_fraction=1e-12)
    res = run_ensemble(c)
    assert set(res.failures) == {0, 1, 2}
    assert "BoundaryMassError" in res.failures[0]
    side = json.loads((tmp_path / "run" / "traces" / "seed_000000.json").read_text())
    assert side["status"] == "failed"


def test_parallel_matches_serial(tmp_path):
    c = small_config(tmp_path, seeds="0-1")
    a = run_ensemble(c, outdir=tmp_path / "serial")
    b = run_ensemble(c, outdir=tmp_path / "pool", workers=2)
    for s in (0, 1):
        np.testing.assert_array_equal(a.traces[s].as_array(), b.traces[s].as_array())


def test_exact_linear_trace_matches_split_step():
    W = 24
    pot = sample_potential(1, W)
    q0 = LatticeState.delta(W)
    grid = np.array([0.0, 1.0, 2.0])
    lin = linear_trace(q0, pot, 0.3, grid, tail_j0=3)
    split = integrate(q0, pot, ModelParams(0.3, 0.0, 1e-3), 2.0, grid, tail_j0=3)
    np.testing.assert_allclose(lin.diffusion_values, split.diffusion_values, rtol=1e-5, atol=1e-10)
    np.testing.assert_allclose(lin.tail_values, split.tail_values, rtol=1e-5, atol=1e-10)


def test_run_seed_exact_propagator(tmp_path):
    c = small_config(tmp_path, delta=0.0, propagator="exact", t_final=5.0)
    tr = run_seed(c, 0)
    assert tr.metadata["propagator"] == "exact"
    assert np.allclose(tr.l2_values, 1.0, atol=1e-12)


# ---------------------------------------------------------------- fits and diagnostics

def test_fit_exact_power_law():
    t = np.logspace(0, 4, 129)
    fit = fit_power_law((t, 3.0 * t**0.3))
    assert fit.kappa == pytest.approx(0.3, abs=1e-6)
    assert fit.prefactor == pytest.approx(3.0, rel=1e-9)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.t_min == 100.0 and fit.t_max == t[-1]


def test_fit_constant():
    t = np.logspace(0, 4, 129)
    fit = fit_power_law((t, np.full_like(t, 2.5)), t_min=1.0)
    assert fit.kappa == 0.0 and fit.stderr == 0.0


def test_fit_zero_coupling_run():
    W = 64
    pot = sample_potential(0, W)
    q0 = LatticeState.from_sites(W, {3: 0.6, -2: 0.8j})
    tr = integrate(q0, pot, ModelParams(0.0, 0.3, 0.01), 300.0)
    fit = fit_power_law(tr)
    assert abs(fit.kappa) <= 1e-12


def test_fit_errors():
    t = np.logspace(0, 4, 129)
    with pytest.raises(FitError):
        fit_power_law((t[:5], t[:5]), t_min=0.5)
    D = t.copy()
    D[-1] = 0.0
    with pytest.raises(FitError):
        fit_power_law((t, D))


def test_tail_rate():
    t = np.linspace(0, 10, 11)
    tr = synthetic_trace(t, t + 1, j0=5)
    tr.tail_values = 1e-3 * t
    r = tail_rate_check(tr, 5, 1.0)
    assert r.max_rate == pytest.approx(1e-3)
    assert r.bound == pytest.approx(5.0**-3)
    zero = synthetic_trace(t, t + 1, j0=5)
    assert tail_rate_check(zero, kappa=2.0).max_rate == 0.0
    with pytest.raises(ValueError):
        tail_rate_check(tr, 6)
    with pytest.raises(ValueError):
        tail_rate_check(synthetic_trace(t[:2], t[:2] + 1, j0=5))


def test_tail_stays_small_in_linear_localized_regime():
    W = 64
    pot = sample_potential(3, W)
    grid = np.linspace(0.0, 400.0, 401)
    tr = linear_trace(LatticeState.delta(W), pot, 0.05, grid, tail_j0=3)
    r = tail_rate_check(tr, 3, 1.0)
    assert np.max(tr.tail_values) < 0.05
    assert np.max(tr.diffusion_values) < 4.0
    assert np.isfinite(r.max_rate)


def test_quartiles_and_plots(tmp_path):
    t = np.linspace(0, 10, 21)
    rng = np.random.default_rng(0)
    traces = [synthetic_trace(t, 1 + rng.random(21)) for _ in range(20)]
    q = ensemble_quartiles(traces)
    assert np.all(q["q25"] <= q["median"]) and np.all(q["median"] <= q["q75"])
    paths = emit_plots(traces, tmp_path / "p")
    data = np.loadtxt(paths[0], delimiter=",", skiprows=1)
    assert np.all(np.diff(data[:, 0]) > 0)
    assert paths[1].stat().st_size > 0
    single = ensemble_quartiles(traces[:1])
    np.testing.assert_array_equal(single["q25"], traces[0].diffusion_values)
    np.testing.assert_array_equal(single["q75"], traces[0].diffusion_values)
    with pytest.raises(ValueError, match="no traces"):
        emit_plots([], tmp_path / "q")


def test_tame_check_rows():
    rows = tame_check(64, 10, 2.0, 20, seed=1)
    assert len(rows) == 20 and all(r["holds"] for r in rows)
    with pytest.raises(ValueError):
        tame_check(8, 8)
