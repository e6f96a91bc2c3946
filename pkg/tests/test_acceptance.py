"""Acceptance suite: one verdict line per check, collected in the terminal summary.

Tolerances are pinned constants below.  Runs marked ``slow`` take minutes;
the diffusion ensemble reuses cached traces under ``runs/acceptance`` when
their configuration hash matches.
"""
import math
from pathlib import Path

import numpy as np
import pytest

from nlanderson.dynamics import (
    ModelParams, advance, exact_linear_solution, exact_onsite_solution, hamiltonian_energy,
)
from nlanderson.experiment import (
    ExperimentConfig, ensemble_quartiles, fit_power_law, run_ensemble, run_seed, tame_check,
)
from nlanderson.formal import Monomial, TameWindow, evaluate, poisson_bracket
from nlanderson.lattice import LatticeState, tame_constant
from nlanderson.measure import (
    dyadic_success, dyadic_threshold_log_epsilon, nonresonant_measure, resonant_probability_exact,
    resonant_probability_mc, union_measure_bound,
)
from nlanderson.normal_form import (
    ScheduleError, build_schedule, conjugation_error, delta_factor, epsilon_threshold_table,
    find_nonresonant_seed, initial_state, normal_form_step, run_normal_form,
)
from nlanderson.potential import sample_potential

from test_formal import numeric_bracket, random_hamiltonian

# conservation
MASS_DRIFT_TOL = 1e-10
ENERGY_DRIFT_TOL = 1e-4
# oracles
ONSITE_TOL = 1e-12
LINEAR_TOL = 1e-6
CONVERGENCE_RATIO = (3.5, 4.5)
# bracket algebra
JACOBI_TOL = 1e-12
NUMERIC_BRACKET_TOL = 1e-6
# normal form
HOMOLOGICAL_TOL = 1e-14
CONJUGATION_TOL = 1e-4
# schedule
DELTA_LIMIT_TARGET = 0.7214
DELTA_LIMIT_TOL = 1e-4
DELTA_M_FLOOR = 0.5
# measure
MC_SAMPLES = 100_000
N_SIGMA = 3.0
DYADIC_EPSILON = 1e-3
# diffusion
DIFFUSION_FIT = (1e2, 1e4)
MIN_SEEDS = 20

RUNS = Path(__file__).resolve().parents[1] / "runs" / "acceptance"
TAU = 0.009


# ---------------------------------------------------------------- 1: conservation

@pytest.mark.slow
def test_conservation(verdict):
    W, steps, chunk = 512, 1_000_000, 100_000
    pot = sample_potential(0, W)
    p = ModelParams(0.1, 0.1, 0.01)
    rng = np.random.default_rng(0)
    amp = np.zeros(2 * W + 1, complex)
    amp[W - 10:W + 11] = rng.standard_normal(21) + 1j * rng.standard_normal(21)
    s = LatticeState(W, amp / np.linalg.norm(amp))
    m0, e0 = s.mass(), hamiltonian_energy(s, pot, p)
    energy_drift = 0.0
    for n in range(0, steps, chunk):
        s = advance(s, pot, p, chunk)
        if (n + chunk) * p.dt <= 1e3:
            energy_drift = max(energy_drift, abs(hamiltonian_energy(s, pot, p) - e0) / abs(e0))
    mass_drift = abs(s.mass() - m0) / m0
    ok_m = verdict(1, "mass drift over 1e6 steps", mass_drift <= MASS_DRIFT_TOL,
                   f"{mass_drift:.2e} <= {MASS_DRIFT_TOL:.0e}")
    ok_e = verdict(1, "energy drift over T=1e3", energy_drift <= ENERGY_DRIFT_TOL,
                   f"{energy_drift:.2e} <= {ENERGY_DRIFT_TOL:.0e}")
    assert ok_m and ok_e


# ---------------------------------------------------------------- 2: oracle equivalence

def test_onsite_oracle(verdict):
    W = 64
    pot = sample_potential(1, W)
    rng = np.random.default_rng(1)
    amp = rng.standard_normal(2 * W + 1) + 1j * rng.standard_normal(2 * W + 1)
    s = LatticeState(W, amp / np.linalg.norm(amp))
    out = advance(s, pot, ModelParams(0.0, 0.1, 0.01), 10_000)
    ref = exact_onsite_solution(s, pot, 0.1, 100.0)
    err = float(np.linalg.norm(out.amplitudes - ref.amplitudes))
    assert verdict(2, "eps=0 vs exact onsite at T=100", err <= ONSITE_TOL, f"{err:.2e} <= {ONSITE_TOL:.0e}")


def test_linear_oracle(verdict):
    W = 256
    pot = sample_potential(2, W)
    s = LatticeState.delta(W)
    out = advance(s, pot, ModelParams(0.1, 0.0, 1e-3), 10_000)
    ref = exact_linear_solution(s, pot, 0.1, 10.0)
    err = float(np.linalg.norm(out.amplitudes - ref.amplitudes))
    assert verdict(2, "delta=0 vs dense propagator at T=10", err <= LINEAR_TOL, f"{err:.2e} <= {LINEAR_TOL:.0e}")


def test_convergence_ratio(verdict):
    W = 24
    pot = sample_potential(3, W)
    rng = np.random.default_rng(0)
    s0 = LatticeState(W, 0.5 * (rng.standard_normal(2 * W + 1) + 1j * rng.standard_normal(2 * W + 1)))

    def run(dt):
        return advance(s0, pot, ModelParams(0.1, 0.1, dt), int(round(2.0 / dt))).amplitudes

    ref = run(0.05 / 8)
    ratio = float(np.linalg.norm(run(0.05) - ref) / np.linalg.norm(run(0.025) - ref))
    lo, hi = CONVERGENCE_RATIO
    assert verdict(2, "second-order dt ratio", lo <= ratio <= hi, f"{ratio:.3f} in [{lo}, {hi}]")


# ---------------------------------------------------------------- 3: bracket algebra

def test_bracket_algebra(verdict):
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(100):
        H, G, K = (random_hamiltonian(rng, dyadic=True) for _ in range(3))
        a, b = 0.75, -1.25
        A = poisson_bracket(H, G, floor=0) + poisson_bracket(G, H, floor=0)
        exact &= all(A.value(m) == 0 for m in A)
        lhs = poisson_bracket(H.scale(a) + G.scale(b), K, floor=0)
        rhs = poisson_bracket(H, K, floor=0).scale(a) + poisson_bracket(G, K, floor=0).scale(b)
        exact &= lhs.max_difference(rhs) == 0.0
    ok1 = verdict(3, "antisymmetry and bilinearity exact", exact, "100 dyadic triples")

    worst = 0.0
    for _ in range(100):
        H, G, K = (random_hamiltonian(rng) for _ in range(3))
        J = (poisson_bracket(poisson_bracket(H, G, floor=1e-12), K, floor=1e-12)
             + poisson_bracket(poisson_bracket(G, K, floor=1e-12), H, floor=1e-12)
             + poisson_bracket(poisson_bracket(K, H, floor=1e-12), G, floor=1e-12))
        worst = max(worst, max((abs(J.value(m)) for m in J), default=0.0))
    ok2 = verdict(3, "Jacobi residual", worst <= JACOBI_TOL, f"{worst:.2e} <= {JACOBI_TOL:.0e}")

    H, G = random_hamiltonian(rng), random_hamiltonian(rng)
    B = poisson_bracket(H, G)
    rel = 0.0
    for _ in range(5):
        q = 0.7 * (rng.normal(size=3) + 1j * rng.normal(size=3))
        sym = evaluate(B, LatticeState(1, q))
        rel = max(rel, abs(numeric_bracket(H, G, q) - sym) / max(abs(sym), 1e-3))
    ok3 = verdict(3, "numeric vs symbolic bracket", rel <= NUMERIC_BRACKET_TOL,
                  f"{rel:.2e} <= {NUMERIC_BRACKET_TOL:.0e}")
    assert ok1 and ok2 and ok3


# ---------------------------------------------------------------- normal-form desk runs

def toy_run():
    sched = build_schedule(1e-3, TAU, 2, 1.0, steps=2, window_constant=0.0, min_j0=1)
    seed = find_nonresonant_seed(lambda k: sample_potential(k, 4), sched, range(500), max_norm=4, max_diameter=2)
    pot = sample_potential(seed, 4)
    return sched, pot


@pytest.fixture(scope="module")
def relaxed_run():
    # literal parameters do not converge (see test_normal_form_literal); this is the logged relaxation
    eps, j0, kappa, W, c, M = 1e-4, 40, 1.0, 128, 2.0, 2
    sched = build_schedule(eps, TAU, j0, kappa, steps=M, window_constant=c)
    seed = find_nonresonant_seed(lambda k: sample_potential(k, W), sched, range(1000))
    state, rep = run_normal_form(sample_potential(seed, W), eps, TAU, j0, kappa, steps=M,
                                 window_constant=c, strict=False)
    rep["seed"] = seed
    return sched, state, rep


def test_homological_identity(verdict, relaxed_run):
    sched, pot = toy_run()
    _, toy = run_normal_form(pot, 1e-3, TAU, 2, 1.0, steps=2, window_constant=0.0, degree_cap=6,
                             strict=False, min_j0=1)
    res = {"toy 9-site": toy["max_homological_residual"],
           "relaxed W=128": relaxed_run[2]["max_homological_residual"]}
    worst = max(res.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in res.items())
    assert verdict(4, "homological identity termwise", worst <= HOMOLOGICAL_TOL,
                   f"{detail}; tol {HOMOLOGICAL_TOL:.0e}")


def test_normal_form_literal(verdict):
    W = 128
    try:
        sched = build_schedule(0.05, TAU, 40, 1.0)
    except ScheduleError as exc:
        verdict(5, "literal run eps=0.05 j0=40 kappa=1", False, f"schedule: {exc}")
        pytest.fail(f"literal parameters do not admit a converging schedule: {exc}")
    seed = find_nonresonant_seed(lambda k: sample_potential(k, W), sched, range(1000))
    _, rep = run_normal_form(sample_potential(seed, W), 0.05, TAU, 40, 1.0, strict=False)
    ok = rep["all_bounds_hold"]
    assert verdict(5, "literal run eps=0.05 j0=40 kappa=1", ok)


def test_normal_form_relaxed(verdict, relaxed_run):
    sched, _, rep = relaxed_run
    elim = [c for st in rep["steps"] for c in st["checks"] if c["name"] == "eliminated monomials"]
    final = next(c for c in rep["final_checks"] if c["name"] == "final window residual")
    ok1 = verdict(5, "relaxed run: eliminated monomials <= eps_{s+1}", all(c["ok"] for c in elim),
                  "; ".join(f"s={c['step']} {c['value']:.2e} <= {c['bound']:.2e}" for c in elim)
                  + f"; seed {rep['seed']}, eps 1e-4, c=2, M=2")
    ok2 = verdict(5, "relaxed run: final window residual <= j0^(-3/kappa)", final["ok"],
                  f"{final['value']:.2e} <= {final['bound']:.2e}, margin {final['margin']:.2e}")
    failing = sorted({c["name"] for st in rep["steps"] for c in st["checks"] if not c["ok"]})
    print("relaxed run, other bounds failing at this eps:", failing, f"wall {rep['wall_time']:.1f}s")
    assert ok1 and ok2


def test_conjugation_oracle(verdict):
    sched, pot = toy_run()
    w = TameWindow(TAU, 2)
    st = initial_state(pot, 1e-3, 4)
    H0 = st.hamiltonian
    for _ in range(sched.M):
        st, _ = normal_form_step(st, sched, w, degree_cap=6, strict=False)
    rng = np.random.default_rng(1)
    p0 = 0.1 * (rng.standard_normal(9) + 1j * rng.standard_normal(9))
    err = conjugation_error(H0, st.hamiltonian, st.transforms, p0, np.linspace(0, 1, 11))
    assert verdict(6, "conjugated vs original dynamics, 9 sites, t in [0,1]", err <= CONJUGATION_TOL,
                   f"{err:.2e} <= {CONJUGATION_TOL:.0e}")


# ---------------------------------------------------------------- 7: schedule

def test_delta_limit(verdict):
    # direct product to j = 10^6
    j = np.arange(1, 10**6 + 1, dtype=float)
    limit = float(np.exp(np.sum(np.log1p(-0.2 / j**2))))
    ds = [delta_factor(s) for s in range(1, 200)]
    ok1 = verdict(7, "delta_s decreasing", all(a > b for a, b in zip(ds[1:], ds[2:])))
    ok2 = verdict(7, "lim delta_s", abs(limit - DELTA_LIMIT_TARGET) <= DELTA_LIMIT_TOL,
                  f"{limit:.7f} vs {DELTA_LIMIT_TARGET} +- {DELTA_LIMIT_TOL:.0e}")
    assert ok1 and ok2


def test_schedule_grid(verdict):
    rows, skipped = [], []
    for eps in (1e-3, 1e-4, 1e-6):
        for tau in (0.001, TAU):
            for j0 in (40, 1000, 10**6):
                for kappa in (1.0, 2.5):
                    try:
                        s = build_schedule(eps, tau, j0, kappa)
                    except ScheduleError:
                        skipped.append((eps, tau, j0, kappa))
                        continue
                    rows.append((s.delta(s.M), s.eps(s.M + 1) <= s.target, s.M / math.log(math.log(j0))))
    ok1 = verdict(7, "delta_M >= 1/2 on grid", all(r[0] >= DELTA_M_FLOOR for r in rows),
                  f"min {min(r[0] for r in rows):.4f} over {len(rows)} schedules, {len(skipped)} above threshold")
    ok2 = verdict(7, "eps_{M+1} <= j0^(-3/kappa)", all(r[1] for r in rows))
    C = max(r[2] for r in rows)
    print(f"empirical C = max M / ln ln j0 = {C:.1f}")
    table = epsilon_threshold_table((1.0, 2.5, 5.0), TAU, 1000)
    for r in table:
        print(f"eps0(kappa={r['kappa']}): convergence {r['eps0_convergence']:.3e}, window {r['eps0_window']:.3e}")
    ok3 = verdict(7, "eps0(kappa) table produced", all(r["eps0_convergence"] > 0 for r in table),
                  f"C = {C:.1f}")
    assert ok1 and ok2 and ok3


# ---------------------------------------------------------------- 8: measure

def test_single_coordinate_measure(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for cfg in range(20):
        c = int(rng.choice([1, -1, 2, -3]))
        others = {int(j): int(rng.choice([1, -1, 2])) for j in rng.choice([1, 2, 3], 2, replace=False)}
        k = {0: c, **others}
        fixed = {j: float(rng.random()) for j in others}
        n = Monomial((j, max(x, 0), max(-x, 0)) for j, x in k.items())
        gamma = float(rng.uniform(5, 200))
        exact = resonant_probability_exact(n, gamma, fixed)
        p, se = resonant_probability_mc(n, gamma, MC_SAMPLES, seed=cfg, fixed=fixed)
        sigma = max(se, math.sqrt(exact * (1 - exact) / MC_SAMPLES))
        worst = max(worst, abs(p - exact) / sigma if sigma else 0.0)
    assert verdict(8, "single-coordinate MC vs closed form", worst <= N_SIGMA,
                   f"worst {worst:.2f} sigma over 20 configurations")


def test_union_bounds(verdict):
    first = build_schedule(1e-4, TAU, 40, 2.5)
    r1 = union_measure_bound(40, 1, first, samples=MC_SAMPLES, seed=11)
    later = build_schedule(1e-3, TAU, 10**6, 2.5)
    rs = [union_measure_bound(10**6, s, later, samples=MC_SAMPLES, seed=12 + s) for s in (2, 10, later.M)]
    ok1 = verdict(8, "union s=1 <= eps^(1/200)", r1.holds,
                  f"{r1.estimate:.4f} +- {r1.stderr:.4f} vs {r1.analytic_bound:.4f}, {r1.n_monomials} classes")
    ok2 = verdict(8, "union s>=2 <= eps_s^(1/125)", all(r.holds for r in rs),
                  "; ".join(f"s={r.s} {r.estimate:.4f} vs {r.analytic_bound:.4f}" for r in rs))
    assert ok1 and ok2


def test_nonresonant_measure(verdict):
    r = nonresonant_measure(40, 1e-4, TAU, 2.5, samples=20_000, seed=1)
    assert verdict(8, "nonresonant measure >= j0^(-6 eps^(1/1000)) - 3 sigma", r.holds,
                   f"{r.estimate:.4f} +- {r.stderr:.4f} vs {r.lower_bound:.2e}")


def test_dyadic_inequality(verdict):
    res = {jb: dyadic_success(jb, epsilon=DYADIC_EPSILON) for jb in (1e3, 1e4, 1e5)}
    thr = {jb: dyadic_threshold_log_epsilon(jb) for jb in res}
    ok = all(r.holds for r in res.values())
    detail = "; ".join(f"jbar={jb:.0e}: log fail {r.log_fail:.2e} vs {r.log_fail_target:.1f}, "
                       f"holds for ln eps <= {thr[jb]:.0f}" for jb, r in res.items())
    assert verdict(8, f"dyadic success at eps={DYADIC_EPSILON}", ok, detail)


# ---------------------------------------------------------------- 9: diffusion experiment

def diffusion_configs():
    base = ExperimentConfig(epsilon=0.05, delta=0.05, window=1024, dt=0.01, t_final=1e4,
                            seeds=f"0-{MIN_SEEDS - 1}", tail_j0="10")
    return {"nonlinear": base, "linear": base.with_overrides({"delta": "0", "propagator": "exact"})}


@pytest.mark.slow
def test_diffusion_experiment(verdict, tmp_path):
    cfgs = diffusion_configs()
    ens = {name: run_ensemble(c, outdir=RUNS / f"diffusion_{name}") for name, c in cfgs.items()}
    complete = all(len(e.traces) >= MIN_SEEDS and not e.failures for e in ens.values())
    fits = {name: fit_power_law(ensemble_quartiles(e.ordered()), *DIFFUSION_FIT) for name, e in ens.items()}
    nl, lin = fits["nonlinear"], fits["linear"]
    print(f"nonlinear kappa_fit = {nl.kappa:.4f} +- {nl.stderr:.4f} (r2 {nl.r2:.3f})")
    print(f"linear kappa_fit = {lin.kappa:.4f} +- {lin.stderr:.4f}")

    fresh = run_seed(cfgs["nonlinear"], 0)
    path = tmp_path / "seed0.csv"
    fresh.write_csv(path)
    cached = (RUNS / "diffusion_nonlinear" / "traces" / "seed_000000.csv").read_bytes()
    identical = path.read_bytes() == cached

    ok0 = verdict(9, "ensemble complete", complete,
                  ", ".join(f"{n}: {len(e.traces)} ok, {len(e.failures)} failed" for n, e in ens.items()))
    ok1 = verdict(9, "nonlinear kappa_fit reproducible (bit-identical seed 0)", identical,
                  f"kappa_fit {nl.kappa:.4f} +- {nl.stderr:.4f}")
    ok2 = verdict(9, "linear control consistent with 0", abs(lin.kappa) <= N_SIGMA * lin.stderr,
                  f"{lin.kappa:.4f} +- {lin.stderr:.4f}")
    assert ok0 and ok1 and ok2


# ---------------------------------------------------------------- 10: tame inequality

def test_tame_inequality(verdict):
    results = []
    for W, j0, s in ((256, 20, 2.0), (256, 64, 1.5), (128, 10, 3.0), (64, 8, 1.0)):
        rows = tame_check(W, j0, s, 100, seed=W + j0)
        worst = max(r["lhs"] / r["rhs"] for r in rows)
        results.append((W, j0, s, all(r["holds"] for r in rows), worst))
    ok = all(r[3] for r in results)
    detail = "; ".join(f"W={W} j0={j0} s={s} C={tame_constant(s):g} worst ratio {w:.3f}"
                       for W, j0, s, _, w in results)
    assert verdict(10, "self-convolution bound, 100 states each", ok, detail)
