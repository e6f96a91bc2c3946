"""
Split-step integrator against its exact oracles
===============================================

Two limits of the lattice equation have closed forms.  With no hopping each
site only rotates its phase; with no nonlinearity the flow is a matrix
exponential.  The Strang integrator is compared with both, then its second
order is read off a step-halving sequence.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from nlanderson.dynamics import (
    ModelParams, advance, exact_linear_solution, exact_onsite_solution, hamiltonian_energy,
)
from nlanderson.lattice import LatticeState
from nlanderson.potential import sample_potential

out = Path("runs/demos")
out.mkdir(parents=True, exist_ok=True)

W = 128
pot = sample_potential(0, W)
rng = np.random.default_rng(0)
amp = rng.standard_normal(2 * W + 1) + 1j * rng.standard_normal(2 * W + 1)
q0 = LatticeState(W, amp / np.linalg.norm(amp))

# no hopping: phase rotation only
onsite = advance(q0, pot, ModelParams(0.0, 0.3, 0.01), 5000)
err = np.linalg.norm(onsite.amplitudes - exact_onsite_solution(q0, pot, 0.3, 50.0).amplitudes)
print(f"eps = 0, T = 50: l2 distance to exact flow {err:.2e}")

# no nonlinearity: dense diagonalisation
lin = advance(LatticeState.delta(W), pot, ModelParams(0.1, 0.0, 1e-3), 5000)
ref = exact_linear_solution(LatticeState.delta(W), pot, 0.1, 5.0)
print(f"delta = 0, T = 5: l2 distance to dense propagator {np.linalg.norm(lin.amplitudes - ref.amplitudes):.2e}")

# global error against dt on the full model
p_ref = ModelParams(0.1, 0.1, 0.05 / 128)
ref = advance(q0, pot, p_ref, int(round(2.0 / p_ref.dt))).amplitudes
dts = 0.05 / 2.0 ** np.arange(4)
errs = [np.linalg.norm(advance(q0, pot, ModelParams(0.1, 0.1, dt), int(round(2.0 / dt))).amplitudes - ref)
        for dt in dts]
print("error ratios under halving:", np.round(np.array(errs[:-1]) / np.array(errs[1:]), 3))

# mass and energy along a longer run
p = ModelParams(0.1, 0.1, 0.01)
s, e0 = q0, hamiltonian_energy(q0, pot, p)
drift = []
for _ in range(50):
    s = advance(s, pot, p, 200)
    drift.append((s.time, abs(s.mass() - 1.0), abs(hamiltonian_energy(s, pot, p) - e0) / abs(e0)))
drift = np.array(drift)

fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
ax[0].loglog(dts, errs, "o-")
ax[0].loglog(dts, errs[0] * (dts / dts[0]) ** 2, "k--", label="dt^2")
ax[0].set_xlabel("dt")
ax[0].set_ylabel("l2 error at T = 2")
ax[0].legend()
ax[1].semilogy(drift[:, 0], drift[:, 1] + 1e-18, label="mass")
ax[1].semilogy(drift[:, 0], drift[:, 2], label="energy")
ax[1].set_xlabel("t")
ax[1].set_ylabel("relative drift")
ax[1].legend()
fig.tight_layout()
fig.savefig(out / "integrator.png", dpi=120)
