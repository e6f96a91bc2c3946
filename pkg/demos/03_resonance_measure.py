"""
How much of the potential space is resonant
===========================================

For a single monomial the resonant set is a slab in potential space, and
with all but one coordinate fixed its measure has a closed form.  Monte
Carlo over uniform potentials reproduces it, then the union over every
monomial ending at a given site is compared with its analytic bound.
"""
import math

import numpy as np

from nlanderson.formal import Monomial
from nlanderson.measure import (
    dyadic_success, dyadic_threshold_log_epsilon, nonresonant_measure, resonant_probability_exact,
    resonant_probability_mc, union_measure_bound,
)
from nlanderson.normal_form import build_schedule

# q_0^2 qbar_1 qbar_2: divisor v_0 + v_0 - v_1 - v_2
n = Monomial([(0, 2, 0), (1, 0, 1), (2, 0, 1)])
fixed = {1: 0.3, 2: 0.8}
for gamma in (1.0, 10.0, 100.0):
    exact = resonant_probability_exact(n, gamma, fixed)
    p, se = resonant_probability_mc(n, gamma, 100_000, seed=1, fixed=fixed)
    print(f"gamma={gamma:6.1f}  exact {exact:.5f}  MC {p:.5f} +- {se:.5f}")

sched = build_schedule(1e-4, 0.009, 40, 2.5)
r = union_measure_bound(40, 1, sched, samples=50_000, seed=2)
print(f"union over {r.n_monomials} classes at k=40: {r.estimate:.4f} +- {r.stderr:.4f}, "
      f"bound {r.analytic_bound:.4f}, sum of singles {r.per_monomial_sum:.4f}")

nr = nonresonant_measure(40, 1e-4, 0.009, 2.5, samples=20_000, seed=3)
print(f"non-resonant measure near j0=40: {nr.estimate:.4f} +- {nr.stderr:.4f} "
      f"(lower bound {nr.lower_bound:.2e})")

# the dyadic argument needs ln eps of order -10^3 before it bites
for jbar in (1e3, 1e4, 1e5):
    le = dyadic_threshold_log_epsilon(jbar)
    ok = dyadic_success(jbar, epsilon=1e-3).holds
    print(f"jbar={jbar:.0e}: holds at eps=1e-3? {ok}; holds once ln eps <= {le:.0f} "
          f"(eps <= 10^{le / math.log(10):.0f})")
