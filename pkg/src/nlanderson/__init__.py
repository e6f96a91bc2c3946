"""Nonlinear Anderson model on a finite lattice window.

Modules
-------
lattice      states, diffusion moment, Sobolev norms, tame inequality
potential    random frequencies and the non-resonance test
dynamics     Strang split-step integrator and exact oracles
formal       sparse formal Hamiltonians, Poisson bracket, tame norms, flows
normal_form  schedule, homological equation, Lie series, iterative normal form
measure      Monte-Carlo and closed-form resonant-set measures
experiment   configuration, seed ensembles, power-law fits, plots
cli          the ``nlanderson`` command
"""
from .dynamics import ModelParams, integrate, step_strang
from .experiment import ExperimentConfig, fit_power_law, run_ensemble
from .formal import FormalHamiltonian, Monomial, TameWindow, poisson_bracket
from .lattice import DiffusionTrace, LatticeState
from .normal_form import build_schedule, run_normal_form
from .potential import Potential, sample_potential

__version__ = "0.1.0"

__all__ = [
    "DiffusionTrace",
    "ExperimentConfig",
    "FormalHamiltonian",
    "LatticeState",
    "ModelParams",
    "Monomial",
    "Potential",
    "TameWindow",
    "build_schedule",
    "fit_power_law",
    "integrate",
    "poisson_bracket",
    "run_ensemble",
    "run_normal_form",
    "sample_potential",
    "step_strang",
]
