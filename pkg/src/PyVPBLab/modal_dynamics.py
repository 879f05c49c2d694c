"""
Linearized evolution of a single spatial Fourier mode with Poisson coupling:
du/dt = -i (xi.k) u + i (xi.k) phi M^{1/2} + L u,   phi = -a / |k|^2.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from PyVPBLab.collision_core import CollisionOperator, apply_L, linearized_matrix
from PyVPBLab.functionals import EnergySpec, dissipation_D_ell, energy_E_ell, fit_dissipation_constant, \
    interactive_functional, LyapunovReport
from PyVPBLab.macro_micro import project_P
from PyVPBLab.results import ModalTrace
from PyVPBLab.runner import EvolutionRunner, RK4Runner, geometric_stamps
from PyVPBLab.velocity_space import VelocityGrid

logger = logging.getLogger(__name__)

STABILITY_SAFETY = 0.5


@dataclass(frozen=True, eq=False)
class ModalState:
    """One Fourier mode k and its velocity profile u; the potential is derived from u, never stored."""
    k: np.ndarray
    u: np.ndarray

    @property
    def k_norm(self) -> float:
        return float(np.linalg.norm(self.k))

    def potential(self, grid: VelocityGrid) -> complex:
        """phi = -a / |k|^2 with the raw density moment a = <M^{1/2}, u>."""
        return complex(-grid.density_moment(self.u) / np.dot(self.k, self.k))


def _check_k(k) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.shape != (3,):
        raise ValueError("Wave vector must have 3 components, got shape {}.".format(k.shape))
    if not np.any(k != 0):
        raise ValueError("Wave vector k = 0 makes the Poisson coupling singular.")
    return k


def make_modal_state(grid: VelocityGrid, k, u) -> ModalState:
    k = _check_k(k)
    u = np.asarray(u, dtype=complex)
    grid.check_shape(u)
    return ModalState(k=k, u=u)


def _rhs(op: CollisionOperator, k: np.ndarray, u: np.ndarray) -> np.ndarray:
    grid = op.grid
    xi_k = grid.nodes @ k
    phi = -grid.density_moment(u) / np.dot(k, k)
    return -1j * xi_k * u + 1j * phi * xi_k * grid.sqrt_maxwellian + apply_L(op, u)


def modal_rhs(op: CollisionOperator, s: ModalState) -> np.ndarray:
    _check_k(s.k)
    op.grid.check_shape(s.u)
    return _rhs(op, s.k, s.u)


def modal_generator(op: CollisionOperator, k) -> np.ndarray:
    """Dense complex matrix A with du/dt = A u."""
    k = _check_k(k)
    grid = op.grid
    xi_k = grid.nodes @ k
    field = np.outer(1j * xi_k * grid.sqrt_maxwellian, -(grid.quad_weights * grid.sqrt_maxwellian) / np.dot(k, k))
    return -1j * np.diag(xi_k) + field + linearized_matrix(op)


def stable_time_step(op: CollisionOperator, k, safety: float = STABILITY_SAFETY) -> float:
    speed = float(np.sqrt(np.max(op.grid.speed_sq)))
    return safety / (speed * np.linalg.norm(k) + float(np.max(op.nu)) + op.norm_K_inf)


def record_state(trace: ModalTrace, t: float, u: np.ndarray, keep_state: bool = True):
    grid = trace.op.grid
    s = ModalState(k=trace.k, u=u)
    ms, Pu, micro = project_P(grid, u)
    trace.times.append(float(t))
    if keep_state:
        trace.states.append(np.array(u, copy=True))
    trace.energy.append(energy_E_ell(grid, trace.spec, s))
    trace.dissipation.append(dissipation_D_ell(grid, trace.spec, s))
    trace.interactive.append(interactive_functional(grid, s, trace.spec.kappa1).real)
    trace.norm_sq.append(float(grid.norm_sq(u)))
    trace.field_sq.append(float(abs(grid.density_moment(u)) ** 2 / np.dot(trace.k, trace.k)))
    trace.micro_sq.append(float(grid.norm_sq(micro)))
    trace.macro_sq.append(float(grid.norm_sq(Pu)))


def evolve_mode(op: CollisionOperator, s0: ModalState, T: float, dt: float = None, stamps: Sequence[float] = None,
                spec: EnergySpec = None, runner: EvolutionRunner = None, keep_states: bool = True) -> ModalTrace:
    """
    Integrate one mode from t = 0 to T and record all functionals at every output stamp.
    :param dt: maximum step; defaults to the stability bound and may not exceed it.
    :param stamps: output times starting at 0 and ending at T; geometric by default.
    """
    k = _check_k(s0.k)
    bound = stable_time_step(op, k)
    if dt is None:
        dt = bound
    elif dt > bound * (1.0 + 1e-12):
        raise ValueError("Step {:.3e} exceeds the stability bound {:.3e} for |k| = {:.3g}.".format(
            dt, bound, np.linalg.norm(k)))
    if stamps is None:
        stamps = geometric_stamps(T, 60, min(0.1, T / 2))
    stamps = np.asarray(stamps, dtype=float)
    if stamps[0] != 0.0 or not np.isclose(stamps[-1], T):
        raise ValueError("Output stamps must run from 0 to T = {}.".format(T))
    spec = spec if spec is not None else EnergySpec(gamma=op.config.gamma)
    runner = runner if runner is not None else RK4Runner(dt)
    trace = ModalTrace(op, k, spec)
    grid = op.grid

    def norm(u):
        return np.sqrt(grid.norm_sq(u) + abs(grid.density_moment(u)) ** 2 / np.dot(k, k))

    runner.run(lambda t, u: _rhs(op, k, u), np.asarray(s0.u, dtype=complex), stamps,
               lambda t, u: record_state(trace, t, u, keep_states), norm=norm)
    return trace


def verify_unweighted_lyapunov(trace: ModalTrace) -> LyapunovReport:
    """Fit kappa in d/dt(|u|^2 + |a|^2/|k|^2) + kappa |nu^{1/2} (I-P) u|^2 <= 0."""
    grid = trace.op.grid
    D = []
    for u in trace.states:
        _, _, micro = project_P(grid, u)
        D.append(float(grid.norm_sq(np.sqrt(trace.op.nu) * micro)))
    return fit_dissipation_constant(trace.times, trace.unweighted_energy, D)


def rotate_state(grid: VelocityGrid, s: ModalState, permutation: Sequence[int]) -> ModalState:
    """
    Apply the axis permutation O(xi)_i = xi_{permutation[i]} to k and to the velocity argument of u.
    Permutations map the lattice onto itself, so no interpolation is needed.
    """
    permutation = list(permutation)
    if sorted(permutation) != [0, 1, 2]:
        raise ValueError("Not an axis permutation: {}.".format(permutation))
    rotated = np.transpose(grid.as_cube(s.u), permutation).reshape(-1)
    return ModalState(k=np.asarray(s.k)[permutation], u=rotated)
