"""
Whole-space decay from per-mode evolution: radial k-grids, initial data families,
Parseval synthesis of norms, and power-law rate fits.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import scipy.stats
from joblib import Parallel, delayed

from PyVPBLab.autoinit import AutoInit
from PyVPBLab.collision_core import CollisionOperator
from PyVPBLab.functionals import EnergySpec, mu_weight
from PyVPBLab.modal_dynamics import evolve_mode, make_modal_state
from PyVPBLab.results import ModalTrace
from PyVPBLab.runner import geometric_stamps
from PyVPBLab.velocity_space import VelocityGrid

logger = logging.getLogger(__name__)

TAIL_WARNING_FRACTION = 0.05
MIN_FIT_POINTS = 5


@dataclass(frozen=True)
class KGrid:
    """Radial frequencies along one direction with weights for integrals of radial functions over R^3."""
    radii: np.ndarray
    weights: np.ndarray
    direction: np.ndarray

    def vectors(self) -> np.ndarray:
        return self.radii[:, None] * self.direction[None, :]


def log_uniform_kgrid(k_min: float = 0.02, k_max: float = 8.0, n: int = 24,
                      direction=(1.0, 0.0, 0.0)) -> KGrid:
    """
    Log-uniform radii with trapezoid weights in k times the isotropic measure 4 pi k^2.
    """
    if not 0 < k_min < k_max or n < 2:
        raise ValueError("Need 0 < k_min < k_max and n >= 2, got k_min={}, k_max={}, n={}.".format(
            k_min, k_max, n))
    radii = np.geomspace(k_min, k_max, n)
    gaps = np.diff(radii)
    trapezoid = np.zeros(n)
    trapezoid[:-1] += 0.5 * gaps
    trapezoid[1:] += 0.5 * gaps
    direction = np.asarray(direction, dtype=float)
    return KGrid(radii=radii, weights=4.0 * np.pi * radii ** 2 * trapezoid,
                 direction=direction / np.linalg.norm(direction))


class DataProfile(AutoInit):
    """
    Initial data u0(k, xi) = env(k) [a(k) M^{1/2} + b0 (k/|k|).xi M^{1/2} + c0 (|xi|^2-3) M^{1/2} + micro chi(xi)]
    with env(k) = exp(-k^2 / (2 width^2)). The density shape is a0 k/width ("linear", neutral)
    or a0 ("constant").
    """
    a0: float = 1.0
    b0: float = 0.5
    c0: float = 0.5
    micro: float = 0.5
    width: float = 1.0
    a_shape: str = "linear"
    neutral: bool = True

    def violations(self) -> List[str]:
        problems = []
        if self.a_shape not in ("linear", "constant"):
            problems.append("a_shape must be 'linear' or 'constant', got {!r}".format(self.a_shape))
        if not self.width > 0:
            problems.append("width must be positive, got {}".format(self.width))
        return problems


def micro_profile(grid: VelocityGrid) -> np.ndarray:
    """Unit-norm micro function built from xi_1 xi_2 M^{1/2} and the heat-flux mode (|xi|^2 - 5) xi_1 M^{1/2}."""
    xi = grid.nodes
    raw = (xi[:, 0] * xi[:, 1] + 0.1 * (grid.speed_sq - 5.0) * xi[:, 0]) * grid.sqrt_maxwellian
    chi = raw - grid.project_invariants(raw)
    return chi / np.sqrt(grid.norm_sq(chi))


def build_neutral_data(grid: VelocityGrid, kgrid: KGrid, profile: DataProfile) -> List[np.ndarray]:
    """
    :return: one complex velocity vector per radius of the k-grid.
    :raises ValueError: if the density profile does not vanish at k = 0 while neutrality is requested.
    """
    if profile.neutral and profile.a_shape != "linear" and profile.a0 != 0:
        raise ValueError("Neutral data need a density profile vanishing linearly at k = 0; "
                         "a_shape {!r} does not.".format(profile.a_shape))
    psi = grid.invariant_basis
    chi = micro_profile(grid)
    data = []
    for k in kgrid.radii:
        envelope = np.exp(-0.5 * (k / profile.width) ** 2)
        a = profile.a0 * (k / profile.width if profile.a_shape == "linear" else 1.0)
        b = profile.b0 * kgrid.direction
        u = envelope * (a * psi[:, 0] + psi[:, 1:4] @ b + profile.c0 * psi[:, 4] + profile.micro * chi)
        data.append(u.astype(complex))
    return data


@dataclass
class DecayCurve:
    times: np.ndarray
    values: np.ndarray
    label: str = ""
    truncation_dominated: bool = False


@dataclass(frozen=True)
class RateFit:
    sigma: float
    window: Tuple[float, float]
    residual: float
    stderr: float
    n_points: int


def synthesize(kgrid: KGrid, mode_sq: np.ndarray, m: float = 0.0, label: str = "",
               times: Sequence[float] = None) -> DecayCurve:
    """
    Parseval synthesis (sum_k w_k |k|^{2m} mode_sq[k, t])^{1/2}.
    :param mode_sq: squared per-mode norms, shape (n_k, n_t).
    """
    mode_sq = np.asarray(mode_sq, dtype=float)
    contributions = (kgrid.weights * kgrid.radii ** (2.0 * m))[:, None] * mode_sq
    total = contributions.sum(axis=0)
    tail = contributions[0, -1] / total[-1] if total[-1] > 0 else 0.0
    dominated = bool(tail > TAIL_WARNING_FRACTION)
    if dominated:
        logger.warning("The k_min mode carries %.1f%% of %s at the final time; the result is truncation dominated.",
                       100.0 * tail, label or "the synthesized norm")
    times = np.arange(mode_sq.shape[1], dtype=float) if times is None else np.asarray(times, dtype=float)
    return DecayCurve(times=times, values=np.sqrt(total), label=label, truncation_dominated=dominated)


def evolve_modes(op: CollisionOperator, kgrid: KGrid, data: Sequence[np.ndarray], T: float,
                 stamps: Sequence[float], spec: EnergySpec = None, dt: float = None,
                 threads: int = 1) -> List[ModalTrace]:
    """Evolve every mode of the k-grid; traces come back ordered by k."""
    if len(data) != len(kgrid.radii):
        raise ValueError("Got {} data vectors for {} radii.".format(len(data), len(kgrid.radii)))
    states = [make_modal_state(op.grid, k, u) for (k, u) in zip(kgrid.vectors(), data)]
    logger.info("Evolving %d modes to T = %g on %d workers.", len(states), T, threads)
    return Parallel(n_jobs=threads)(delayed(evolve_mode)(op, s, T, dt, stamps, spec) for s in states)


def weighted_mode_norms(traces: Sequence[ModalTrace], ell: float) -> np.ndarray:
    """|mu^ell u(t, k)|^2 per mode and stamp, shape (n_k, n_t)."""
    rows = []
    for trace in traces:
        grid = trace.op.grid
        weight = mu_weight(grid, trace.op.config.gamma) ** ell
        rows.append([grid.norm_sq(weight * u) for u in trace.states])
    return np.asarray(rows, dtype=float)


def run_decay_experiment(op: CollisionOperator, kgrid: KGrid, data: Sequence[np.ndarray], ell: float, m: float,
                         T: float = 200.0, stamps: Sequence[float] = None, traces: Sequence[ModalTrace] = None,
                         threads: int = 1) -> DecayCurve:
    """
    Synthesize the decay curve of |mu^ell d^m e^{tB} u0| from per-mode runs.
    Already computed traces can be passed to reuse one evolution for several (ell, m).
    """
    if traces is None:
        stamps = geometric_stamps(T, 60) if stamps is None else stamps
        traces = evolve_modes(op, kgrid, data, T, stamps, threads=threads)
    return synthesize(kgrid, weighted_mode_norms(traces, ell), m, "ell={:g} m={:g}".format(ell, m),
                      traces[0].times)


def field_decay_curve(kgrid: KGrid, traces: Sequence[ModalTrace]) -> DecayCurve:
    """Norm of the electric field grad Delta^{-1} P0 e^{tB} u0, from |a(t,k)|^2 / |k|^2."""
    return synthesize(kgrid, np.asarray([t.field_sq for t in traces]), 0.0, "field", traces[0].times)


def fit_decay_rate(curve: DecayCurve, window: Tuple[float, float] = (20.0, 200.0)) -> RateFit:
    """Least-squares slope of log|.| against log(1 + t) over the window; sigma is minus the slope."""
    times = np.asarray(curve.times, dtype=float)
    values = np.asarray(curve.values, dtype=float)
    start, end = window
    selected = (times >= start - 1e-12) & (times <= end + 1e-12)
    if np.any(values[selected] <= 0):
        raise ValueError("The curve must be positive on the fit window {}.".format(window))
    if np.count_nonzero(selected) < MIN_FIT_POINTS:
        raise ValueError("Fit window {} holds {} points; at least {} are needed.".format(
            window, np.count_nonzero(selected), MIN_FIT_POINTS))
    x = np.log1p(times[selected])
    y = np.log(values[selected])
    fit = scipy.stats.linregress(x, y)
    residual = float(np.sqrt(np.mean((y - (fit.intercept + fit.slope * x)) ** 2)))
    return RateFit(sigma=float(-fit.slope), window=(float(start), float(end)), residual=residual,
                   stderr=float(fit.stderr), n_points=int(np.count_nonzero(selected)))
