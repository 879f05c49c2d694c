"""
Per-mode energy and dissipation functionals, the interactive functional,
their calibration and the Lyapunov / weighted envelope checks on modal traces.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Sequence, Tuple

import numpy as np

from PyVPBLab.autoinit import AutoInit
from PyVPBLab.macro_micro import moments_theta_lambda, project_P
from PyVPBLab.velocity_space import VelocityGrid

if TYPE_CHECKING:
    from PyVPBLab.modal_dynamics import ModalState
    from PyVPBLab.results import ModalTrace

logger = logging.getLogger(__name__)

KAPPA_SENTINEL = 1e6
EQUIVALENCE_WINDOW = (0.5, 2.0)


class EnergySpec(AutoInit):
    ell: float = 0.0
    gamma: float = -1.0
    kappa1: float = 1.0
    kappa2: float = 0.125
    kappa3: float = 0.03125
    kappa4: float = 0.03125

    def violations(self) -> List[str]:
        problems = []
        if self.ell < 0:
            problems.append("ell must be non-negative, got {}".format(self.ell))
        if not -3.0 < self.gamma < 0.0:
            problems.append("gamma must lie in (-3, 0), got {}".format(self.gamma))
        for name in ("kappa1", "kappa2", "kappa3", "kappa4"):
            if not getattr(self, name) > 0:
                problems.append("{} must be positive, got {}".format(name, getattr(self, name)))
        return problems

    def with_ell(self, ell: float) -> "EnergySpec":
        return self.replace(ell=ell)


def rho(k) -> float:
    k2 = float(np.sum(np.square(k))) if np.ndim(k) else float(k) ** 2
    return k2 / (1.0 + k2)


def mu_weight(grid: VelocityGrid, gamma: float) -> np.ndarray:
    """mu(xi) = <xi>^{-gamma/2}, which is >= 1 for gamma < 0."""
    return (1.0 + grid.speed_sq) ** (-0.25 * gamma)


def _pair(f, g):
    return np.sum(f * np.conj(g))


def interactive_functional(grid: VelocityGrid, s: "ModalState", kappa1: float = 1.0) -> complex:
    ms, _, micro = project_P(grid, s.u)
    mt = moments_theta_lambda(grid, micro)
    k = np.asarray(s.k, dtype=float)
    ik = 1j * k
    div_b = np.dot(ik, ms.b)
    strain = ik[:, None] * ms.b[None, :] + ms.b[:, None] * ik[None, :] - 2.0 / 3.0 * div_b * np.eye(3)
    value = _pair(ik * ms.c, mt.lam) + _pair(strain, mt.theta) + kappa1 * _pair(ik * ms.a, ms.b)
    return complex(value / (1.0 + np.dot(k, k)))


def energy_terms(grid: VelocityGrid, spec: EnergySpec, s: "ModalState") -> Tuple[float, float, float]:
    """
    The three groups of E_ell: |u|^2 + |a|^2/|k|^2, Re E^int, and the weighted norms with their kappa factors.
    """
    _, _, micro = project_P(grid, s.u)
    k2 = float(np.dot(s.k, s.k))
    weight = mu_weight(grid, spec.gamma) ** spec.ell
    base = grid.norm_sq(s.u) + abs(grid.density_moment(s.u)) ** 2 / k2
    weighted = 0.0
    if k2 <= 1.0:
        weighted += spec.kappa3 * grid.norm_sq(weight * micro)
    if k2 >= 1.0:
        weighted += spec.kappa4 * grid.norm_sq(weight * s.u)
    return float(base), interactive_functional(grid, s, spec.kappa1).real, float(weighted)


def energy_E_ell(grid: VelocityGrid, spec: EnergySpec, s: "ModalState") -> float:
    base, interactive, weighted = energy_terms(grid, spec, s)
    return base + spec.kappa2 * interactive + weighted


def dissipation_D_ell(grid: VelocityGrid, spec: EnergySpec, s: "ModalState") -> float:
    ms, _, micro = project_P(grid, s.u)
    weight = mu_weight(grid, spec.gamma) ** (spec.ell - 1.0)
    fluid = abs(ms.a) ** 2 + np.sum(np.abs(ms.b) ** 2) + abs(ms.c) ** 2
    return float(grid.norm_sq(weight * micro) + rho(s.k) * fluid + abs(ms.a) ** 2)


def reference_norm(grid: VelocityGrid, spec: EnergySpec, s: "ModalState") -> float:
    weight = mu_weight(grid, spec.gamma) ** spec.ell
    return float(grid.norm_sq(weight * s.u) + abs(grid.density_moment(s.u)) ** 2 / np.dot(s.k, s.k))


def check_equivalence(grid: VelocityGrid, spec: EnergySpec, states: Sequence["ModalState"]) -> Tuple[float, float]:
    """Range of E_ell / (|mu^ell u|^2 + |a|^2/|k|^2) over the states with nonzero reference."""
    ratios = []
    for s in states:
        ref = reference_norm(grid, spec, s)
        if ref > 0:
            ratios.append(energy_E_ell(grid, spec, s) / ref)
    if not ratios:
        return 1.0, 1.0
    return float(min(ratios)), float(max(ratios))


def sample_states(grid: VelocityGrid, radii: Sequence[float], count: int, seed: int = 0,
                 direction=(1.0, 0.0, 0.0)) -> List["ModalState"]:
    """Random complex states mixing macro-heavy and micro-heavy content over the given |k| values."""
    from PyVPBLab.modal_dynamics import make_modal_state

    rng = np.random.default_rng(seed)
    direction = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    envelope = np.sqrt(grid.sqrt_maxwellian)
    states = []
    for _ in range(count):
        k = rng.choice(np.asarray(radii, dtype=float)) * direction
        macro = (rng.standard_normal(5) + 1j * rng.standard_normal(5)) @ grid.invariant_basis.T
        noise = (rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size)) * envelope
        micro = noise - grid.project_invariants(noise)
        scale = 10.0 ** rng.uniform(-2.0, 1.0)
        u = macro + scale * micro / np.sqrt(grid.norm_sq(micro))
        states.append(make_modal_state(grid, k, u))
    return states


def calibrate_energy_spec(grid: VelocityGrid, gamma: float, radii: Sequence[float], ell: float = 0.0,
                          n_samples: int = 1000, seed: int = 0, max_halvings: int = 40) -> EnergySpec:
    """
    kappa2 is the largest power of 1/2 for which E with the interactive term stays within
    [0.5, 2] times E without it on every sample; kappa3 = kappa4 = kappa2 / 4 and kappa1 = 1.
    """
    samples = sample_states(grid, radii, n_samples, seed)
    kappa2 = 1.0
    for _ in range(max_halvings):
        spec = EnergySpec(ell=ell, gamma=gamma, kappa1=1.0, kappa2=kappa2, kappa3=kappa2 / 4, kappa4=kappa2 / 4)
        terms = [energy_terms(grid, spec, s) for s in samples]
        ratios = [(b + kappa2 * i + w) / (b + w) for (b, i, w) in terms]
        if EQUIVALENCE_WINDOW[0] <= min(ratios) and max(ratios) <= EQUIVALENCE_WINDOW[1]:
            logger.info("Calibrated kappa2 = %g (ratio range [%.3f, %.3f]).", kappa2, min(ratios), max(ratios))
            return spec
        kappa2 *= 0.5
    logger.warning("kappa2 calibration did not converge; using kappa2 = %g.", kappa2)
    return EnergySpec(ell=ell, gamma=gamma, kappa1=1.0, kappa2=kappa2, kappa3=kappa2 / 4, kappa4=kappa2 / 4)


@dataclass(frozen=True)
class LyapunovReport:
    kappa: float
    margins: np.ndarray
    interval_kappa: np.ndarray

    @property
    def positive(self) -> bool:
        return self.kappa > 0


def fit_dissipation_constant(times: Sequence[float], E: Sequence[float], D: Sequence[float],
                             tolerance: float = None) -> LyapunovReport:
    """
    Largest kappa with (E_{n+1} - E_n)/dt + kappa (D_n + D_{n+1})/2 <= tolerance on every interval.
    Intervals with no dissipation and no growth impose nothing; the result is capped at KAPPA_SENTINEL.
    """
    times = np.asarray(times, dtype=float)
    E = np.asarray(E, dtype=float)
    D = np.asarray(D, dtype=float)
    if len(times) < 2:
        return LyapunovReport(kappa=KAPPA_SENTINEL, margins=np.zeros(0), interval_kappa=np.zeros(0))
    if tolerance is None:
        tolerance = 1e-12 * float(np.max(np.abs(E))) if np.size(E) else 0.0
    rate = np.diff(E) / np.diff(times)
    mean_D = 0.5 * (D[:-1] + D[1:])
    tiny = np.finfo(float).tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        interval = np.where(mean_D > tiny, (tolerance - rate) / mean_D,
                            np.where(rate <= tolerance, np.inf, -np.inf))
    kappa = float(min(np.min(interval), KAPPA_SENTINEL))
    margins = rate + kappa * mean_D
    if kappa <= 0:
        logger.warning("Lyapunov check failed: fitted kappa = %.3e.", kappa)
    return LyapunovReport(kappa=kappa, margins=margins, interval_kappa=interval)


def verify_lyapunov(trace: "ModalTrace", spec: EnergySpec = None) -> LyapunovReport:
    """
    Fit kappa in dE_ell/dt + kappa D_ell <= 0 along a modal trace.
    With a spec, E_ell and D_ell are recomputed from the recorded states, so one trace serves several ell.
    """
    from PyVPBLab.modal_dynamics import ModalState

    if spec is None:
        return fit_dissipation_constant(trace.times, trace.energy, trace.dissipation)
    grid = trace.op.grid
    states = [ModalState(k=trace.k, u=u) for u in trace.states]
    E = [energy_E_ell(grid, spec, s) for s in states]
    D = [dissipation_D_ell(grid, spec, s) for s in states]
    return fit_dissipation_constant(trace.times, E, D)


@dataclass(frozen=True)
class EnvelopeReport:
    C_hat: float
    per_mode: List[float]
    uniformity: float
    min_margin: float
    violations: int


def weighted_decay_bound(traces: Sequence["ModalTrace"], spec: EnergySpec, ell0: float, eps: float, J: float,
                         p: float, kappa_hat: float = None, C: float = None) -> EnvelopeReport:
    """
    Check E_ell(u(t)) <= C [1 + eps rho(k) t]^{-J} E_{ell+ell0}(u(0)) over all traces with one constant.
    Reports the minimal admissible C over the traces; margins are taken against C if given, else against it.
    """
    if J <= 0 or p <= 1:
        raise ValueError("Need J > 0 and p > 1, got J={}, p={}.".format(J, p))
    if abs(ell0 - (J + p - 1.0)) > 1e-9:
        raise ValueError("ell0 = {} is inconsistent with J + p - 1 = {}.".format(ell0, J + p - 1.0))
    if not eps > 0:
        raise ValueError("eps must be positive, got {}.".format(eps))
    if kappa_hat is not None and not eps * J < kappa_hat / 4.0:
        raise ValueError("eps J = {} must stay below kappa/4 = {}.".format(eps * J, kappa_hat / 4.0))
    from PyVPBLab.modal_dynamics import ModalState

    upper = spec.with_ell(spec.ell + ell0)
    envelopes = []
    per_mode = []
    for trace in traces:
        grid = trace.op.grid
        E0 = energy_E_ell(grid, upper, ModalState(k=trace.k, u=trace.states[0]))
        E = np.array([energy_E_ell(grid, spec, ModalState(k=trace.k, u=u)) for u in trace.states])
        decay = (1.0 + eps * rho(trace.k) * np.asarray(trace.times)) ** (-J)
        envelopes.append((E, decay * E0))
        per_mode.append(float(np.max(E / (decay * E0))) if E0 > 0 else 0.0)
    C_hat = max(per_mode) if per_mode else 0.0
    positive = [c for c in per_mode if c > 0]
    uniformity = max(positive) / min(positive) if positive else 1.0
    reference = C_hat if C is None else C
    margins = np.concatenate([reference * bound - E for (E, bound) in envelopes]) if envelopes else np.zeros(1)
    scale = max((float(np.max(E)) for (E, _) in envelopes), default=0.0)
    violations = int(np.sum(margins < -1e-12 * scale))
    if violations:
        logger.warning("Weighted envelope violated at %d samples.", violations)
    return EnvelopeReport(C_hat=C_hat, per_mode=per_mode, uniformity=float(uniformity),
                          min_margin=float(np.min(margins)), violations=violations)


def split_energy(grid: VelocityGrid, spec: EnergySpec, s: "ModalState", t: float,
                 eps: float) -> Tuple[float, float, float]:
    """
    Split E^I_ell over mu^2 <= 1 + eps rho t and its complement, and return (E^I<, E^I>, E^II)
    with E^II = |(a, b, c)|^2 + |a|^2 / |k|^2.
    """
    ms, _, micro = project_P(grid, s.u)
    mu = mu_weight(grid, spec.gamma)
    inner_region = mu ** 2 <= 1.0 + eps * rho(s.k) * t
    k2 = float(np.dot(s.k, s.k))
    parts = [f for (f, active) in ((micro, k2 <= 1.0), (s.u, k2 >= 1.0)) if active]
    low = sum(grid.norm_sq(np.where(inner_region, mu ** spec.ell * f, 0.0)) for f in parts)
    high = sum(grid.norm_sq(np.where(inner_region, 0.0, mu ** spec.ell * f)) for f in parts)
    fluid = abs(ms.a) ** 2 + np.sum(np.abs(ms.b) ** 2) + abs(ms.c) ** 2
    return float(low), float(high), float(fluid + abs(grid.density_moment(s.u)) ** 2 / k2)
