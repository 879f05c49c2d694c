"""
Coarse nonlinear solver on a periodic interval in x with the full three dimensional velocity grid.
The state u(x, xi) is an array of shape (n_x, grid.size); x derivatives are spectral,
xi derivatives are finite differences on the lattice.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np
import scipy.fft

from PyVPBLab.autoinit import AutoInit
from PyVPBLab.collision_core import CollisionOperator, apply_L, gamma_bilinear
from PyVPBLab.decay import micro_profile
from PyVPBLab.functionals import LyapunovReport, fit_dissipation_constant
from PyVPBLab.macro_micro import moments_theta_lambda, project_P
from PyVPBLab.results import NonlinearTrace
from PyVPBLab.runner import EvolutionRunner, RK4Runner, uniform_stamps
from PyVPBLab.velocity_space import LAMBDA_MAX, Q_MAX, THETA_MAX, VelocityGrid, WeightSpec, bracket, \
    velocity_derivative, weight_on_grid

logger = logging.getLogger(__name__)

POISSON_MEAN_TOLERANCE = 1e-12
STABILITY_SAFETY = 0.5
X_RISE_TOLERANCE = 1e-2
MONOTONE_BAND = 1e-6
MAX_DOUBLINGS = 16
CALIBRATION_STEP = 1e-4

DESK_DEVIATION = ("Energy functionals track N_desk derivatives (default 1) "
                  "instead of the N >= 8 required by the global existence theory.")


def desk_ell(ell0: float, gamma: float) -> float:
    """Default weight order 2 + ceil(ell0 / 2 - 1 / gamma) of the nonlinear runs."""
    return 2.0 + float(np.ceil(ell0 / 2.0 - 1.0 / gamma))


class NonlinearConfig(AutoInit):
    length: float = 4.0 * np.pi
    n_x: int = 8
    eps0: float = 1e-3
    harmonic: int = 1
    n_desk: int = 1
    ell: float = 5.0
    ell0: float = 3.0
    q: float = 0.0
    lam: float = 0.01
    theta: float = 0.25
    gamma: float = -1.0
    kappa1: float = 1.0
    T: float = 50.0
    dt: float = 0.0  # 0 selects the stability bound
    n_stamps: int = 50

    def violations(self) -> List[str]:
        problems = []
        if not self.length > 0:
            problems.append("length must be positive, got {}".format(self.length))
        if self.n_x < 4:
            problems.append("n_x must be at least 4, got {}".format(self.n_x))
        if not 1 <= self.harmonic < self.n_x / 2:
            problems.append("harmonic must lie in [1, n_x/2), got {}".format(self.harmonic))
        if not self.eps0 > 0:
            problems.append("eps0 must be positive, got {}".format(self.eps0))
        if self.n_desk < 1:
            problems.append("n_desk must be at least 1, got {}".format(self.n_desk))
        if self.ell < 1 + self.n_desk:
            problems.append("ell must satisfy ell >= 1 + n_desk = {}, got {}".format(1 + self.n_desk, self.ell))
        if not 0.0 <= self.q <= Q_MAX:
            problems.append("q must lie in [0, {}], got {}".format(Q_MAX, self.q))
        if not 0.0 < self.lam <= LAMBDA_MAX:
            problems.append("lam must lie in (0, {}], got {}".format(LAMBDA_MAX, self.lam))
        if not 0.0 < self.theta <= THETA_MAX:
            problems.append("theta must satisfy 0 < theta <= 1/4, got {}".format(self.theta))
        if not -3.0 < self.gamma < 0.0:
            problems.append("gamma must lie in (-3, 0), got {}".format(self.gamma))
        if not self.T > 0:
            problems.append("T must be positive, got {}".format(self.T))
        if self.dt < 0:
            problems.append("dt must be non-negative, got {}".format(self.dt))
        if self.n_stamps < 1:
            problems.append("n_stamps must be at least 1, got {}".format(self.n_stamps))
        return problems

    def weight(self, tau: float) -> WeightSpec:
        return WeightSpec(tau=tau, q=self.q, lam=self.lam, theta=self.theta, gamma=self.gamma)


@dataclass(frozen=True, eq=False)
class FieldState:
    u: np.ndarray
    phi: np.ndarray
    length: float
    t: float = 0.0

    @property
    def n_x(self) -> int:
        return self.u.shape[0]


def x_grid(n_x: int, length: float) -> np.ndarray:
    return np.arange(n_x) * (length / n_x)


def wavenumbers(n_x: int, length: float) -> np.ndarray:
    return 2.0 * np.pi * scipy.fft.rfftfreq(n_x, d=length / n_x)


def spatial_derivative(f: np.ndarray, length: float, axis: int = 0, order: int = 1) -> np.ndarray:
    """
    Spectral derivative of a periodic array along `axis`.
    For odd orders on an even number of points the Nyquist mode is dropped, so real input stays real.
    """
    f = np.asarray(f)
    if order == 0:
        return f.copy()
    if np.iscomplexobj(f):
        return spatial_derivative(f.real, length, axis, order) + 1j * spatial_derivative(f.imag, length, axis, order)
    n = f.shape[axis]
    multiplier = (1j * wavenumbers(n, length)) ** order
    if order % 2 == 1 and n % 2 == 0:
        multiplier[-1] = 0.0
    shape = [1] * f.ndim
    shape[axis] = len(multiplier)
    spectrum = scipy.fft.rfft(f, axis=axis) * multiplier.reshape(shape)
    return scipy.fft.irfft(spectrum, n=n, axis=axis)


def _cell(length: float, n_x: int) -> float:
    return length / n_x


def solve_poisson(grid: VelocityGrid, u: np.ndarray, length: float) -> np.ndarray:
    """
    Zero-mean periodic solution of d_x^2 phi = <M^{1/2}, u>.
    A nonzero spatial mean of the source is removed first.
    """
    grid.check_shape(u)
    source = np.real(grid.density_moment(u))
    mean = float(np.mean(source))
    if abs(mean) > POISSON_MEAN_TOLERANCE * max(1.0, float(np.max(np.abs(source)))):
        logger.warning("Removed the spatial mean %.3e of the Poisson source.", mean)
    n = len(source)
    spectrum = scipy.fft.rfft(source - mean)
    k = wavenumbers(n, length)
    spectrum[0] = 0.0
    spectrum[1:] /= -k[1:] ** 2
    return scipy.fft.irfft(spectrum, n=n)


def make_field_state(grid: VelocityGrid, u: np.ndarray, length: float, t: float = 0.0) -> FieldState:
    u = np.asarray(u, dtype=float)
    if u.ndim != 2:
        raise ValueError("Field states need shape (n_x, {}), got {}.".format(grid.size, u.shape))
    grid.check_shape(u)
    return FieldState(u=u, phi=solve_poisson(grid, u, length), length=float(length), t=float(t))


def force_term(grid: VelocityGrid, u: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """
    -d_x phi d_{xi_1} u + 1/2 xi_1 d_x phi u, with its density moment removed;
    the continuum term carries no density.
    """
    d = np.asarray(dphi)[:, None]
    F = -d * velocity_derivative(grid, u, 0) + 0.5 * d * grid.nodes[:, 0] * u
    mass = np.dot(grid.quad_weights, grid.maxwellian_values)
    return F - (grid.density_moment(F) / mass)[:, None] * grid.sqrt_maxwellian


def nonlinear_source_G(op: CollisionOperator, u: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    """Gamma(u, u) + 1/2 xi_1 d_x phi u - d_x phi d_{xi_1} u at every x."""
    return gamma_bilinear(op, u, u) + force_term(op.grid, u, dphi)


def _rhs(op: CollisionOperator, u: np.ndarray, length: float, linear: bool = False) -> np.ndarray:
    grid = op.grid
    xi1 = grid.nodes[:, 0]
    dphi = spatial_derivative(solve_poisson(grid, u, length), length)
    out = -xi1 * spatial_derivative(u, length) + dphi[:, None] * xi1 * grid.sqrt_maxwellian + apply_L(op, u)
    if not linear:
        out = out + nonlinear_source_G(op, u, dphi)
    return out


def nonlinear_rhs(op: CollisionOperator, state: FieldState, linear: bool = False) -> np.ndarray:
    """
    du/dt = -xi_1 d_x u + d_x phi xi_1 M^{1/2} + L u + Gamma(u, u) + 1/2 xi_1 d_x phi u - d_x phi d_{xi_1} u.
    :param linear: drop the three quadratic terms.
    """
    op.grid.check_shape(state.u)
    return _rhs(op, state.u, state.length, linear)


def stable_time_step(op: CollisionOperator, n_x: int, length: float, field_max: float = 0.0,
                     safety: float = STABILITY_SAFETY) -> float:
    """Explicit step bound from transport, the force term at the given max |d_x phi| and the collision part."""
    grid = op.grid
    k_max = np.pi * n_x / length
    force = field_max * (2.0 / grid.spacing + 0.5 * grid.extent)
    rate = grid.extent * k_max + force + float(np.max(op.nu)) + op.norm_K_inf
    return safety / rate


def _field_max(grid: VelocityGrid, u: np.ndarray, length: float) -> float:
    return float(np.max(np.abs(spatial_derivative(solve_poisson(grid, u, length), length))))


def initial_state(config: NonlinearConfig, grid: VelocityGrid) -> FieldState:
    """
    Neutral single harmonic: a = eps0 sin(kx), b_1 = eps0/2 cos(kx), c = eps0/2 sin(kx)
    and a micro part eps0/2 cos(kx) chi(xi).
    """
    x = x_grid(config.n_x, config.length)
    kx = 2.0 * np.pi * config.harmonic / config.length * x
    psi = grid.invariant_basis
    eps = config.eps0
    u = (eps * np.sin(kx)[:, None] * psi[:, 0]
         + 0.5 * eps * np.cos(kx)[:, None] * psi[:, 1]
         + 0.5 * eps * np.sin(kx)[:, None] * psi[:, 4]
         + 0.5 * eps * np.cos(kx)[:, None] * micro_profile(grid))
    return make_field_state(grid, u, config.length)


def _sq(grid: VelocityGrid, f: np.ndarray, length: float) -> float:
    return _cell(length, f.shape[0]) * float(np.sum(grid.norm_sq(f)))


def _field_sq(f: np.ndarray, length: float) -> float:
    return _cell(length, f.shape[0]) * float(np.sum(np.abs(f) ** 2))


def _derivatives(grid: VelocityGrid, f: np.ndarray, length: float, order: int) -> Iterator[Tuple[int, tuple, np.ndarray]]:
    """(alpha, beta, d_x^alpha d_xi^beta f) for every alpha + |beta| <= order."""
    for alpha in range(order + 1):
        fx = spatial_derivative(f, length, axis=0, order=alpha)
        for m in range(order - alpha + 1):
            for beta in itertools.combinations_with_replacement(range(3), m):
                g = fx
                for axis in beta:
                    g = velocity_derivative(grid, g, axis)
                yield alpha, beta, g


class EnergyParts(NamedTuple):
    base: float  # sum |d^a u|^2 + |d^a d_x phi|^2 - int |b|^2 (a + 2c)
    interactive: float
    weighted: float  # |w (I-P) u|^2 + sum_{a >= 1} |w d^a u|^2
    mixed: np.ndarray  # per velocity order m >= 1
    triple_sq: float


class EnergyValues(NamedTuple):
    E: float
    D: float
    triple_sq: float


@dataclass(frozen=True)
class NonlinearConstants:
    """Combination constants of the nonlinear energy functional, with their calibration diagnostics."""
    M1: float = 1.0
    M2: float = 1.0
    M3: float = 1.0
    C: Tuple[float, ...] = (1.0,)
    kappa: float = 0.0
    equivalence: Tuple[float, float] = (0.0, 0.0)

    def combine(self, parts: EnergyParts) -> float:
        inner = self.M2 * (0.5 * self.M1 * parts.base + parts.interactive) + parts.weighted
        return float(self.M3 * inner + np.dot(self.C[:len(parts.mixed)], parts.mixed))

    def as_dict(self):
        return {"M1": self.M1, "M2": self.M2, "M3": self.M3, "C": list(self.C), "kappa": self.kappa,
                "equivalence": list(self.equivalence)}


def _interactive(grid: VelocityGrid, u: np.ndarray, length: float, order: int, kappa1: float) -> float:
    ms, _, micro = project_P(grid, u)
    cell = _cell(length, u.shape[0])
    total = 0.0
    for alpha in range(order):
        a, b, c = (spatial_derivative(f, length, axis=0, order=alpha) for f in (ms.a, ms.b, ms.c))
        mt = moments_theta_lambda(grid, spatial_derivative(micro, length, axis=0, order=alpha))
        da, db, dc = (spatial_derivative(f, length, axis=0) for f in (a, b, c))
        strain = np.zeros(db.shape[:1] + (3, 3))
        strain[:, 0, 0] = 4.0 / 3.0 * db[:, 0]
        strain[:, 1, 1] = strain[:, 2, 2] = -2.0 / 3.0 * db[:, 0]
        strain[:, 0, 1] = strain[:, 1, 0] = db[:, 1]
        strain[:, 0, 2] = strain[:, 2, 0] = db[:, 2]
        total += cell * float(np.sum(dc * mt.lam[:, 0]) + np.sum(strain * mt.theta)
                              + kappa1 * np.sum(da * b[:, 0]))
    return total


def energy_parts(op: CollisionOperator, u: np.ndarray, t: float, config: NonlinearConfig,
                 ell: float = None) -> EnergyParts:
    grid, length, order = op.grid, config.length, config.n_desk
    ell = config.ell if ell is None else ell
    ms, _, micro = project_P(grid, u)
    dphi = spatial_derivative(solve_poisson(grid, u, length), length)
    cell = _cell(length, u.shape[0])

    base = sum(_sq(grid, spatial_derivative(u, length, order=alpha), length)
               + _field_sq(spatial_derivative(dphi, length, order=alpha), length) for alpha in range(order + 1))
    base -= cell * float(np.sum(np.sum(ms.b ** 2, axis=-1) * (ms.a + 2.0 * ms.c)))
    interactive = _interactive(grid, u, length, order, config.kappa1)

    weights = {m: weight_on_grid(config.weight(m - ell), t, grid) for m in range(order + 1)}
    weighted = _sq(grid, weights[0] * micro, length)
    weighted += sum(_sq(grid, weights[0] * spatial_derivative(u, length, order=alpha), length)
                    for alpha in range(1, order + 1))
    mixed = np.zeros(order)
    for (alpha, beta, g) in _derivatives(grid, micro, length, order):
        if beta:
            mixed[len(beta) - 1] += _sq(grid, weights[len(beta)] * g, length)

    triple = sum(np.sqrt(_sq(grid, weights[len(beta)] * g, length)) for (_, beta, g) in
                 _derivatives(grid, u, length, order))
    triple += np.sqrt(sum(_field_sq(spatial_derivative(dphi, length, order=alpha), length)
                          for alpha in range(order + 1)))
    return EnergyParts(base=float(base), interactive=float(interactive), weighted=float(weighted), mixed=mixed,
                       triple_sq=float(triple) ** 2)


def dissipation(op: CollisionOperator, u: np.ndarray, t: float, config: NonlinearConfig, ell: float = None) -> float:
    grid, length, order = op.grid, config.length, config.n_desk
    ell = config.ell if ell is None else ell
    ms, _, micro = project_P(grid, u)
    sqrt_nu = np.sqrt(op.nu)
    xi_weight = bracket(grid.nodes)
    decay = (1.0 + t) ** (-1.0 - config.theta)
    total = 0.0
    for (alpha, beta, g) in _derivatives(grid, micro, length, order):
        w = weight_on_grid(config.weight(len(beta) - ell), t, grid)
        total += _sq(grid, sqrt_nu * w * g, length) + decay * _sq(grid, xi_weight * w * g, length)
    total += _field_sq(ms.a, length)
    for alpha in range(order):
        for f in (ms.a, ms.b, ms.c):
            total += _field_sq(spatial_derivative(f, length, axis=0, order=alpha + 1), length)
    return float(total)


def energy_functional_nonlinear(op: CollisionOperator, state: FieldState, config: NonlinearConfig,
                                constants: NonlinearConstants = None, ell: float = None) -> EnergyValues:
    """
    Energy E, dissipation D and the squared reference norm |||u|||^2 at weight order ell (config.ell by default).
    """
    constants = constants if constants is not None else NonlinearConstants(C=(1.0,) * config.n_desk)
    parts = energy_parts(op, state.u, state.t, config, ell)
    return EnergyValues(E=constants.combine(parts), D=dissipation(op, state.u, state.t, config, ell),
                        triple_sq=parts.triple_sq)


def sample_fields(grid: VelocityGrid, config: NonlinearConfig, count: int, seed: int = 0) -> List[np.ndarray]:
    """Random zero-mean states of amplitude eps0 built from low harmonics of all five fluid fields and a micro part."""
    rng = np.random.default_rng(seed)
    x = x_grid(config.n_x, config.length)
    harmonics = np.arange(1, max(2, config.n_x // 2))
    envelope = np.sqrt(grid.sqrt_maxwellian)

    def wave():
        m = rng.choice(harmonics)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return np.cos(2.0 * np.pi * m * x / config.length + phase)

    samples = []
    for _ in range(count):
        macro = sum(rng.standard_normal() * wave()[:, None] * grid.invariant_basis[:, i] for i in range(5))
        noise = rng.standard_normal(grid.size) * envelope
        chi = noise - grid.project_invariants(noise)
        chi /= np.sqrt(grid.norm_sq(chi))
        micro = 10.0 ** rng.uniform(-1.0, 1.0) * wave()[:, None] * chi
        samples.append(config.eps0 * (macro + micro))
    return samples


def _parts_vector(parts: EnergyParts) -> np.ndarray:
    return np.concatenate([[parts.base, parts.interactive, parts.weighted], parts.mixed])


def calibrate_constants(op: CollisionOperator, config: NonlinearConfig, n_samples: int = 32,
                        seed: int = 0) -> NonlinearConstants:
    """
    Smallest powers of 2 for M1, M2, M3 such that on random samples the leading block dominates the
    cubic and interactive terms and the linearized flow makes E decrease wherever D > 0.
    C_m stay at 1: for one velocity order the single C is redundant with M3.
    """
    samples = sample_fields(op.grid, config, n_samples, seed)
    h = CALIBRATION_STEP
    values, rates, D, triple = [], [], [], []
    for u in samples:
        v = _rhs(op, u, config.length, linear=True)
        p0, p1, p2 = (_parts_vector(energy_parts(op, u + s * h * v, s * h, config)) for s in (0, 1, 2))
        values.append(p0)
        rates.append((-3.0 * p0 + 4.0 * p1 - p2) / (2.0 * h))
        D.append(dissipation(op, u, 0.0, config))
        triple.append(energy_parts(op, u, 0.0, config).triple_sq)
    values, rates, D, triple = (np.asarray(x) for x in (values, rates, D, triple))
    C = np.ones(config.n_desk)

    def combine(parts, M1, M2, M3):
        return M3 * (M2 * (0.5 * M1 * parts[:, 0] + parts[:, 1]) + parts[:, 2]) + parts[:, 3:] @ C

    positive = D > 0
    best = None
    for total in range(3 * MAX_DOUBLINGS):
        for j1 in range(min(total, MAX_DOUBLINGS - 1) + 1):
            for j2 in range(min(total - j1, MAX_DOUBLINGS - 1) + 1):
                M1, M2, M3 = 2.0 ** j1, 2.0 ** j2, 2.0 ** (total - j1 - j2)
                if np.any(0.5 * M1 * values[:, 0] + values[:, 1] < 0.25 * M1 * values[:, 0]):
                    continue
                rate = combine(rates, M1, M2, M3)
                if np.all(rate[positive] < 0):
                    best = (M1, M2, M3)
                    break
            if best is not None:
                break
        if best is not None:
            break
    if best is None:
        best = (2.0 ** (MAX_DOUBLINGS - 1),) * 3
        logger.warning("Combination constants did not reach a decreasing energy on all samples; using M = %g.",
                       best[0])
    M1, M2, M3 = best
    E = combine(values, M1, M2, M3)
    rate = combine(rates, M1, M2, M3)
    kappa = float(np.min(-rate[positive] / D[positive])) if np.any(positive) else 0.0
    ratios = E[triple > 0] / triple[triple > 0]
    equivalence = (float(np.min(ratios)), float(np.max(ratios))) if len(ratios) else (0.0, 0.0)
    constants = NonlinearConstants(M1=M1, M2=M2, M3=M3, C=tuple(C), kappa=kappa, equivalence=equivalence)
    logger.info("Calibrated M1 = %g, M2 = %g, M3 = %g; kappa = %.3e, E / |||u|||^2 in [%.3g, %.3g].",
                M1, M2, M3, kappa, equivalence[0], equivalence[1])
    return constants


def initial_data_size(grid: VelocityGrid, u0: np.ndarray, config: NonlinearConfig) -> float:
    """
    Weighted derivative norms of u0 at t = 0 plus |(1 + |x| + <xi>^{-gamma ell0/2}) u0| in L^2_xi(L^1_x),
    with |x| the periodic distance to the origin.
    """
    length = config.length
    total = 0.0
    for (_, beta, g) in _derivatives(grid, u0, length, config.n_desk):
        w = weight_on_grid(config.weight(len(beta) - config.ell), 0.0, grid)
        total += np.sqrt(_sq(grid, w * g, length))
    x = x_grid(u0.shape[0], length)
    distance = np.minimum(x, length - x)
    moment = bracket(grid.nodes) ** (-0.5 * config.gamma * config.ell0)
    l1 = _cell(length, u0.shape[0]) * np.sum((1.0 + distance[:, None] + moment) * np.abs(u0), axis=0)
    return float(total + np.sqrt(grid.norm_sq(l1)))


def record_field_state(trace: NonlinearTrace, t: float, u: np.ndarray, keep_state: bool = True):
    op, config, length = trace.op, trace.config, trace.length
    grid = op.grid
    phi = solve_poisson(grid, u, length)
    dphi = spatial_derivative(phi, length)
    state = FieldState(u=u, phi=phi, length=length, t=t)
    upper = energy_functional_nonlinear(op, state, config, trace.constants)
    lower = energy_parts(op, u, t, config, config.ell - 1.0)
    trace.times.append(float(t))
    if keep_state:
        trace.states.append(np.array(u, copy=True))
    trace.mass.append(_cell(length, u.shape[0]) * float(np.sum(grid.density_moment(u))))
    trace.total_energy.append(_sq(grid, u, length) + _field_sq(dphi, length))
    trace.energy.append(upper.E)
    trace.energy_lower.append(trace.constants.combine(lower))
    trace.dissipation.append(upper.D)
    trace.field_norm.append(np.sqrt(_field_sq(dphi, length)))
    trace.phi_xx_sq.append(sum(_field_sq(spatial_derivative(phi, length, order=alpha + 2), length)
                               for alpha in range(config.n_desk)))
    trace.norm_u.append(np.sqrt(_sq(grid, u, length)))
    trace.min_f.append(float(np.min(grid.maxwellian_values + grid.sqrt_maxwellian * u)))


def evolve_nonlinear(op: CollisionOperator, state0: FieldState, T: float, dt: float = None,
                     config: NonlinearConfig = None, constants: NonlinearConstants = None,
                     stamps: Sequence[float] = None, runner: EvolutionRunner = None, keep_states: bool = True,
                     linear: bool = False) -> NonlinearTrace:
    """
    Integrate from state0 to T with RK4 and record the diagnostics at every stamp.
    A step above the stability bound (at the initial field or at any later stamp) sets trace.cfl_violation.
    :param linear: evolve the linearized system instead, for consistency checks.
    """
    grid = op.grid
    if config is None:
        config = NonlinearConfig(length=state0.length, n_x=max(4, state0.n_x), gamma=op.config.gamma)
    if not np.isclose(config.length, state0.length):
        raise ValueError("Configuration length {} differs from the state length {}.".format(
            config.length, state0.length))
    constants = constants if constants is not None else calibrate_constants(op, config)
    length = state0.length
    bound = stable_time_step(op, state0.n_x, length, _field_max(grid, state0.u, length))
    dt = bound if dt is None else dt
    stamps = uniform_stamps(T, config.n_stamps) if stamps is None else stamps
    trace = NonlinearTrace(op, length, config, constants)
    trace.initial_size = initial_data_size(grid, state0.u, config)
    trace.mass_scale = _cell(length, state0.n_x) * float(np.sum(grid.density_moment(np.abs(state0.u))))

    def check_step(u):
        if not trace.cfl_violation and dt > stable_time_step(op, state0.n_x, length, _field_max(grid, u, length)):
            trace.cfl_violation = True
            logger.warning("Step %.3e exceeds the explicit stability bound.", dt)

    def snapshot(t, u):
        check_step(u)
        record_field_state(trace, t, u, keep_states)

    def norm(u):
        dphi = spatial_derivative(solve_poisson(grid, u, length), length)
        return np.sqrt(_sq(grid, u, length) + _field_sq(dphi, length))

    runner = runner if runner is not None else RK4Runner(dt)
    runner.run(lambda t, u: _rhs(op, u, length, linear), np.asarray(state0.u, dtype=float), stamps, snapshot,
               norm=norm)
    return trace


def linearization_gap(nonlinear: NonlinearTrace, linear: NonlinearTrace) -> np.ndarray:
    """|u_nonlinear(t) - u_linear(t)| per stamp; both traces must share stamps and keep states."""
    if len(nonlinear.states) != len(linear.states):
        raise ValueError("Traces hold {} and {} states.".format(len(nonlinear.states), len(linear.states)))
    grid = nonlinear.op.grid
    return np.array([np.sqrt(_sq(grid, a - b, nonlinear.length)) for (a, b) in zip(nonlinear.states, linear.states)])


@dataclass
class XReport:
    times: np.ndarray
    X: np.ndarray
    ratio: np.ndarray  # X / eps^2
    eps: float
    final_half_rise: float
    bounded: bool


def track_X(trace: NonlinearTrace) -> XReport:
    """
    Running sup-energy sup E_ell + sup (1+s)^{3/2} E_{ell-1} + sup (1+s)^{5/2} |d_x^2 phi|^2,
    and whether it has stopped rising over the final half of the run.
    """
    if not trace.times:
        raise ValueError("Cannot track the sup-energy of an empty trace.")
    t = np.asarray(trace.times, dtype=float)
    X = (np.maximum.accumulate(np.asarray(trace.energy))
         + np.maximum.accumulate((1.0 + t) ** 1.5 * np.asarray(trace.energy_lower))
         + np.maximum.accumulate((1.0 + t) ** 2.5 * np.asarray(trace.phi_xx_sq)))
    eps = trace.initial_size
    ratio = X / eps ** 2 if eps > 0 else np.zeros_like(X)
    middle = int(np.searchsorted(t, 0.5 * t[-1]))
    rise = float((X[-1] - X[middle]) / X[-1]) if X[-1] > 0 else 0.0
    bounded = rise <= X_RISE_TOLERANCE
    if not bounded:
        logger.warning("Sup-energy still rose by %.2e over the final half of the run.", rise)
    return XReport(times=t, X=X, ratio=ratio, eps=eps, final_half_rise=rise, bounded=bounded)


@dataclass(frozen=True)
class MonotonicityReport:
    max_rise: float  # relative to max |E|
    violations: int


def check_energy_monotone(trace: NonlinearTrace, band: float = MONOTONE_BAND) -> MonotonicityReport:
    E = np.asarray(trace.energy, dtype=float)
    scale = float(np.max(np.abs(E))) if len(E) else 0.0
    if len(E) < 2 or scale == 0:
        return MonotonicityReport(max_rise=0.0, violations=0)
    rises = np.diff(E) / scale
    violations = int(np.sum(rises > band))
    if violations:
        logger.warning("Nonlinear energy rose above the %.0e band on %d intervals.", band, violations)
    return MonotonicityReport(max_rise=float(np.max(rises)), violations=violations)


def verify_nonlinear_lyapunov(trace: NonlinearTrace) -> LyapunovReport:
    return fit_dissipation_constant(trace.times, trace.energy, trace.dissipation)
