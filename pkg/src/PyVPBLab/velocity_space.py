"""
Discrete velocity domain: the truncated tensor lattice, its quadrature,
the global Maxwellian and the time-velocity weight family.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List

import numpy as np
import scipy.linalg

from PyVPBLab.autoinit import AutoInit

logger = logging.getLogger(__name__)

Q_MAX = 0.05
LAMBDA_MAX = 0.05
THETA_MAX = 0.25

DEFAULT_TOL_MASS = 1e-6

N_INVARIANTS = 5


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """
    Uniform tensor lattice of n points per axis on [-R, R]^3 with product trapezoid weights.
    Nodes are flattened in C order, so node (i, j, k) has index (i * n + j) * n + k.
    Functions on the grid are arrays whose last axis runs over the nodes.
    """
    extent: float
    n: int
    axis: np.ndarray
    nodes: np.ndarray
    quad_weights: np.ndarray
    tol_mass: float

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacing(self) -> float:
        return float(self.axis[1] - self.axis[0])

    @property
    def shape(self):
        return (self.n, self.n, self.n)

    @cached_property
    def speed_sq(self) -> np.ndarray:
        return np.sum(self.nodes ** 2, axis=1)

    @cached_property
    def maxwellian_values(self) -> np.ndarray:
        return maxwellian(self.nodes)

    @cached_property
    def sqrt_maxwellian(self) -> np.ndarray:
        return np.sqrt(self.maxwellian_values)

    @cached_property
    def mass_drift(self) -> float:
        return float(abs(np.dot(self.quad_weights, self.maxwellian_values) - 1.0))

    @cached_property
    def negation_index(self) -> np.ndarray:
        return np.arange(self.size)[::-1].copy()

    @cached_property
    def invariant_basis(self) -> np.ndarray:
        """
        Columns M^{1/2}, xi_1 M^{1/2}, xi_2 M^{1/2}, xi_3 M^{1/2}, (|xi|^2 - 3) M^{1/2}.
        Coefficients against these columns are exactly the fluid fields (a, b, c).
        """
        s = self.sqrt_maxwellian
        return np.column_stack([s,
                                self.nodes[:, 0] * s,
                                self.nodes[:, 1] * s,
                                self.nodes[:, 2] * s,
                                (self.speed_sq - 3.0) * s])

    @cached_property
    def invariant_gram(self) -> np.ndarray:
        psi = self.invariant_basis
        return psi.T @ (self.quad_weights[:, None] * psi)

    @cached_property
    def _gram_factor(self):
        return scipy.linalg.cho_factor(self.invariant_gram)

    def inner(self, u: np.ndarray, v: np.ndarray):
        """Quadrature inner product over the last axis, conjugate-linear in u."""
        return np.sum(self.quad_weights * np.conj(u) * v, axis=-1)

    def norm_sq(self, u: np.ndarray):
        return np.real(self.inner(u, u))

    def invariant_coefficients(self, u: np.ndarray) -> np.ndarray:
        """
        Coefficients of the quadrature-orthogonal projection of u onto the collision invariants.
        Uses the Gram matrix of the basis under grid quadrature, so the projection is exactly idempotent.
        :param u: array (..., size), real or complex.
        :return: array (..., 5)
        """
        self.check_shape(u)
        moments = (u * self.quad_weights) @ self.invariant_basis
        flat = moments.reshape(-1, N_INVARIANTS).T
        coefficients = scipy.linalg.cho_solve(self._gram_factor, flat)
        return coefficients.T.reshape(moments.shape)

    def project_invariants(self, u: np.ndarray) -> np.ndarray:
        return self.invariant_coefficients(u) @ self.invariant_basis.T

    def density_moment(self, u: np.ndarray):
        """Raw moment <M^{1/2}, u> over the last axis."""
        self.check_shape(u)
        return (u * self.quad_weights) @ self.sqrt_maxwellian

    def check_shape(self, u: np.ndarray):
        if np.shape(u)[-1:] != (self.size,):
            raise ValueError("Dimension mismatch: expected last axis of length {}, got shape {}.".format(
                self.size, np.shape(u)))

    def as_cube(self, u: np.ndarray) -> np.ndarray:
        return np.reshape(u, np.shape(u)[:-1] + self.shape)


class WeightSpec(AutoInit):
    """
    Parameters of the weight w(t, xi) = <xi>^{gamma tau} exp(<xi>^2 [q + lam / (1+t)^theta]).
    lam = 0 is accepted for diagnostics; experiment configurations require lam > 0.
    gamma is accepted on (-3, 0), wider than the range [-2, 0) where the decay and Lyapunov
    estimates built on this weight are guaranteed; scenario configuration warns outside it.
    """
    tau: float = 0.0
    q: float = 0.0
    lam: float = 0.0
    theta: float = 0.25
    gamma: float = -1.0

    def violations(self) -> List[str]:
        problems = []
        if not 0.0 <= self.q <= Q_MAX:
            problems.append("q must lie in [0, {}], got {}".format(Q_MAX, self.q))
        if not 0.0 <= self.lam <= LAMBDA_MAX:
            problems.append("lam must lie in [0, {}], got {}".format(LAMBDA_MAX, self.lam))
        if not 0.0 < self.theta <= THETA_MAX:
            problems.append("theta must satisfy 0 < theta <= 1/4, got {}".format(self.theta))
        if not -3.0 < self.gamma < 0.0:
            problems.append("gamma must lie in (-3, 0), got {}".format(self.gamma))
        return problems


def build_grid(R: float, n: int, tol_mass: float = DEFAULT_TOL_MASS) -> VelocityGrid:
    """
    Build the velocity lattice.
    :param R: half width of the cube.
    :param n: points per axis, including both faces.
    :param tol_mass: declared tolerance of the Maxwellian mass identity; a larger drift is logged.
    """
    if not R > 0:
        raise ValueError("Extent R must be positive, got {}.".format(R))
    if int(n) != n or n < 2:
        raise ValueError("Points per axis n must be an integer >= 2, got {}.".format(n))
    n = int(n)
    axis = np.linspace(-R, R, n)
    h = axis[1] - axis[0]
    w1 = np.full(n, h)
    w1[0] = w1[-1] = 0.5 * h
    mesh = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.einsum("i,j,k->ijk", w1, w1, w1).ravel()
    grid = VelocityGrid(extent=float(R), n=n, axis=axis, nodes=nodes, quad_weights=weights,
                        tol_mass=float(tol_mass))
    if grid.mass_drift > tol_mass:
        logger.warning("Maxwellian mass drift %.3e exceeds the declared tolerance %.1e on grid R=%g, n=%d.",
                       grid.mass_drift, tol_mass, R, n)
    return grid


def maxwellian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * np.sum(xi ** 2, axis=-1))


def bracket(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return np.sqrt(1.0 + np.sum(xi ** 2, axis=-1))


def exponent_rate(spec: WeightSpec, t: float) -> float:
    return spec.q + spec.lam / (1.0 + t) ** spec.theta


def weight_w(spec: WeightSpec, t: float, xi: np.ndarray) -> np.ndarray:
    if t < 0:
        raise ValueError("Time must be non-negative, got {}.".format(t))
    return _weight_values(spec, t, xi)


def _weight_values(spec: WeightSpec, t: float, xi: np.ndarray) -> np.ndarray:
    b2 = 1.0 + np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1)
    return b2 ** (0.5 * spec.gamma * spec.tau) * np.exp(b2 * exponent_rate(spec, t))


def weight_on_grid(spec: WeightSpec, t: float, grid: VelocityGrid) -> np.ndarray:
    return weight_w(spec, t, grid.nodes)


def weight_time_identity_residual(spec: WeightSpec, t: float, xi: np.ndarray, g: float,
                                  g_rate: float = 0.0, step: float = 1e-4) -> float:
    """
    Residual of w dg/dt = d(w g)/dt + lam theta <xi>^2 (1+t)^{-1-theta} w g,
    for g(s) = g + g_rate (s - t), with d(w g)/dt by a central difference.
    """
    def wg(s):
        return _weight_values(spec, s, xi) * (g + g_rate * (s - t))

    derivative = (wg(t + step) - wg(t - step)) / (2.0 * step)
    w = weight_w(spec, t, xi)
    b2 = 1.0 + np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1)
    extra = spec.lam * spec.theta * b2 / (1.0 + t) ** (1.0 + spec.theta) * w
    return float(np.max(np.abs(derivative + extra * g - w * g_rate)))


def velocity_derivative(grid: VelocityGrid, u: np.ndarray, axis: int) -> np.ndarray:
    """
    Partial derivative along velocity direction `axis` (0, 1 or 2).
    Centered second order inside, second order one-sided at the faces.
    """
    if axis not in (0, 1, 2):
        raise ValueError("Velocity axis must be 0, 1 or 2, got {}.".format(axis))
    cube = grid.as_cube(u)
    lead = cube.ndim - 3
    edge_order = 2 if grid.n >= 3 else 1
    derivative = np.gradient(cube, grid.spacing, axis=lead + axis, edge_order=edge_order)
    return derivative.reshape(np.shape(u))


def gaussian_moment_drift(grid: VelocityGrid) -> Dict[str, float]:
    w = grid.quad_weights * grid.maxwellian_values
    return {
        "mass": abs(float(np.sum(w)) - 1.0),
        "second": max(abs(float(np.dot(w, grid.nodes[:, i] ** 2)) - 1.0) for i in range(3)),
        "fourth": abs(float(np.dot(w, grid.speed_sq ** 2)) - 15.0),
    }
