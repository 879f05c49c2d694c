"""
Macro-micro decomposition u = Pu + (I - P)u, the fluid fields (a, b, c),
the moment functionals Theta and Lambda, and residuals of the fluid-type moment system.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from PyVPBLab.collision_core import apply_L
from PyVPBLab.velocity_space import VelocityGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MacroState:
    """
    Fluid fields of a state. Leading axes (space points, Fourier modes, time samples) are kept:
    a and c have the leading shape, b has a trailing axis of length 3.
    """
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.a)[..., None], self.b, np.asarray(self.c)[..., None]], axis=-1)


@dataclass(frozen=True)
class MomentTensors:
    theta: np.ndarray
    lam: np.ndarray


def project_P(grid: VelocityGrid, u: np.ndarray) -> Tuple[MacroState, np.ndarray, np.ndarray]:
    coefficients = grid.invariant_coefficients(u)
    ms = MacroState(a=coefficients[..., 0], b=coefficients[..., 1:4], c=coefficients[..., 4])
    Pu = coefficients @ grid.invariant_basis.T
    return ms, Pu, u - Pu


def split_P0_P1(grid: VelocityGrid, ms: MacroState) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hyperbolic part a M^{1/2} and parabolic part [b.xi + c(|xi|^2 - 3)] M^{1/2}.
    The grid supplies the invariant basis the coefficients of ms refer to.
    """
    psi = grid.invariant_basis
    P0u = np.asarray(ms.a)[..., None] * psi[:, 0]
    P1u = ms.b @ psi[:, 1:4].T + np.asarray(ms.c)[..., None] * psi[:, 4]
    return P0u, P1u


def moment_weights(grid: VelocityGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    Node functions (xi_i xi_j - delta_ij) M^{1/2} of shape (3, 3, size)
    and (|xi|^2 - 5) xi_i M^{1/2} / 10 of shape (3, size).
    """
    s = grid.sqrt_maxwellian
    xi = grid.nodes.T
    theta = (xi[:, None, :] * xi[None, :, :] - np.eye(3)[:, :, None]) * s
    lam = 0.1 * (grid.speed_sq - 5.0) * xi * s
    return theta, lam


def moments_theta_lambda(grid: VelocityGrid, v: np.ndarray) -> MomentTensors:
    grid.check_shape(v)
    theta_w, lam_w = moment_weights(grid)
    weighted = v * grid.quad_weights
    theta = weighted @ theta_w.reshape(9, -1).T
    theta = theta.reshape(np.shape(v)[:-1] + (3, 3))
    return MomentTensors(theta=theta, lam=weighted @ lam_w.T)


def density_moment(grid: VelocityGrid, u: np.ndarray):
    return grid.density_moment(u)


def time_derivative(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    edge_order = 2 if len(times) >= 3 else 1
    return np.gradient(values, times, axis=0, edge_order=edge_order)


def _max_abs(x) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def _moment_system(grid, dt_fields, grad, ms, mt, source_theta, source_lam, field_terms) -> Dict[str, float]:
    """
    Residuals of the moment system for fields with a gradient operator `grad`:
    grad(f) returns the gradient components of f along a trailing axis of length 3.
    """
    da, db, dc, dtheta, dlam = dt_fields
    ga, gb, gc = grad(ms.a), grad(ms.b), grad(ms.c)
    eye = np.eye(3)
    div_b = np.einsum("...ii->...", gb)
    div_lam = np.einsum("...ii->...", grad(mt.lam))
    div_theta = np.einsum("...ijj->...i", grad(mt.theta))
    sym_grad_b = gb + np.swapaxes(gb, -1, -2)
    e_a, e_b, e_c, e_theta = field_terms
    return {
        "mass": _max_abs(da + div_b),
        "momentum": _max_abs(db + ga + 2.0 * gc + div_theta - e_b),
        "energy": _max_abs(dc + div_b / 3.0 + 5.0 / 3.0 * div_lam - e_c),
        "theta": _max_abs(dtheta + sym_grad_b - 2.0 / 3.0 * div_b[..., None, None] * eye
                          - 10.0 / 3.0 * div_lam[..., None, None] * eye - source_theta - e_theta),
        "lambda": _max_abs(dlam + gc - source_lam),
        "field": _max_abs(e_a),
    }


def fluid_residual(trace, op=None) -> Dict[str, float]:
    """
    Evaluate the fluid-type moment system along a trace and return the max residual per equation.
    Time derivatives use second order differences over the recorded stamps; space derivatives are exact
    in Fourier (modal traces) or spectral on the periodic interval (nonlinear traces).
    :param trace: a ModalTrace or a NonlinearTrace with recorded states.
    :param op: collision operator; defaults to the one the trace was produced with.
    """
    op = op if op is not None else trace.op
    times = np.asarray(trace.times, dtype=float)
    if len(times) < 3:
        raise ValueError("Fluid residuals need at least 3 samples, got {}.".format(len(times)))
    if hasattr(trace, "k"):
        return _modal_fluid_residual(op, np.asarray(trace.k, dtype=float), times, np.asarray(trace.states))
    return _nonlinear_fluid_residual(op, trace.length, times, np.asarray(trace.states))


def _modal_fluid_residual(op, k: np.ndarray, times: np.ndarray, states: np.ndarray) -> Dict[str, float]:
    grid = op.grid
    ms, Pu, micro = project_P(grid, states)
    mt = moments_theta_lambda(grid, micro)
    raw_a = grid.density_moment(states)
    k2 = float(np.dot(k, k))
    phi = -raw_a / k2

    def grad(f):
        return 1j * f[..., None] * k

    r = -1j * (grid.nodes @ k) * micro + apply_L(op, states)
    src = moments_theta_lambda(grid, r)
    dt_fields = [time_derivative(times, x) for x in (ms.a, ms.b, ms.c, mt.theta, mt.lam)]
    field_terms = (-k2 * phi - raw_a, grad(phi), 0.0, 0.0)
    report = _moment_system(grid, dt_fields, grad, ms, mt, src.theta, src.lam, field_terms)
    report["poisson"] = report.pop("field")
    return report


def _nonlinear_fluid_residual(op, length: float, times: np.ndarray, states: np.ndarray) -> Dict[str, float]:
    from PyVPBLab.nonlinear_1d import nonlinear_source_G, solve_poisson, spatial_derivative

    grid = op.grid
    ms, Pu, micro = project_P(grid, states)
    mt = moments_theta_lambda(grid, micro)
    raw_a = grid.density_moment(states)
    phi = np.stack([solve_poisson(grid, u, length) for u in states])
    dphi = spatial_derivative(phi, length, axis=1)
    e1 = np.array([1.0, 0.0, 0.0])

    def grad(f):
        return spatial_derivative(f, length, axis=1)[..., None] * e1

    r = -grid.nodes[:, 0] * spatial_derivative(micro, length, axis=1) + apply_L(op, states)
    G = np.stack([nonlinear_source_G(op, u, d) for (u, d) in zip(states, dphi)])
    src = moments_theta_lambda(grid, r + G)
    dt_fields = [time_derivative(times, x) for x in (ms.a, ms.b, ms.c, mt.theta, mt.lam)]
    poisson = spatial_derivative(phi, length, axis=1, order=2) - (raw_a - raw_a.mean(axis=1, keepdims=True))
    e_b = (dphi * (1.0 + ms.a))[..., None] * e1
    e_c = dphi * ms.b[..., 0] / 3.0
    e_theta = -2.0 / 3.0 * (dphi * ms.b[..., 0])[..., None, None] * np.eye(3)
    report = _moment_system(grid, dt_fields, grad, ms, mt, src.theta, src.lam, (poisson, e_b, e_c, e_theta))
    report["poisson"] = report.pop("field")
    return report
