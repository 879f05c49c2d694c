"""
Linearized collision operator L = -nu + K, the bilinear collision term Gamma and
the coercivity estimate, realized by quadrature on a VelocityGrid.

The cross section is |xi - xi_*|^gamma q0(theta) with q0 = c_q |cos theta|.
Off-grid post-collision values are taken by trilinear interpolation, zero outside the box.
"""
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, NamedTuple, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.special
from joblib import Parallel, delayed
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial.distance import cdist

from PyVPBLab.autoinit import AutoInit
from PyVPBLab.velocity_space import VelocityGrid

logger = logging.getLogger(__name__)

GUARANTEED_GAMMA = (-2.0, 0.0)

# Upper bound on collision points processed at once by one worker.
CHUNK_POINTS = 1 << 18

# Gain stencils with more collision points than this are streamed instead of stored.
STENCIL_POINT_BUDGET = 2_000_000

ROWS_PER_TASK = 64


class KernelAssemblyError(RuntimeError):
    pass


class CoercivityError(RuntimeError):
    def __init__(self, kappa0: float, eigenvector: np.ndarray):
        self.kappa0 = kappa0
        self.eigenvector = eigenvector
        super().__init__("Non-positive coercivity estimate {:.3e}; the offending micro eigenvector peaks at node {}."
                         .format(kappa0, int(np.argmax(np.abs(eigenvector)))))


class KernelConfig(AutoInit):
    gamma: float = -1.0
    c_q: float = 1.0
    n_theta: int = 16
    n_phi: int = 16
    max_clipped_fraction: float = 0.25
    # Exclude the coincident node and add back the analytic integral over a small ball.
    local_correction: bool = True
    # Apply L as (I-P) L (I-P) and Gamma as (I-P) Gamma.
    conservative: bool = True

    def violations(self) -> List[str]:
        problems = []
        if not -3.0 < self.gamma < 0.0:
            problems.append("gamma must lie in (-3, 0), got {}".format(self.gamma))
        if not self.c_q > 0:
            problems.append("c_q must be positive, got {}".format(self.c_q))
        if self.n_theta < 1 or self.n_phi < 1:
            problems.append("sphere rule orders must be >= 1, got {}x{}".format(self.n_theta, self.n_phi))
        if not 0.0 <= self.max_clipped_fraction < 1.0:
            problems.append("max_clipped_fraction must lie in [0, 1), got {}".format(self.max_clipped_fraction))
        return problems

    @property
    def guaranteed(self) -> bool:
        return GUARANTEED_GAMMA[0] <= self.gamma < GUARANTEED_GAMMA[1]


@dataclass(frozen=True)
class SphereRule:
    """Product rule on the unit sphere: Gauss-Legendre in cos(theta) times the midpoint rule in phi."""
    cos_theta: np.ndarray
    sin_theta: np.ndarray
    cos_phi: np.ndarray
    sin_phi: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def sphere_rule(n_theta: int, n_phi: int) -> SphereRule:
    mu, w_mu = scipy.special.roots_legendre(n_theta)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    MU, PHI = np.meshgrid(mu, phi, indexing="ij")
    weights = np.outer(w_mu, np.full(n_phi, 2.0 * np.pi / n_phi))
    return SphereRule(cos_theta=MU.ravel(), sin_theta=np.sqrt(1.0 - MU.ravel() ** 2),
                      cos_phi=np.cos(PHI).ravel(), sin_phi=np.sin(PHI).ravel(), weights=weights.ravel())


def angular_cross_section(config: KernelConfig, rule: SphereRule) -> np.ndarray:
    """q0(theta) times the sphere weight, per sphere node."""
    return config.c_q * np.abs(rule.cos_theta) * rule.weights


def local_correction(grid: VelocityGrid, config: KernelConfig, rule: SphereRule) -> np.ndarray:
    """
    Per node, the angular integral times the integral of |r|^gamma over the ball whose volume is the node weight.
    Multiplied by M(xi_j) this replaces the excluded coincident quadrature node.
    """
    if not config.local_correction:
        return np.zeros(grid.size)
    radius = (3.0 * grid.quad_weights / (4.0 * np.pi)) ** (1.0 / 3.0)
    radial = 4.0 * np.pi * radius ** (config.gamma + 3.0) / (config.gamma + 3.0)
    return radial * angular_cross_section(config, rule).sum()


def sqrt_maxwellian_at(points: np.ndarray) -> np.ndarray:
    return (2.0 * np.pi) ** -0.75 * np.exp(-0.25 * np.sum(points ** 2, axis=-1))


def trilinear_stencil(grid: VelocityGrid, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Trilinear interpolation stencil on the grid, zero outside [-R, R]^3.
    :param points: array (p, 3)
    :return: node indices (p, 8), weights (p, 8), inside mask (p,)
    """
    axis = grid.axis
    n = grid.n
    inside = np.all((points >= axis[0]) & (points <= axis[-1]), axis=1)
    lower = np.clip(np.searchsorted(axis, points) - 1, 0, n - 2)
    frac = (points - axis[lower]) / (axis[lower + 1] - axis[lower])
    indices = np.empty((points.shape[0], 8), dtype=np.int64)
    weights = np.empty((points.shape[0], 8))
    for c, corner in enumerate(itertools.product((0, 1), repeat=3)):
        indices[:, c] = ((lower[:, 0] + corner[0]) * n + lower[:, 1] + corner[1]) * n + lower[:, 2] + corner[2]
        w = np.ones(points.shape[0])
        for d in range(3):
            w = w * (frac[:, d] if corner[d] else 1.0 - frac[:, d])
        weights[:, c] = w
    weights[~inside] = 0.0
    return indices, weights, inside


def collision_points(xi: np.ndarray, partners: np.ndarray, rule: SphereRule, sl: slice = slice(None)):
    """
    Post-collision velocities for the pairs (xi, partner) on the sphere nodes rule[sl].
    The sphere is rotated per pair so that its pole is the relative velocity g = xi - partner.
    :return: xi' of shape (m, s, 3) and xi'_* of shape (m, s, 3)
    """
    g = xi[None, :] - partners
    speed = np.linalg.norm(g, axis=1)
    ghat = g / speed[:, None]
    reference = np.zeros_like(ghat)
    near_pole = np.abs(ghat[:, 2]) >= 0.9
    reference[~near_pole, 2] = 1.0
    reference[near_pole, 0] = 1.0
    e1 = np.cross(ghat, reference)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(ghat, e1)

    ct = rule.cos_theta[sl]
    a1 = (rule.sin_theta * rule.cos_phi)[sl]
    a2 = (rule.sin_theta * rule.sin_phi)[sl]
    omega = (ct[None, :, None] * ghat[:, None, :] + a1[None, :, None] * e1[:, None, :]
             + a2[None, :, None] * e2[:, None, :])
    shift = (speed[:, None] * ct[None, :])[:, :, None] * omega
    return xi[None, None, :] - shift, partners[:, None, :] + shift


class RowGeometry(NamedTuple):
    """Quadrature data of one row and one slice of the sphere rule, flattened over (partner, sphere node)."""
    coef: np.ndarray
    prime: Tuple[np.ndarray, np.ndarray, np.ndarray]
    prime_sqrtm: np.ndarray
    star: Tuple[np.ndarray, np.ndarray, np.ndarray]
    star_sqrtm: np.ndarray


def _partners(grid: VelocityGrid, i: int) -> np.ndarray:
    return np.delete(np.arange(grid.size), i)


def _partner_factor(grid: VelocityGrid, config: KernelConfig, i: int, partners: np.ndarray) -> np.ndarray:
    """W_j M^{1/2}(xi_j) |xi_i - xi_j|^gamma over the partners of row i."""
    speed = np.linalg.norm(grid.nodes[i] - grid.nodes[partners], axis=1)
    return grid.quad_weights[partners] * grid.sqrt_maxwellian[partners] * speed ** config.gamma


def _sphere_slices(grid: VelocityGrid, rule: SphereRule, batch: int = 1):
    per_slice = max(1, CHUNK_POINTS // (max(grid.size - 1, 1) * max(batch, 1)))
    for start in range(0, rule.size, per_slice):
        yield slice(start, min(start + per_slice, rule.size))


def row_geometry(grid: VelocityGrid, config: KernelConfig, rule: SphereRule, i: int, sl: slice,
                 partners: np.ndarray = None, factor: np.ndarray = None) -> RowGeometry:
    if partners is None:
        partners = _partners(grid, i)
    if factor is None:
        factor = _partner_factor(grid, config, i, partners)
    xi_prime, xi_star = collision_points(grid.nodes[i], grid.nodes[partners], rule, sl)
    coef = factor[:, None] * angular_cross_section(config, rule)[sl][None, :]
    xi_prime = xi_prime.reshape(-1, 3)
    xi_star = xi_star.reshape(-1, 3)
    return RowGeometry(coef=coef.ravel(),
                       prime=trilinear_stencil(grid, xi_prime), prime_sqrtm=sqrt_maxwellian_at(xi_prime),
                       star=trilinear_stencil(grid, xi_star), star_sqrtm=sqrt_maxwellian_at(xi_star))


def kernel_fingerprint(grid: VelocityGrid, config: KernelConfig) -> Dict:
    return {
        "gamma": float(config.gamma),
        "c_q": float(config.c_q),
        "extent": float(grid.extent),
        "n": int(grid.n),
        "n_theta": int(config.n_theta),
        "n_phi": int(config.n_phi),
        "local_correction": bool(config.local_correction),
    }


def kernel_config_hash(grid: VelocityGrid, config: KernelConfig) -> str:
    text = json.dumps(kernel_fingerprint(grid, config), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def compute_nu(grid: VelocityGrid, config: KernelConfig, points: np.ndarray = None) -> np.ndarray:
    """
    Collision frequency nu(xi) = int int |xi - xi_*|^gamma q0 M(xi_*) d omega d xi_*.
    Node quadrature over xi_*, coincident nodes excluded and replaced by the local ball correction.
    :param points: evaluation velocities (p, 3); defaults to the grid nodes.
    """
    rule = sphere_rule(config.n_theta, config.n_phi)
    angular = angular_cross_section(config, rule).sum()
    local = local_correction(grid, config, rule)
    points = grid.nodes if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    mass = grid.quad_weights * grid.maxwellian_values
    tiny = 1e-12 * grid.spacing
    nu = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 512):
        block = slice(start, start + 512)
        dist = cdist(points[block], grid.nodes)
        coincident = dist < tiny
        with np.errstate(divide="ignore"):
            kernel = np.where(coincident, 0.0, dist ** config.gamma)
        nu[block] = angular * (kernel @ mass) + coincident @ (local * grid.maxwellian_values)
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0):
        raise KernelAssemblyError("Collision frequency is not positive and finite on every node.")
    return nu


def _assemble_rows(grid: VelocityGrid, config: KernelConfig, rows: np.ndarray, local: np.ndarray):
    rule = sphere_rule(config.n_theta, config.n_phi)
    angular = angular_cross_section(config, rule).sum()
    N = grid.size
    block = np.zeros((len(rows), N))
    clipped = 0.0
    total = 0.0
    for r, i in enumerate(rows):
        partners = _partners(grid, i)
        factor = _partner_factor(grid, config, i, partners)
        for sl in _sphere_slices(grid, rule):
            geo = row_geometry(grid, config, rule, i, sl, partners, factor)
            # u(xi') carries M^{1/2}(xi'_*), u(xi'_*) carries M^{1/2}(xi').
            for (idx, wts, inside), coef in ((geo.prime, geo.coef * geo.star_sqrtm),
                                             (geo.star, geo.coef * geo.prime_sqrtm)):
                block[r] += np.bincount(idx.ravel(), weights=(coef[:, None] * wts).ravel(), minlength=N)
                total += coef.sum()
                clipped += coef[~inside].sum()
        block[r, partners] -= grid.sqrt_maxwellian[i] * factor * angular
        # two gain terms minus one loss term of the excluded coincident node
        block[r, i] += local[i] * grid.maxwellian_values[i]
    return block, clipped, total


def assemble_K(grid: VelocityGrid, config: KernelConfig, threads: int = 1) -> Tuple[np.ndarray, Dict]:
    """
    Materialize K by applying the quadrature to every nodal basis function, row by row,
    then symmetrize it in the quadrature inner product.
    :return: K and the assembly metadata.
    """
    rule = sphere_rule(config.n_theta, config.n_phi)
    local = local_correction(grid, config, rule)
    n_tasks = max(1, int(np.ceil(grid.size / ROWS_PER_TASK)))
    tasks = np.array_split(np.arange(grid.size), n_tasks)
    logger.info("Assembling K on %d nodes with %d sphere points in %d row blocks (%d workers).",
                grid.size, rule.size, n_tasks, threads)
    started = time.perf_counter()
    parts = Parallel(n_jobs=threads)(delayed(_assemble_rows)(grid, config, rows, local) for rows in tasks)
    K = np.vstack([p[0] for p in parts])
    clipped = sum(p[1] for p in parts)
    total = sum(p[2] for p in parts)
    clipped_fraction = clipped / total if total > 0 else 0.0

    if clipped_fraction > config.max_clipped_fraction:
        raise KernelAssemblyError("Clipped gain mass fraction {:.3e} exceeds the limit {:.3e}; enlarge the box."
                                  .format(clipped_fraction, config.max_clipped_fraction))
    if clipped_fraction > 0:
        logger.warning("Gain-term interpolation clipped %.3e of the quadrature mass outside the box.",
                       clipped_fraction)
    if not np.all(np.isfinite(K)):
        raise KernelAssemblyError("K has non-finite entries.")

    W = grid.quad_weights
    WK = W[:, None] * K
    residual = float(np.linalg.norm(WK - WK.T) / np.linalg.norm(WK))
    K = 0.5 * (K + K.T * W[None, :] / W[:, None])
    metadata = {
        "config_hash": kernel_config_hash(grid, config),
        "n_theta": config.n_theta,
        "n_phi": config.n_phi,
        "symmetrization_residual": residual,
        "clipped_fraction": float(clipped_fraction),
    }
    logger.info("K assembled in %.1f s; pre-symmetrization residual %.3e.", time.perf_counter() - started, residual)
    return K, metadata


class GainStencil:
    """
    Stored form of the gain quadrature: sparse interpolation at xi' and xi'_*
    plus a sparse row collector carrying the quadrature coefficients.
    """

    def __init__(self, op: "CollisionOperator"):
        grid, config = op.grid, op.config
        rule = sphere_rule(config.n_theta, config.n_phi)
        N = grid.size
        prime_idx, prime_wts, star_idx, star_wts, coefs, rows = [], [], [], [], [], []
        for i in range(N):
            partners = _partners(grid, i)
            factor = _partner_factor(grid, config, i, partners)
            for sl in _sphere_slices(grid, rule):
                geo = row_geometry(grid, config, rule, i, sl, partners, factor)
                prime_idx.append(geo.prime[0].astype(np.int32))
                prime_wts.append(geo.prime[1])
                star_idx.append(geo.star[0].astype(np.int32))
                star_wts.append(geo.star[1])
                coefs.append(geo.coef)
                rows.append(np.full(geo.coef.shape[0], i, dtype=np.int32))
        coefs = np.concatenate(coefs)
        P = coefs.shape[0]
        pointer = np.arange(0, 8 * P + 1, 8)
        self.prime = scipy.sparse.csr_matrix((np.concatenate(prime_wts).ravel(), np.concatenate(prime_idx).ravel(),
                                              pointer), shape=(P, N))
        self.star = scipy.sparse.csr_matrix((np.concatenate(star_wts).ravel(), np.concatenate(star_idx).ravel(),
                                             pointer), shape=(P, N))
        self.collect = scipy.sparse.csr_matrix((coefs, (np.concatenate(rows), np.arange(P))), shape=(N, P))
        logger.info("Gain stencil stored with %d collision points.", P)

    def apply(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gain term for batches f, g of shape (B, N)."""
        return (self.collect @ ((self.star @ f.T) * (self.prime @ g.T))).T


def stencil_points(grid: VelocityGrid, config: KernelConfig) -> int:
    return grid.size * (grid.size - 1) * config.n_theta * config.n_phi


@dataclass(frozen=True, eq=False)
class CollisionOperator:
    grid: VelocityGrid
    config: KernelConfig
    nu: np.ndarray
    K: np.ndarray
    metadata: Dict

    @cached_property
    def raw_matrix(self) -> np.ndarray:
        return self.K - np.diag(self.nu)

    @cached_property
    def projector(self) -> np.ndarray:
        """Matrix of the quadrature-orthogonal projection onto the collision invariants."""
        psi = self.grid.invariant_basis
        G = self.grid.invariant_gram
        return psi @ scipy.linalg.solve(G, psi.T * self.grid.quad_weights[None, :], assume_a="pos")

    @cached_property
    def loss_matrix(self) -> np.ndarray:
        """A_ij = W_j M^{1/2}(xi_j) |xi_i - xi_j|^gamma times the angular integral, zero diagonal."""
        rule = sphere_rule(self.config.n_theta, self.config.n_phi)
        dist = cdist(self.grid.nodes, self.grid.nodes)
        np.fill_diagonal(dist, 1.0)
        A = dist ** self.config.gamma
        np.fill_diagonal(A, 0.0)
        factor = angular_cross_section(self.config, rule).sum()
        return A * (factor * self.grid.quad_weights * self.grid.sqrt_maxwellian)[None, :]

    @cached_property
    def gain_stencil(self):
        if stencil_points(self.grid, self.config) > STENCIL_POINT_BUDGET:
            return None
        return GainStencil(self)

    @cached_property
    def norm_K_inf(self) -> float:
        return float(np.max(np.sum(np.abs(self.K), axis=1)))


def assemble_operator(grid: VelocityGrid, config: KernelConfig, threads: int = 1) -> CollisionOperator:
    if not config.guaranteed:
        logger.warning("gamma = %g lies outside the guaranteed range [-2, 0).", config.gamma)
    nu = compute_nu(grid, config)
    K, metadata = assemble_K(grid, config, threads)
    op = CollisionOperator(grid=grid, config=config, nu=nu, K=K, metadata=metadata)
    metadata["null_space_leakage"] = null_space_leakage(op)
    return op


def _project_out(grid: VelocityGrid, u: np.ndarray) -> np.ndarray:
    return u - grid.project_invariants(u)


def apply_L(op: CollisionOperator, u: np.ndarray, conservative: bool = None) -> np.ndarray:
    """
    L u = -nu u + K u over the last axis of u.
    In conservative form the invariants are projected out on both sides.
    """
    op.grid.check_shape(u)
    conservative = op.config.conservative if conservative is None else conservative
    if conservative:
        u = _project_out(op.grid, u)
    out = -op.nu * u + u @ op.K.T
    if conservative:
        out = _project_out(op.grid, out)
    return out


def linearized_matrix(op: CollisionOperator, conservative: bool = None) -> np.ndarray:
    conservative = op.config.conservative if conservative is None else conservative
    L = op.raw_matrix
    if conservative:
        Q = np.eye(op.grid.size) - op.projector
        L = Q @ L @ Q
    return L


def continuum_invariants(grid: VelocityGrid) -> np.ndarray:
    s = grid.sqrt_maxwellian
    return np.vstack([s, grid.nodes[:, 0] * s, grid.nodes[:, 1] * s, grid.nodes[:, 2] * s, grid.speed_sq * s])


def null_space_leakage(op: CollisionOperator) -> float:
    """max over the invariants psi of |(-nu + K) psi| / |psi| in the quadrature norm."""
    psi = continuum_invariants(op.grid)
    leak = apply_L(op, psi, conservative=False)
    return float(np.max(np.sqrt(op.grid.norm_sq(leak) / op.grid.norm_sq(psi))))


def null_space_identity_residual(op: CollisionOperator) -> float:
    """|K M^{1/2} - nu M^{1/2}| / |nu M^{1/2}| in the quadrature norm, for the raw operator."""
    s = op.grid.sqrt_maxwellian
    return float(np.sqrt(op.grid.norm_sq(op.K @ s - op.nu * s) / op.grid.norm_sq(op.nu * s)))


def max_quadratic_form(op: CollisionOperator, n_samples: int = 1000, seed: int = 0,
                       conservative: bool = None) -> float:
    """Largest <u, L u> / |u|^2 over random u with Maxwellian-scaled amplitudes."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_samples, op.grid.size)) * np.sqrt(op.grid.sqrt_maxwellian)
    forms = op.grid.inner(u, apply_L(op, u, conservative)) / op.grid.norm_sq(u)
    return float(np.max(np.real(forms)))


def reference_gain(op: CollisionOperator, f: np.ndarray, g: np.ndarray, i: int) -> float:
    """
    Gain term of row i summed directly over every (partner, sphere node) pair,
    with off-grid values from scipy's RegularGridInterpolator.
    """
    grid, config = op.grid, op.config
    rule = sphere_rule(config.n_theta, config.n_phi)
    axes = (grid.axis,) * 3
    f_at = RegularGridInterpolator(axes, grid.as_cube(f), bounds_error=False, fill_value=0.0)
    g_at = RegularGridInterpolator(axes, grid.as_cube(g), bounds_error=False, fill_value=0.0)
    partners = np.delete(np.arange(grid.size), i)
    xi_prime, xi_star = collision_points(grid.nodes[i], grid.nodes[partners], rule)
    speed = np.linalg.norm(grid.nodes[i] - grid.nodes[partners], axis=1)
    factor = grid.quad_weights[partners] * grid.sqrt_maxwellian[partners] * speed ** config.gamma
    angular = config.c_q * np.abs(rule.cos_theta) * rule.weights
    values = f_at(xi_star.reshape(-1, 3)) * g_at(xi_prime.reshape(-1, 3))
    return float(np.sum((factor[:, None] * angular[None, :]).ravel() * values))


def _batches(op: CollisionOperator, f: np.ndarray, g: np.ndarray):
    op.grid.check_shape(f)
    op.grid.check_shape(g)
    if np.shape(f) != np.shape(g):
        raise ValueError("Gamma arguments differ in shape: {} and {}.".format(np.shape(f), np.shape(g)))
    return np.reshape(f, (-1, op.grid.size)), np.reshape(g, (-1, op.grid.size))


def _streamed_gain(op: CollisionOperator, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    grid, config = op.grid, op.config
    rule = sphere_rule(config.n_theta, config.n_phi)
    dtype = np.result_type(f, g)
    out = np.zeros((f.shape[0], grid.size), dtype=dtype)
    for i in range(grid.size):
        partners = _partners(grid, i)
        factor = _partner_factor(grid, config, i, partners)
        for sl in _sphere_slices(grid, rule, f.shape[0]):
            geo = row_geometry(grid, config, rule, i, sl, partners, factor)
            f_star = np.einsum("bpc,pc->bp", f[:, geo.star[0]], geo.star[1])
            g_prime = np.einsum("bpc,pc->bp", g[:, geo.prime[0]], geo.prime[1])
            out[:, i] += (f_star * g_prime) @ geo.coef
    return out


def gamma_gain(op: CollisionOperator, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gain part: int B M^{1/2}(xi_*) f(xi'_*) g(xi') d omega d xi_*."""
    F, G = _batches(op, f, g)
    stencil = op.gain_stencil
    out = stencil.apply(F, G) if stencil is not None else _streamed_gain(op, F, G)
    return np.reshape(out, np.shape(f))


def gamma_loss(op: CollisionOperator, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Loss part: g(xi) int B M^{1/2}(xi_*) f(xi_*) d omega d xi_*."""
    F, G = _batches(op, f, g)
    return np.reshape(G * (F @ op.loss_matrix.T), np.shape(f))


def gamma_bilinear(op: CollisionOperator, f: np.ndarray, g: np.ndarray, conservative: bool = None) -> np.ndarray:
    """
    Gamma(f, g) = M^{-1/2} Q(M^{1/2} f, M^{1/2} g) over the last axis; leading axes are batched.
    The coincident-node contributions of gain and loss cancel, so the coincident node is simply excluded.
    """
    out = gamma_gain(op, f, g) - gamma_loss(op, f, g)
    conservative = op.config.conservative if conservative is None else conservative
    if conservative:
        out = _project_out(op.grid, out)
    return out


def _symmetric_form(op: CollisionOperator) -> np.ndarray:
    """-W^{1/2} L W^{-1/2} for the raw L, symmetric up to roundoff."""
    sw = np.sqrt(op.grid.quad_weights)
    A = -(sw[:, None] * op.raw_matrix / sw[None, :])
    return 0.5 * (A + A.T)


def estimate_coercivity(op: CollisionOperator) -> float:
    """
    Smallest generalized eigenvalue of -L against diag(nu) on the micro subspace.
    :raises CoercivityError: if the estimate is not positive.
    """
    sw = np.sqrt(op.grid.quad_weights)
    Z = scipy.linalg.null_space((sw[:, None] * op.grid.invariant_basis).T)
    A = Z.T @ _symmetric_form(op) @ Z
    B = Z.T @ (op.nu[:, None] * Z)
    values, vectors = scipy.linalg.eigh(A, B, subset_by_index=[0, 0])
    kappa0 = float(values[0])
    if kappa0 <= 0:
        raise CoercivityError(kappa0, (Z @ vectors[:, 0]) / sw)
    logger.info("Coercivity estimate kappa0 = %.4f.", kappa0)
    return kappa0


def null_space_spectrum(op: CollisionOperator, count: int = 6, conservative: bool = False) -> Dict:
    """
    Smallest |eigenvalues| of -L in the quadrature metric and the ratio of the last two.
    Five invariants give a large ratio at count = 6.
    """
    sw = np.sqrt(op.grid.quad_weights)
    if conservative:
        A = -(sw[:, None] * linearized_matrix(op, conservative=True) / sw[None, :])
        A = 0.5 * (A + A.T)
    else:
        A = _symmetric_form(op)
    values = scipy.linalg.eigvalsh(A)
    smallest = np.sort(np.abs(values))[:count]
    gap = float(smallest[-1] / max(smallest[-2], np.finfo(float).tiny))
    return {"smallest": smallest.tolist(), "gap_ratio": gap}


def fit_nu_bounds(op: CollisionOperator) -> Tuple[float, float]:
    ratio = op.nu / (1.0 + np.sqrt(op.grid.speed_sq)) ** op.config.gamma
    return float(ratio.min()), float(ratio.max())
