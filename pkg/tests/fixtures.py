from functools import lru_cache

import numpy as np

from PyVPBLab.collision_core import CollisionOperator, KernelConfig, assemble_operator
from PyVPBLab.velocity_space import build_grid

# Coarse grids lose a large share of the gain mass at the box faces.
COARSE = dict(gamma=-1.0, max_clipped_fraction=0.5)


@lru_cache(maxsize=None)
def small_operator():
    """729 nodes, dense Gamma is streamed."""
    return assemble_operator(build_grid(5.0, 9), KernelConfig(n_theta=4, n_phi=6, **COARSE))


@lru_cache(maxsize=None)
def tiny_operator():
    """216 nodes with a stored gain stencil; used wherever Gamma is evaluated."""
    return assemble_operator(build_grid(4.5, 6), KernelConfig(n_theta=4, n_phi=4, **COARSE))


def random_vector(grid, seed=0, complex_values=False):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(grid.size) * np.sqrt(grid.sqrt_maxwellian)
    if complex_values:
        u = u + 1j * rng.standard_normal(grid.size) * np.sqrt(grid.sqrt_maxwellian)
    return u


@lru_cache(maxsize=None)
def relaxation_operator():
    """Tiny grid with K = 0, so L = -(I-P) nu (I-P) is exactly dissipative."""
    op = tiny_operator()
    return CollisionOperator(grid=op.grid, config=op.config, nu=op.nu, K=np.zeros_like(op.K),
                             metadata=dict(op.metadata))
