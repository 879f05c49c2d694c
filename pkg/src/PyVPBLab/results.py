from typing import Dict, List

import numpy as np


class ModalTrace:
    """Recorded evolution of one Fourier mode, one entry per output stamp."""
    k: np.ndarray
    times: List[float]
    states: List[np.ndarray]  # complex velocity vectors
    energy: List[float]  # E_ell
    dissipation: List[float]  # D_ell
    interactive: List[float]  # real part of E^int
    norm_sq: List[float]
    field_sq: List[float]  # |a|^2 / |k|^2
    micro_sq: List[float]
    macro_sq: List[float]

    def __init__(self, op, k: np.ndarray, spec):
        self.op = op
        self.k = np.asarray(k, dtype=float)
        self.spec = spec
        self.times = []
        self.states = []
        self.energy = []
        self.dissipation = []
        self.interactive = []
        self.norm_sq = []
        self.field_sq = []
        self.micro_sq = []
        self.macro_sq = []

    @property
    def k_norm(self) -> float:
        return float(np.linalg.norm(self.k))

    @property
    def unweighted_energy(self) -> np.ndarray:
        """|u|^2 + |a|^2 / |k|^2 per stamp."""
        return np.asarray(self.norm_sq) + np.asarray(self.field_sq)

    def columns(self) -> Dict[str, List[float]]:
        return {
            "t": self.times,
            "E": self.energy,
            "D": self.dissipation,
            "Re_Eint": self.interactive,
            "norm_sq": self.norm_sq,
            "field_sq": self.field_sq,
            "micro_sq": self.micro_sq,
            "macro_sq": self.macro_sq,
        }


class NonlinearTrace:
    """Recorded diagnostics of a nonlinear run on the periodic interval."""
    times: List[float]
    states: List[np.ndarray]
    mass: List[float]
    total_energy: List[float]  # |u|^2 + |d_x phi|^2
    energy: List[float]  # E at ell
    energy_lower: List[float]  # E at ell - 1
    dissipation: List[float]
    field_norm: List[float]  # |d_x phi|
    phi_xx_sq: List[float]  # |d_x^2 phi|^2
    norm_u: List[float]
    min_f: List[float]  # min of M + M^{1/2} u

    def __init__(self, op, length: float, config, constants):
        self.op = op
        self.length = length
        self.config = config
        self.constants = constants
        self.initial_size = 0.0
        self.mass_scale = 0.0
        self.cfl_violation = False
        self.times = []
        self.states = []
        self.mass = []
        self.total_energy = []
        self.energy = []
        self.energy_lower = []
        self.dissipation = []
        self.field_norm = []
        self.phi_xx_sq = []
        self.norm_u = []
        self.min_f = []

    @property
    def mass_drift(self) -> float:
        """Largest relative deviation of the total mass from its initial value."""
        if not self.mass or self.mass_scale == 0:
            return 0.0
        return float(np.max(np.abs(np.asarray(self.mass) - self.mass[0])) / self.mass_scale)

    def columns(self) -> Dict[str, List[float]]:
        return {
            "t": self.times,
            "mass": self.mass,
            "total_energy": self.total_energy,
            "E": self.energy,
            "E_lower": self.energy_lower,
            "D": self.dissipation,
            "field_norm": self.field_norm,
            "phi_xx_sq": self.phi_xx_sq,
            "norm_u": self.norm_u,
            "min_f": self.min_f,
        }
