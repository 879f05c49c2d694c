import logging
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_GROWTH_LIMIT = 10.0


class InstabilityError(RuntimeError):
    def __init__(self, time: float, norms: Sequence[float]):
        self.time = time
        self.norms = list(norms)
        super().__init__("Norm grew from {:.3e} to {:.3e} by t = {:.4g}; the step is unstable.".format(
            self.norms[0], self.norms[-1], time))


class EvolutionRunner:
    """
    This class is responsible for advancing an autonomous evolution problem in time.
    It gets a right-hand side, an initial state and the output stamps, and records a snapshot at every stamp.
    Between stamps it takes a uniform number of substeps so that every stamp is hit exactly.
    The concrete step is implemented by subclasses.
    """

    def __init__(self, max_step: float, growth_limit: float = DEFAULT_GROWTH_LIMIT):
        if not max_step > 0:
            raise ValueError("Maximum step must be positive, got {}.".format(max_step))
        self.max_step = max_step
        self.growth_limit = growth_limit

    def step(self, rhs: Callable, t: float, state: np.ndarray, dt: float) -> np.ndarray:
        """
        To be overriden.
        Implements one step of the time integrator.
        :param rhs: function (t, state) -> time derivative.
        :return: the state at t + dt.
        """
        raise NotImplementedError("This method needs to be overriden.")

    def substeps(self, t0: float, t1: float):
        n = max(1, int(np.ceil((t1 - t0) / self.max_step * (1.0 - 1e-12))))
        return n, (t1 - t0) / n

    def valid_stamps(self, stamps: Sequence[float]):
        stamps = np.asarray(stamps, dtype=float)
        if stamps.ndim != 1 or len(stamps) < 1:
            raise ValueError("Output stamps must be a non-empty sequence, got {}.".format(stamps))
        if np.any(np.diff(stamps) <= 0):
            raise ValueError("Output stamps must be strictly increasing.")
        return stamps

    def run(self, rhs: Callable, state0: np.ndarray, stamps: Sequence[float],
            snapshot: Callable[[float, np.ndarray], None], norm: Optional[Callable] = None,
            status: Optional[Callable[[float], None]] = None) -> np.ndarray:
        """
        Integrate from stamps[0] to stamps[-1].
        :param snapshot: called with (t, state) at every stamp, the initial one included.
        :param norm: state norm watched by the instability detector; defaults to the Euclidean norm.
        :param status: optional progress callback.
        :return: the final state.
        """
        stamps = self.valid_stamps(stamps)
        norm = norm if norm is not None else np.linalg.norm
        state = state0
        t = stamps[0]
        initial = norm(state)
        history = [initial]
        snapshot(t, state)
        for t_next in stamps[1:]:
            n, dt = self.substeps(t, t_next)
            for i in range(n):
                state = self.step(rhs, t + i * dt, state, dt)
                current = norm(state)
                logger.debug("t=%.6g norm=%.6e", t + (i + 1) * dt, current)
                if not np.isfinite(current) or (initial > 0 and current > self.growth_limit * initial):
                    history.append(current)
                    raise InstabilityError(t + (i + 1) * dt, history)
            t = t_next
            history.append(norm(state))
            snapshot(t, state)
            if status is not None:
                status(t)
        return state


class RK4Runner(EvolutionRunner):
    """Classical fourth order Runge-Kutta."""

    def step(self, rhs, t, state, dt):
        k1 = rhs(t, state)
        k2 = rhs(t + 0.5 * dt, state + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, state + 0.5 * dt * k2)
        k4 = rhs(t + dt, state + dt * k3)
        return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def geometric_stamps(T: float, count: int, first: float = 0.1) -> np.ndarray:
    """0 followed by `count` geometrically spaced stamps from `first` to T."""
    if not T > first > 0:
        raise ValueError("Need T > first > 0, got T={}, first={}.".format(T, first))
    return np.concatenate([[0.0], np.geomspace(first, T, count)])


def uniform_stamps(T: float, count: int) -> np.ndarray:
    if not T > 0 or count < 1:
        raise ValueError("Need T > 0 and at least one interval, got T={}, count={}.".format(T, count))
    return np.linspace(0.0, T, count + 1)
