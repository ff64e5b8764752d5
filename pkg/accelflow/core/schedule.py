"""
Ideal-scaling schedule for the accelerated flow.

alpha_t = log p - log t, beta_t = p log t + log C, gamma_t = p log t. The two
coefficients that multiply the Hamilton's equations are evaluated through
their simplified closed forms p / t^(p+1) and C p t^(2p-1); the exp-of-log
route is kept only for tests.
"""
import math
from dataclasses import dataclass

import numpy as np

from accelflow.core.errors import DomainError, UsageError


@dataclass(frozen=True)
class ScalingSchedule:
    """
    Time-varying scaling parameters of the accelerated flow.

    Attributes:
        p: Rate exponent, p >= 2.
        C: Scale, C > 0.
        t0: Start time, t0 > 0.
    """
    p: float = 2.0
    C: float = 0.625
    t0: float = 1.0

    def __post_init__(self):
        if not self.p >= 2:
            raise UsageError(f"schedule exponent p must be >= 2, got {self.p}")
        if not self.C > 0:
            raise UsageError(f"schedule scale C must be > 0, got {self.C}")
        if not self.t0 > 0:
            raise UsageError(f"schedule start time t0 must be > 0, got {self.t0}")

    @staticmethod
    def _check_time(t: float) -> None:
        if not np.all(np.asarray(t) > 0):
            raise DomainError(f"schedule evaluated at non-positive time t={t}")

    def alpha(self, t: float) -> float:
        """Return alpha_t = log p - log t."""
        self._check_time(t)
        return math.log(self.p) - np.log(t)

    def beta(self, t: float) -> float:
        """Return beta_t = p log t + log C."""
        self._check_time(t)
        return self.p * np.log(t) + math.log(self.C)

    def gamma(self, t: float) -> float:
        """Return gamma_t = p log t."""
        self._check_time(t)
        return self.p * np.log(t)

    def velocity_coeff(self, t: float) -> float:
        """
        Coefficient e^(alpha_t - gamma_t) of the position update.

        Args:
            t: Time, t > 0.

        Returns:
            float: p / t^(p+1)
        """
        self._check_time(t)
        return self.p / t ** (self.p + 1)

    def force_coeff(self, t: float) -> float:
        """
        Coefficient e^(alpha_t + beta_t + gamma_t) of the momentum update.

        Args:
            t: Time, t > 0.

        Returns:
            float: C p t^(2p-1)
        """
        self._check_time(t)
        return self.C * self.p * t ** (2 * self.p - 1)

    def momentum_weight(self, t: float) -> float:
        """Return e^(-gamma_t) = t^(-p)."""
        self._check_time(t)
        return t ** (-self.p)

    def energy_weight(self, t: float) -> float:
        """Return e^(beta_t) = C t^p."""
        self._check_time(t)
        return self.C * t ** self.p

    def times(self, K: int, dt: float) -> np.ndarray:
        """Return the grid t0 + k*dt for k = 0..K."""
        return self.t0 + dt * np.arange(K + 1)
