"""Time horizon and linear beta(t) diffusion-rate schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta(t) = beta_min + (beta_max - beta_min) * t / T`` on ``[0, T]``
    discretised with ``N`` steps of size ``T / N``."""

    T: float = 1.0
    N: int = 1000
    beta_min: float = 0.001
    beta_max: float = 6.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError("need 0 < beta_min <= beta_max")
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def constant(cls, T=1.0, N=1000, beta=1.0):
        return cls(T, N, beta, beta)

    @property
    def gamma(self):
        return self.T / self.N

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * (np.asarray(t) / self.T)

    def integral(self, t):
        """``int_0^t beta(s) ds``, the effective Brownian time at ``t``."""
        t = np.asarray(t, dtype=float)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    def alpha(self, t):
        """``exp(-2 int_0^t beta)``, the signal fraction used by low-temperature sampling."""
        return np.exp(-2.0 * self.integral(t))

    def times(self):
        return np.arange(self.N + 1) * self.gamma

    def to_dict(self):
        return asdict(self)
