"""Closed-form diffusion mathematics.

Step indices are 1-based throughout the public API (t = 1..T); the
precomputed tables are 0-based with the documented offset of one.  All
sampling helpers operate on plain float64 arrays of any shape and are pure
given an explicit noise array, so schedules are safe to share across threads.

Noising chain:      x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps
Closed-form jump:   x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
Reverse update:     x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)
                              + sigma_t z
with alpha_t = 1 - beta_t, abar_t = prod alpha, and the posterior std
sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) beta_t (abar_0 := 1, so the
t = 1 step is deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError

DEFAULT_T = 1000
DEFAULT_BETA_1 = 1e-4
DEFAULT_BETA_T = 2e-2


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha/abar/sigma tables for T steps."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    @property
    def n_steps(self) -> int:
        return self.T

    def model_step(self, i: int) -> int:
        """Original diffusion step fed to the denoiser at reverse index i."""
        return i

    def _check(self, t: int):
        if not (1 <= t <= self.T):
            raise ArgumentError(f"step {t} outside 1..{self.T}")

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def sigma_at(self, t: int) -> float:
        self._check(t)
        return float(self.sigma[t - 1])


@dataclass(frozen=True)
class AcceleratedSchedule(DiffusionSchedule):
    """Sub-schedule over kept steps with marginal-preserving tables.

    kept_steps is a strictly increasing subsequence of 1..T starting at 1 and
    ending at T.  The restricted abar equals the full schedule's abar at every
    kept step; beta' and sigma' are recomputed from abar ratios so that a
    reverse pass over the kept steps targets the same marginals.
    """

    kept_steps: np.ndarray = None

    def model_step(self, i: int) -> int:
        self._check(i)
        return int(self.kept_steps[i - 1])


def build_linear_schedule(
    T: int = DEFAULT_T, beta_1: float = DEFAULT_BETA_1, beta_T: float = DEFAULT_BETA_T
) -> DiffusionSchedule:
    """Linear schedule beta_t = (t-1)/(T-1) (beta_T - beta_1) + beta_1."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = (t - 1.0) / (T - 1.0) * (beta_T - beta_1) + beta_1
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(
        beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=_posterior_sigma(beta, alpha_bar)
    )


def _posterior_sigma(beta: np.ndarray, alpha_bar: np.ndarray) -> np.ndarray:
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    return np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)


def build_accelerated(
    sched: DiffusionSchedule, n_steps: int, spacing: str = "linear"
) -> AcceleratedSchedule:
    """Restrict a schedule to n_steps kept steps (always keeping 1 and T)."""
    T = sched.T
    if not (2 <= n_steps <= T):
        raise ArgumentError(f"accelerated steps {n_steps} outside 2..{T}")
    if spacing == "linear":
        kept = np.linspace(1, T, n_steps)
    elif spacing == "quadratic":
        frac = (np.arange(n_steps, dtype=np.float64) / (n_steps - 1)) ** 2
        kept = 1.0 + frac * (T - 1)
    else:
        raise ConfigError(f"unknown spacing {spacing!r}")
    kept = np.rint(kept).astype(np.int64)
    kept[0], kept[-1] = 1, T
    # rounding can collide for n_steps close to T; repair forward
    for i in range(1, n_steps):
        if kept[i] <= kept[i - 1]:
            kept[i] = kept[i - 1] + 1
    if kept[-1] != T:
        raise ArgumentError(f"cannot place {n_steps} distinct steps in 1..{T}")
    abar = sched.alpha_bar[kept - 1]
    prev = np.concatenate(([1.0], abar[:-1]))
    beta = 1.0 - abar / prev
    return AcceleratedSchedule(
        beta=beta,
        alpha=1.0 - beta,
        alpha_bar=abar,
        sigma=_posterior_sigma(beta, abar),
        kept_steps=kept,
    )


def forward_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Jump straight to x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ArgumentError(f"noise shape {eps.shape} does not match x0 {x0.shape}")
    abar = sched.alpha_bar_at(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def chain_forward_step(x_prev, t: int, eps, sched: DiffusionSchedule):
    """One noising step x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps.

    The update is elementwise, so the point ordering of x_{t-1} is preserved.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x_prev.shape:
        raise ArgumentError(f"noise shape {eps.shape} does not match x {x_prev.shape}")
    beta = sched.beta_at(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def reverse_step(x_t, i: int, eps_pred, z, sched: DiffusionSchedule):
    """One reverse update at reverse index i (equal to t on the full schedule).

    z is the injected Gaussian noise; it is forced to zero at i = 1, where
    sigma_1 = 0 makes the final step deterministic.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    beta = sched.beta_at(i)
    alpha = sched.alpha_at(i)
    abar = sched.alpha_bar_at(i)
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(alpha)
    if i == 1 or z is None:
        return mean
    return mean + sched.sigma_at(i) * np.asarray(z, dtype=np.float64)


def oracle_eps(x_t, x0, i: int, sched: DiffusionSchedule):
    """Noise a perfect predictor would output: (x_t - sqrt(abar) x0) / sqrt(1-abar)."""
    abar = sched.alpha_bar_at(i)
    return (np.asarray(x_t) - np.sqrt(abar) * np.asarray(x0)) / np.sqrt(1.0 - abar)
