"""Deterministic (eta = 0) DDIM schedule and update rules.

Step index ``i`` runs from ``num_steps`` (noisiest) down to 0 (clean). Index
``i >= 1`` sits at training timestep ``timestep_sequence[num_steps - i]``;
index 0 is the denoising target with ``alpha_bar = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ScheduleError, ShapeError
from .base import LatentTensor


def scaled_linear_alphas_cumprod(num_train_timesteps: int = 1000, beta_start: float = 0.00085,
                                 beta_end: float = 0.012) -> np.ndarray:
    betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class SchedulerState:
    num_steps: int
    timestep_sequence: tuple[int, ...]
    # alpha_bar per step index, alpha_schedule[0] is the clean target
    alpha_schedule: tuple[float, ...]
    num_train_timesteps: int = 1000

    def __post_init__(self) -> None:
        if len(self.timestep_sequence) != self.num_steps:
            raise ScheduleError(
                f"expected {self.num_steps} timesteps, got {len(self.timestep_sequence)}")
        if any(a <= b for a, b in zip(self.timestep_sequence, self.timestep_sequence[1:])):
            raise ScheduleError("timestep_sequence must be strictly decreasing")
        if len(self.alpha_schedule) != self.num_steps + 1:
            raise ScheduleError("alpha_schedule needs num_steps + 1 entries")
        a = np.asarray(self.alpha_schedule)
        if not ((a > 0).all() and (a <= 1).all()):
            raise ScheduleError("alpha coefficients must lie in (0, 1]")
        if (np.diff(a) > 0).any():
            raise ScheduleError("alpha coefficients must be non-increasing in the step index")

    @property
    def max_index(self) -> int:
        return self.num_steps

    def alpha(self, index: int) -> float:
        self._check_index(index)
        return self.alpha_schedule[index]

    def model_timestep(self, index: int) -> int:
        """Training timestep passed to the noise predictor for a latent at ``index``."""
        self._check_index(index)
        if index == 0:
            return 0
        return self.timestep_sequence[self.num_steps - index]

    def _check_index(self, index: int) -> None:
        if not 0 <= index <= self.num_steps:
            raise ScheduleError(f"step index {index} outside schedule [0, {self.num_steps}]")


def make_schedule(num_steps: int = 50, num_train_timesteps: int = 1000,
                  alphas_cumprod: np.ndarray | None = None) -> SchedulerState:
    """Trailing-spaced DDIM schedule, e.g. 50 of 1000 -> (999, 979, ..., 19)."""
    if num_steps < 1 or num_steps > num_train_timesteps:
        raise ScheduleError(f"num_steps must be in [1, {num_train_timesteps}], got {num_steps}")
    if alphas_cumprod is None:
        alphas_cumprod = scaled_linear_alphas_cumprod(num_train_timesteps)
    ratio = num_train_timesteps / num_steps
    timesteps = np.round(np.arange(num_train_timesteps, 0, -ratio)).astype(np.int64) - 1
    alphas = [1.0] + [float(alphas_cumprod[t]) for t in timesteps[::-1]]
    return SchedulerState(num_steps=num_steps, timestep_sequence=tuple(int(t) for t in timesteps),
                          alpha_schedule=tuple(alphas), num_train_timesteps=num_train_timesteps)


def constant_schedule(num_steps: int, alpha: float = 1.0) -> SchedulerState:
    """Degenerate schedule with a flat alpha; for identity checks."""
    return SchedulerState(num_steps=num_steps, timestep_sequence=tuple(range(num_steps, 0, -1)),
                          alpha_schedule=(alpha,) * (num_steps + 1), num_train_timesteps=num_steps + 1)


def ddim_transfer(z: np.ndarray, eps: np.ndarray, alpha_from: float, alpha_to: float) -> np.ndarray:
    """Move ``z`` between noise levels along the eps-defined DDIM direction."""
    x0 = (z - np.sqrt(1.0 - alpha_from) * eps) / np.sqrt(alpha_from)
    return np.sqrt(alpha_to) * x0 + np.sqrt(1.0 - alpha_to) * eps


def _check(z_t: LatentTensor, eps: np.ndarray, sched: SchedulerState) -> None:
    if eps.shape != z_t.data.shape:
        raise ShapeError(f"noise prediction shape {eps.shape} != latent shape {z_t.data.shape}")
    if not 0 <= z_t.timestep <= sched.num_steps:
        raise ScheduleError(f"latent step index {z_t.timestep} not on the schedule")


def ddim_step(z_t: LatentTensor, eps: np.ndarray, sched: SchedulerState) -> LatentTensor:
    _check(z_t, eps, sched)
    if z_t.timestep == 0:
        raise ScheduleError("cannot denoise past step index 0")
    i = z_t.timestep
    return LatentTensor(ddim_transfer(z_t.data, eps, sched.alpha(i), sched.alpha(i - 1)), i - 1)


def ddim_inverse_step(z_t: LatentTensor, eps: np.ndarray, sched: SchedulerState) -> LatentTensor:
    _check(z_t, eps, sched)
    if z_t.timestep == sched.num_steps:
        raise ScheduleError("cannot invert past the last step index")
    i = z_t.timestep
    return LatentTensor(ddim_transfer(z_t.data, eps, sched.alpha(i), sched.alpha(i + 1)), i + 1)
