"""Classifier-free guided DDIM sampling with masked latent blending."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend.base import DenoiserBackend, LatentTensor, TextCondition
from .backend.scheduler import SchedulerState, ddim_step
from .errors import ConfigError, ScheduleError, ShapeError
from .inversion import Trajectory


@dataclass(frozen=True)
class GuidanceConfig:
    weight: float
    conditional: TextCondition
    unconditional: TextCondition

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ConfigError(f"guidance weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class BlendingConfig:
    """Inclusive window of step indices (50 = first denoising step, 0 = clean)."""

    window: tuple[int, int] = (10, 20)
    enabled: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.window
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid blending window {self.window}")

    def validate(self, num_steps: int) -> None:
        if self.window[1] > num_steps:
            raise ConfigError(f"blending window {self.window} exceeds {num_steps} steps")

    def active(self, index: int) -> bool:
        return self.enabled and self.window[0] <= index <= self.window[1]


@dataclass(frozen=True)
class Blending:
    scene_traj: Trajectory
    fg_mask: object  # MaskPyramid
    config: BlendingConfig = BlendingConfig()


def combine_guidance(eps_uncond: np.ndarray, eps_cond: np.ndarray, weight: float) -> np.ndarray:
    # (1 - w) u + w c: equal to u + w (c - u), and exact at w = 0 and w = 1
    return (1.0 - weight) * eps_uncond + weight * eps_cond


def guided_prediction(z_t: LatentTensor, gcfg: GuidanceConfig, backend: DenoiserBackend,
                      sched: Optional[SchedulerState] = None, hooks=None) -> np.ndarray:
    """Two backend calls (unconditional, then conditional) combined at ``gcfg.weight``.

    Without ``sched`` the latent's step index is passed through as the model timestep.
    """
    t = sched.model_timestep(z_t.timestep) if sched is not None else z_t.timestep
    eps_u = backend.predict(z_t.data, t, gcfg.unconditional, hooks=hooks)
    eps_c = backend.predict(z_t.data, t, gcfg.conditional, hooks=hooks)
    if eps_u.shape != z_t.data.shape or eps_c.shape != z_t.data.shape:
        raise ShapeError("noise prediction shape does not match the latent")
    return combine_guidance(eps_u, eps_c, gcfg.weight)


def blend_latent(z_gen: LatentTensor, z_scene: LatentTensor, fg_mask, t_index: int,
                 bcfg: BlendingConfig) -> LatentTensor:
    """Keep ``z_gen`` on the foreground and take ``z_scene`` elsewhere, inside the window only."""
    if z_gen.data.shape != z_scene.data.shape:
        raise ShapeError(f"latent shapes differ: {z_gen.data.shape} vs {z_scene.data.shape}")
    if z_gen.timestep != z_scene.timestep:
        raise ScheduleError(f"blending latents at different steps {z_gen.timestep} vs {z_scene.timestep}")
    mask = fg_mask.level(z_gen.data.shape[-2:])
    if not bcfg.active(t_index):
        return z_gen
    return LatentTensor(np.where(mask[None].astype(bool), z_gen.data, z_scene.data), z_gen.timestep)


def sample(z_T: LatentTensor, gcfg: GuidanceConfig, backend: DenoiserBackend, sched: SchedulerState,
           blending: Optional[Blending] = None, attn_ctl=None) -> Trajectory:
    """Denoise from ``z_T`` to step 0.

    Per step: reference K/V preparation (if ``attn_ctl``), guided prediction with
    the controller's hooks, DDIM step, then blending of the new latent against the
    scene trajectory at the same step index.
    """
    if z_T.timestep != sched.max_index:
        raise ScheduleError(f"sampling must start at step {sched.max_index}, got {z_T.timestep}")
    if blending is not None:
        blending.config.validate(sched.num_steps)
        if not blending.scene_traj.covers(sched):
            raise ScheduleError("scene trajectory does not cover the sampling schedule")
        if blending.scene_traj.at(sched.max_index).data.shape != z_T.data.shape:
            raise ShapeError("scene trajectory latent shape differs from z_T")
    z = z_T
    latents = [z]
    blended = []
    while z.timestep > 0:
        hooks = None
        if attn_ctl is not None:
            attn_ctl.prepare(z.timestep)
            hooks = attn_ctl.hooks()
        eps = guided_prediction(z, gcfg, backend, sched, hooks=hooks)
        z = ddim_step(z, eps, sched)
        if blending is not None and blending.config.active(z.timestep):
            z = blend_latent(z, blending.scene_traj.at(z.timestep), blending.fg_mask, z.timestep,
                             blending.config)
            blended.append(z.timestep)
        if not z.is_finite():
            raise FloatingPointError(f"non-finite latent while sampling at step {z.timestep}")
        latents.append(z)
    return Trajectory(latents, gcfg.conditional, blended=blended)
