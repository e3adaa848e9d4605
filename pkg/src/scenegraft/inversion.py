"""Fixed-point (renoise) DDIM inversion and an on-disk trajectory cache."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backend.base import DenoiserBackend, LatentTensor, TextCondition
from .backend.scheduler import SchedulerState, ddim_transfer
from .errors import InversionDivergenceError, ScheduleError
from .imageio import image_hash

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """Latents ordered as produced: ascending step index for inversion, descending for sampling."""

    latents: list[LatentTensor]
    condition: TextCondition
    # per inversion step: ||z^(k) - z^(k-1)|| for k = 1..K
    residuals: list[list[float]] = field(default_factory=list)
    # step indices whose latent was blended against the scene (sampling only)
    blended: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        steps = [z.timestep for z in self.latents]
        diffs = np.diff(steps)
        if len(steps) > 1 and not ((diffs == 1).all() or (diffs == -1).all()):
            raise ScheduleError(f"trajectory step indices are not consecutive and monotone: {steps}")
        self._by_index = {z.timestep: z for z in self.latents}

    @property
    def direction(self) -> str:
        if len(self.latents) < 2:
            return "inversion"
        return "inversion" if self.latents[1].timestep > self.latents[0].timestep else "sampling"

    @property
    def start(self) -> LatentTensor:
        return self.latents[0]

    @property
    def final(self) -> LatentTensor:
        return self.latents[-1]

    def at(self, index: int) -> LatentTensor:
        try:
            return self._by_index[index]
        except KeyError:
            raise ScheduleError(f"trajectory has no latent at step index {index}") from None

    def covers(self, sched: SchedulerState) -> bool:
        return set(self._by_index) == set(range(sched.num_steps + 1))

    def __len__(self) -> int:
        return len(self.latents)


@dataclass(frozen=True)
class InversionConfig:
    renoise_iterations: int = 2
    guidance_disabled: bool = True

    def __post_init__(self) -> None:
        if self.renoise_iterations < 0:
            raise ValueError("renoise_iterations must be >= 0")
        if not self.guidance_disabled:
            raise ValueError("inversion always runs without classifier-free guidance")


def invert_latent(z0: np.ndarray, condition: TextCondition, backend: DenoiserBackend,
                  sched: SchedulerState, cfg: InversionConfig = InversionConfig()) -> Trajectory:
    """Invert a clean latent to step ``sched.num_steps``.

    Each step seeds ``z_{t+1}`` with plain DDIM inversion from ``eps(z_t)`` and then
    re-predicts eps at the current estimate ``K`` times, each time renoising
    ``z_t`` with the latest prediction only (no averaging across iterates).
    """
    z = LatentTensor(np.asarray(z0, dtype=np.float64), 0)
    if not z.is_finite():
        raise InversionDivergenceError(0)
    latents = [z]
    residuals = []
    for i in range(sched.num_steps):
        a_from, a_to = sched.alpha(i), sched.alpha(i + 1)
        eps = backend.predict(z.data, sched.model_timestep(i), condition)
        est = ddim_transfer(z.data, eps, a_from, a_to)
        step_res = []
        for _ in range(cfg.renoise_iterations):
            if not np.isfinite(est).all():
                raise InversionDivergenceError(i + 1)
            eps = backend.predict(est, sched.model_timestep(i + 1), condition)
            nxt = ddim_transfer(z.data, eps, a_from, a_to)
            step_res.append(float(np.linalg.norm(nxt - est)))
            est = nxt
        if not np.isfinite(est).all():
            raise InversionDivergenceError(i + 1)
        z = LatentTensor(est, i + 1)
        latents.append(z)
        residuals.append(step_res)
    return Trajectory(latents, condition, residuals)


def invert_image(image: np.ndarray, condition: TextCondition, backend: DenoiserBackend,
                 sched: SchedulerState, cfg: InversionConfig = InversionConfig()) -> Trajectory:
    if condition.is_null:
        raise ValueError("inversion needs a non-null prompt condition")
    return invert_latent(backend.codec.encode(image), condition, backend, sched, cfg)


def reconstruction_error(traj: Trajectory, backend: DenoiserBackend, sched: SchedulerState) -> float:
    """Relative L2 error of resampling the trajectory's clean latent from its noisiest one."""
    from .guidance import GuidanceConfig, sample

    if len(traj) <= 1:
        return 0.0
    gcfg = GuidanceConfig(weight=1.0, conditional=traj.condition, unconditional=backend.null_condition())
    out = sample(traj.at(sched.max_index), gcfg, backend, sched).final.data
    z0 = traj.at(0).data
    return float(np.linalg.norm(out - z0) / np.linalg.norm(z0))


# -- on-disk cache ---------------------------------------------------------------------------------

MAGIC = b"SGINV1\n"


def save_trajectory(traj: Trajectory, sched: SchedulerState, path) -> None:
    """Header (magic, uint32 LE length, JSON) followed by little-endian float32 latents."""
    header = {
        "shape": list(traj.start.shape),
        "count": len(traj),
        "steps": [z.timestep for z in traj.latents],
        "num_steps": sched.num_steps,
        "timestep_sequence": list(sched.timestep_sequence),
        "alpha_schedule": list(sched.alpha_schedule),
        "prompt": traj.condition.prompt_text,
        "residuals": traj.residuals,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.stack([z.data for z in traj.latents]).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(data.tobytes())


def load_trajectory(path, condition: TextCondition, sched: Optional[SchedulerState] = None) -> Trajectory:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a trajectory cache file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    header = json.loads(raw[off + 4: off + 4 + n])
    if sched is not None and (header["num_steps"] != sched.num_steps
                              or tuple(header["timestep_sequence"]) != sched.timestep_sequence):
        raise ScheduleError(f"cached trajectory {path} was computed on a different schedule")
    shape = (header["count"], *header["shape"])
    data = np.frombuffer(raw, dtype="<f4", offset=off + 4 + n).reshape(shape).astype(np.float64)
    latents = [LatentTensor(d, s) for d, s in zip(data, header["steps"])]
    return Trajectory(latents, condition, header.get("residuals", []))


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()[:24]


class InversionCache:
    """Memoizes inversions in memory and, when ``directory`` is set, on disk.

    Keys combine the image hash, prompt hash, and a hash of the backend/schedule/config.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._memory: dict[str, Trajectory] = {}
        self.hits = 0
        self.misses = 0

    def key(self, image, condition: TextCondition, backend, sched: SchedulerState,
            cfg: InversionConfig) -> str:
        backend_id = (backend.name, getattr(backend, "seed", None), getattr(backend, "latent_size", None))
        return "-".join([
            image_hash(image)[:16],
            hashlib.sha256(condition.prompt_text.encode()).hexdigest()[:16],
            _digest(backend_id, sched.timestep_sequence, sched.alpha_schedule, cfg.renoise_iterations),
        ])

    def invert(self, image, condition, backend, sched, cfg: InversionConfig = InversionConfig()) -> Trajectory:
        key = self.key(image, condition, backend, sched, cfg)
        if key in self._memory:
            self.hits += 1
            return self._memory[key]
        path = self.directory / f"{key}.inv" if self.directory else None
        if path is not None and path.exists():
            traj = load_trajectory(path, condition, sched)
            self.hits += 1
        else:
            self.misses += 1
            traj = invert_image(image, condition, backend, sched, cfg)
            if path is not None:
                save_trajectory(traj, sched, path)
        self._memory[key] = traj
        return traj
