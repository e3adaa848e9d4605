"""Three-step subject insertion: dual inversion, affordance pass, personalized blended pass."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .attention import AttentionDump, PersonalizationConfig, ReferenceAttentionController
from .backend.base import DenoiserBackend
from .backend.scheduler import make_schedule
from .errors import ConfigError, DegenerateMaskError, InsertionFailureError
from .guidance import Blending, BlendingConfig, GuidanceConfig, sample
from .imageio import image_hash, resize_to, save_image
from .inversion import InversionCache, InversionConfig
from .masks import (
    HTTPSegmentationClient,
    MaskPyramid,
    SegmentationClient,
    SubprocessSegmentationClient,
    build_pyramid,
    dilate,
    make_threshold_stub_client,
    save_mask,
)

logger = logging.getLogger(__name__)

PERSON_PHRASE = re.compile(r"\ba person\b", re.IGNORECASE)


@dataclass(frozen=True)
class PromptPair:
    scene_prompt: str
    subject_prompt: str
    # scene description without the inserted person; derived when not given
    scene_caption: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.scene_prompt.strip() or not self.subject_prompt.strip():
            raise ConfigError("scene and subject prompts must be non-empty")

    @property
    def substitution_applies(self) -> bool:
        return PERSON_PHRASE.search(self.scene_prompt) is not None

    @property
    def substituted_prompt(self) -> str:
        subject = self.subject_prompt.strip()
        if self.substitution_applies:
            return PERSON_PHRASE.sub(subject, self.scene_prompt, count=1)
        return f"{subject}, {self.scene_prompt.strip()}"

    @property
    def inversion_caption(self) -> str:
        if self.scene_caption:
            return self.scene_caption
        caption = " ".join(PERSON_PHRASE.sub("", self.scene_prompt).split())
        return caption or self.scene_prompt


@dataclass(frozen=True)
class PipelineConfig:
    guidance_weight: float = 7.5
    second_pass_guidance_weight: Optional[float] = None
    num_steps: int = 50
    num_train_timesteps: int = 1000
    renoise_iterations: int = 2
    blending: bool = True
    blending_window: tuple[int, int] = (10, 20)
    personalization: bool = True
    target_blocks: tuple[str, ...] = ("Up-2", "Up-3", "Up-4")
    conditional_branch_only: bool = True
    dilation_radius: int = 8
    seed: int = 0
    backend: str = "toy"
    model_path: Optional[str] = None
    scene_inversion_prompt: Optional[str] = None
    reference_kv_mode: str = "lockstep"
    reference_scale: float = 1.0
    retry_guidance_increment: float = 2.0
    segmentation_threshold: float = 0.5
    segmentation_url: Optional[str] = None
    segmentation_command: Optional[str] = None
    client_timeout: float = 60.0
    dump_attention: bool = False
    inversion_cache_dir: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "blending_window", tuple(int(x) for x in self.blending_window))
        object.__setattr__(self, "target_blocks", tuple(self.target_blocks))
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.renoise_iterations < 0:
            raise ConfigError("renoise_iterations must be >= 0")
        if self.dilation_radius < 0:
            raise ConfigError("dilation_radius must be >= 0")
        lo, hi = self.blending_window
        if not 0 <= lo <= hi <= self.num_steps:
            raise ConfigError(f"blending_window {self.blending_window} must satisfy 0 <= lo <= hi <= num_steps")
        if self.guidance_weight < 0:
            raise ConfigError("guidance_weight must be >= 0")
        if self.reference_kv_mode not in ("lockstep", "precompute"):
            raise ConfigError(f"reference_kv_mode must be 'lockstep' or 'precompute'")

    @property
    def effective_second_pass_weight(self) -> float:
        if self.second_pass_guidance_weight is None:
            return self.guidance_weight
        return self.second_pass_guidance_weight

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["blending_window"] = list(self.blending_window)
        d["target_blocks"] = list(self.target_blocks)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(base or cls(), **data)


@dataclass
class GenerationResult:
    output_image: np.ndarray
    person_mask: MaskPyramid
    first_pass_image: np.ndarray
    config: PipelineConfig
    prompt: str
    label: str = "default"
    trajectories: dict[str, Any] = field(default_factory=dict)
    metrics_stub: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    stats: dict[str, Any] = field(default_factory=dict)
    attention_dump: Optional[AttentionDump] = None


class RunLog:
    """Structured events, written as JSON lines."""

    def __init__(self):
        self.events: list[dict[str, Any]] = []

    def emit(self, event: str, level: str = "info", **data) -> None:
        self.events.append({"time": round(time.time(), 3), "level": level, "event": event, **data})
        getattr(logger, "warning" if level == "warning" else "error" if level == "error" else "debug")(
            "%s %s", event, data)

    @property
    def errors(self) -> list[dict[str, Any]]:
        return [e for e in self.events if e["level"] == "error"]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True, default=str) + "\n")


def make_segmentation_client(cfg: PipelineConfig) -> SegmentationClient:
    if cfg.segmentation_url:
        return HTTPSegmentationClient(cfg.segmentation_url, timeout=cfg.client_timeout)
    if cfg.segmentation_command:
        import shlex

        return SubprocessSegmentationClient(shlex.split(cfg.segmentation_command), timeout=cfg.client_timeout)
    return make_threshold_stub_client(cfg.segmentation_threshold)


def make_backend(cfg: PipelineConfig, image_shape: Sequence[int]) -> DenoiserBackend:
    from .backend import load_backend
    from .backend.toy import SpaceToDepthCodec

    if cfg.backend == "toy":
        _, h, w = SpaceToDepthCodec().latent_shape(image_shape)
        if h != w:
            raise ConfigError(f"toy backend needs square images, got {tuple(image_shape[:2])}")
        return load_backend("toy", seed=cfg.seed, latent_size=h)
    if cfg.backend == "sdxl-class":
        path = cfg.model_path or os.environ.get("SCENEGRAFT_MODEL_PATH")
        if not path:
            raise ConfigError("sdxl-class backend needs model_path or SCENEGRAFT_MODEL_PATH")
        h, w = int(image_shape[0]) // 8, int(image_shape[1]) // 8
        return load_backend("sdxl-class", model_path=path, latent_size=(h, w))
    raise ConfigError(f"unknown backend {cfg.backend!r}")


class Pipeline:
    """Holds a backend, a segmentation client, and caches shared across runs.

    Inversions and first passes are memoized so ablation sweeps only redo the
    parts a variant changes.
    """

    def __init__(self, backend: DenoiserBackend, seg: SegmentationClient,
                 inversion_cache: Optional[InversionCache] = None):
        self.backend = backend
        self.seg = seg
        self.inversions = inversion_cache or InversionCache()
        self._first_passes: dict[tuple, tuple] = {}

    def _latent_resolutions(self, image_shape) -> list[tuple[int, int]]:
        _, h, w = self.backend.codec.latent_shape(image_shape)
        res = [(h, w)]
        for layer in self.backend.attention_layers:
            if layer.resolution not in res:
                res.append(layer.resolution)
        return res

    def _first_pass(self, scene, scene_traj, prompts: PromptPair, cfg: PipelineConfig, sched, log: RunLog):
        key = (image_hash(scene), prompts.scene_prompt, scene_traj.condition.prompt_text,
               cfg.guidance_weight, cfg.retry_guidance_increment, cfg.num_steps, cfg.renoise_iterations)
        if key in self._first_passes:
            return self._first_passes[key]
        cond = self.backend.encode_text(prompts.scene_prompt)
        null = self.backend.null_condition()
        weight = cfg.guidance_weight
        z_T = scene_traj.at(sched.max_index)
        for attempt in range(2):
            traj = sample(z_T, GuidanceConfig(weight, cond, null), self.backend, sched)
            image = np.clip(self.backend.codec.decode(traj.final.data), 0.0, 1.0)
            mask = self.seg.segment_person(image)
            if mask is not None and np.asarray(mask).any():
                log.emit("first_pass", guidance_weight=weight, attempt=attempt + 1,
                         mask_pixels=int(np.asarray(mask).sum()))
                out = (traj, image, np.asarray(mask, dtype=np.uint8), weight)
                self._first_passes[key] = out
                return out
            if attempt == 0:
                log.emit("no_person_detected", level="warning", guidance_weight=weight)
                weight = weight + cfg.retry_guidance_increment
        log.emit("insertion_failure", level="error", guidance_weight=weight)
        raise InsertionFailureError(
            f"no person detected after retry (guidance weights {cfg.guidance_weight} and {weight})")

    def _controller(self, ref, prompts, cfg, sched, log: RunLog, warnings: list[str], dump):
        pcfg = PersonalizationConfig(target_blocks=cfg.target_blocks,
                                     conditional_branch_only=cfg.conditional_branch_only, enabled=True)
        ref_mask = self.seg.segment_person(ref)
        if ref_mask is None or not np.asarray(ref_mask).any():
            msg = "no subject found in the reference image; personalization disabled"
            warnings.append(msg)
            log.emit("personalization_disabled", level="warning", reason="empty reference mask")
            return None
        pyramid = build_pyramid(np.asarray(ref_mask, dtype=np.uint8), self._latent_resolutions(ref.shape))
        ref_cond = self.backend.encode_text(prompts.subject_prompt)
        ref_traj = self.inversions.invert(ref, ref_cond, self.backend, sched,
                                          InversionConfig(cfg.renoise_iterations))
        try:
            return ReferenceAttentionController(self.backend, sched, ref_traj, pyramid, pcfg,
                                                mode=cfg.reference_kv_mode, dump=dump)
        except DegenerateMaskError as exc:
            warnings.append(f"{exc}; personalization disabled")
            log.emit("personalization_disabled", level="warning", reason=str(exc))
            return None

    def run(self, scene_image: np.ndarray, reference_image: np.ndarray, prompts: PromptPair,
            cfg: PipelineConfig = PipelineConfig(), log: Optional[RunLog] = None,
            keep_trajectories: bool = False) -> GenerationResult:
        log = log or RunLog()
        warnings: list[str] = []
        sched = make_schedule(cfg.num_steps, cfg.num_train_timesteps)
        BlendingConfig(cfg.blending_window).validate(cfg.num_steps)
        scene = np.asarray(scene_image, dtype=np.float64)
        ref = resize_to(reference_image, scene.shape[:2], cfg.reference_scale)
        if not prompts.substitution_applies:
            warnings.append(f"'a person' not found in scene prompt; subject description prepended")
            log.emit("prompt_substitution", level="warning", prompt=prompts.substituted_prompt)

        scene_cond = self.backend.encode_text(cfg.scene_inversion_prompt or prompts.inversion_caption)
        inv_cfg = InversionConfig(cfg.renoise_iterations)
        scene_traj = self.inversions.invert(scene, scene_cond, self.backend, sched, inv_cfg)
        log.emit("scene_inverted", prompt=scene_cond.prompt_text)

        first_traj, first_image, mask, first_weight = self._first_pass(scene, scene_traj, prompts, cfg,
                                                                       sched, log)
        fg = dilate(mask, cfg.dilation_radius)
        fg_pyramid = build_pyramid(fg, self._latent_resolutions(scene.shape))

        dump = AttentionDump() if cfg.dump_attention else None
        ctl = None
        if cfg.personalization:
            ctl = self._controller(ref, prompts, cfg, sched, log, warnings, dump)
        blending = None
        if cfg.blending:
            blending = Blending(scene_traj, fg_pyramid, BlendingConfig(cfg.blending_window, enabled=True))
        prompt = prompts.substituted_prompt
        gcfg = GuidanceConfig(cfg.effective_second_pass_weight, self.backend.encode_text(prompt),
                              self.backend.null_condition())
        second = sample(scene_traj.at(sched.max_index), gcfg, self.backend, sched, blending, ctl)
        log.emit("second_pass", guidance_weight=gcfg.weight, personalized=ctl is not None,
                 blended_steps=second.blended)
        output = self.backend.codec.decode(second.final.data)

        result = GenerationResult(
            output_image=np.clip(output, 0.0, 1.0),
            person_mask=fg_pyramid,
            first_pass_image=np.clip(first_image, 0.0, 1.0),
            config=cfg,
            prompt=prompt,
            warnings=warnings,
            attention_dump=dump,
            stats={
                "first_pass_guidance_weight": first_weight,
                "second_pass_guidance_weight": gcfg.weight,
                "blended_steps": list(second.blended),
                "personalized": ctl is not None,
                "reference_calls": ctl.reference_calls if ctl is not None else 0,
                "raw_person_mask_pixels": int(mask.sum()),
            },
        )
        if keep_trajectories:
            result.trajectories = {"scene": scene_traj, "first_pass": first_traj, "second_pass": second}
        return result


def run(scene_image, reference_image, prompts: PromptPair, cfg: PipelineConfig,
        backend: DenoiserBackend, seg: SegmentationClient, **kwargs) -> GenerationResult:
    return Pipeline(backend, seg).run(scene_image, reference_image, prompts, cfg, **kwargs)


ABLATION_VARIANTS = ("no_blending", "no_personalization", "both_branches", "guidance_sweep", "window_sweep")


def ablation_configs(variant: str, cfg: PipelineConfig, values: Sequence = ()) -> list[tuple[str, PipelineConfig]]:
    if variant == "no_blending":
        return [("no_blending", cfg.replace(blending=False))]
    if variant == "no_personalization":
        return [("no_personalization", cfg.replace(personalization=False))]
    if variant == "both_branches":
        return [("both_branches", cfg.replace(conditional_branch_only=False))]
    if variant == "guidance_sweep":
        if not values:
            raise ConfigError("guidance_sweep needs at least one weight")
        return [(f"w={float(w):g}", cfg.replace(guidance_weight=float(w))) for w in values]
    if variant == "window_sweep":
        if not values:
            raise ConfigError("window_sweep needs at least one window")
        return [(f"t=[{lo},{hi}]", cfg.replace(blending_window=(int(lo), int(hi)), blending=True))
                for lo, hi in values]
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def run_ablation(variant: str, scene_image, reference_image, prompts: PromptPair, cfg: PipelineConfig,
                 backend: DenoiserBackend, seg: SegmentationClient, values: Sequence = (),
                 include_baseline: bool = False, pipeline: Optional[Pipeline] = None) -> list[GenerationResult]:
    pipe = pipeline or Pipeline(backend, seg)
    configs = ablation_configs(variant, cfg, values)
    if include_baseline:
        configs = [("default", cfg)] + configs
    results = []
    for label, variant_cfg in configs:
        result = pipe.run(scene_image, reference_image, prompts, variant_cfg)
        result.label = label
        results.append(result)
    return results


RUN_FILES = ("result.png", "first_pass.png", "person_mask.png", "config.json", "log.jsonl")


def write_run_dir(result: GenerationResult, out_dir, log: Optional[RunLog] = None,
                  extra_config: Optional[dict] = None) -> Path:
    """Write ``result.png``, ``first_pass.png``, ``person_mask.png``, ``config.json``, ``log.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.output_image, out / "result.png")
    save_image(result.first_pass_image, out / "first_pass.png")
    save_mask(result.person_mask.base, out / "person_mask.png")
    config = result.config.to_dict()
    config["resolved"] = {
        "prompt": result.prompt,
        "first_pass_guidance_weight": result.stats.get("first_pass_guidance_weight"),
        "second_pass_guidance_weight": result.stats.get("second_pass_guidance_weight"),
        "personalized": result.stats.get("personalized"),
        "label": result.label,
    }
    if extra_config:
        config["resolved"].update(extra_config)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    (log or RunLog()).write(out / "log.jsonl")
    if result.attention_dump is not None:
        result.attention_dump.write_csv(out / "attention.csv")
    return out
