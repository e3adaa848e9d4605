"""Self-attention primitives and mask-guided reference key/value injection.

Reference keys/values are gathered from the reference image's replayed
denoising pass, restricted to the subject mask by token selection, and
appended to the generation's own keys/values on targeted layers.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .backend.base import (
    CONDITIONAL,
    AttentionHook,
    AttentionState,
    DenoiserBackend,
    LayerDescriptor,
    LatentTensor,
    block_names,
)
from .backend.scheduler import SchedulerState, ddim_step
from .errors import CacheMissError, ConfigError, DegenerateMaskError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_TARGET_BLOCKS = ("Up-2", "Up-3", "Up-4")


@dataclass(frozen=True)
class PersonalizationConfig:
    target_blocks: tuple[str, ...] = DEFAULT_TARGET_BLOCKS
    conditional_branch_only: bool = True
    enabled: bool = True

    def applies(self, block: str, branch: str) -> bool:
        return (self.enabled and block in self.target_blocks
                and (branch == CONDITIONAL or not self.conditional_branch_only))


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``q k^T / sqrt(d)``."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def self_attention(state: AttentionState) -> np.ndarray:
    return attention_weights(state.q, state.k) @ state.v


@dataclass(frozen=True)
class KVEntry:
    k: np.ndarray
    v: np.ndarray

    @property
    def tokens(self) -> int:
        return self.k.shape[-2]


class AttentionKVCache:
    """Reference key/value blocks keyed by ``(layer_index, model_timestep)``; write-once."""

    def __init__(self):
        self._entries: dict[tuple[int, int], KVEntry] = {}

    def put(self, layer_index: int, timestep: int, k: np.ndarray, v: np.ndarray) -> None:
        key = (layer_index, timestep)
        if key in self._entries:
            raise KeyError(f"cache entry {key} already written")
        self._entries[key] = KVEntry(k, v)

    def get(self, layer_index: int, timestep: int) -> KVEntry:
        try:
            return self._entries[(layer_index, timestep)]
        except KeyError:
            raise CacheMissError(layer_index, timestep) from None

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    @property
    def token_counts(self) -> dict[tuple[int, int], int]:
        return {key: e.tokens for key, e in self._entries.items()}

    def evict_except(self, timestep: int) -> None:
        for key in [key for key in self._entries if key[1] != timestep]:
            del self._entries[key]


def extended_self_attention(state: AttentionState, cache: AttentionKVCache,
                            pcfg: PersonalizationConfig) -> np.ndarray:
    if not pcfg.applies(state.layer.block, state.branch):
        return self_attention(state)
    entry = cache.get(state.layer.index, state.timestep)
    if entry.tokens == 0:
        return self_attention(state)
    k_ref = np.broadcast_to(entry.k, state.k.shape[:-2] + entry.k.shape[-2:])
    v_ref = np.broadcast_to(entry.v, state.v.shape[:-2] + entry.v.shape[-2:])
    k = np.concatenate([state.k, k_ref], axis=-2)
    v = np.concatenate([state.v, v_ref], axis=-2)
    return attention_weights(state.q, k) @ v


def reference_mass(state: AttentionState, entry: KVEntry) -> float:
    """Mean attention mass that queries place on the reference tokens."""
    if entry.tokens == 0:
        return 0.0
    k_ref = np.broadcast_to(entry.k, state.k.shape[:-2] + entry.k.shape[-2:])
    w = attention_weights(state.q, np.concatenate([state.k, k_ref], axis=-2))
    return float(w[..., state.k.shape[-2]:].sum(axis=-1).mean())


def target_layers(backend: DenoiserBackend, pcfg: PersonalizationConfig) -> list[LayerDescriptor]:
    unknown = set(pcfg.target_blocks) - set(block_names(backend))
    if unknown:
        raise ConfigError(f"target blocks {sorted(unknown)} not in backend blocks {block_names(backend)}")
    return [layer for layer in backend.attention_layers if layer.block in pcfg.target_blocks]


def _token_selector(subject_mask, layer: LayerDescriptor) -> np.ndarray:
    level = subject_mask.level(layer.resolution)
    sel = level.reshape(-1).astype(bool)
    if not sel.any():
        raise DegenerateMaskError(layer.resolution)
    return sel


def _capture_hook(cache: AttentionKVCache, selector: np.ndarray) -> AttentionHook:
    def hook(state: AttentionState, output: np.ndarray) -> None:
        cache.put(state.layer.index, state.timestep,
                  np.array(state.k[..., selector, :]), np.array(state.v[..., selector, :]))
        return None

    return hook


def _capture_hooks(layers: Sequence[LayerDescriptor], selectors: dict[int, np.ndarray],
                   cache: AttentionKVCache) -> dict[int, list[AttentionHook]]:
    return {layer.index: [_capture_hook(cache, selectors[layer.index])] for layer in layers}


def extract_reference_kv(ref_traj, subject_mask, backend: DenoiserBackend, sched: SchedulerState,
                         pcfg: PersonalizationConfig) -> AttentionKVCache:
    """Replay the reference pass from its inverted latent and cache masked K/V for every step.

    The replay uses a single prompt-conditioned prediction per step (guidance
    weight 1) and plain self-attention.
    """
    layers = target_layers(backend, pcfg)
    selectors = {layer.index: _token_selector(subject_mask, layer) for layer in layers}
    cache = AttentionKVCache()
    hooks = _capture_hooks(layers, selectors, cache)
    z = ref_traj.at(sched.max_index)
    while z.timestep > 0:
        eps = backend.predict(z.data, sched.model_timestep(z.timestep), ref_traj.condition, hooks=hooks)
        z = ddim_step(z, eps, sched)
    return cache


@dataclass
class AttentionDump:
    rows: list[tuple[int, int, str, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestep", "layer", "branch", "reference_mass"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])


class ReferenceAttentionController:
    """Feeds reference K/V into targeted self-attention layers during sampling.

    In ``lockstep`` mode the reference pass is advanced one step per generation
    step, so only one timestep of K/V is held at a time. ``precompute`` mode
    replays the whole reference pass up front via :func:`extract_reference_kv`.
    """

    def __init__(self, backend: DenoiserBackend, sched: SchedulerState, ref_traj, subject_mask,
                 pcfg: PersonalizationConfig, mode: str = "lockstep",
                 dump: Optional[AttentionDump] = None):
        if mode not in ("lockstep", "precompute"):
            raise ConfigError(f"unknown reference mode {mode!r}")
        self.backend = backend
        self.sched = sched
        self.pcfg = pcfg
        self.mode = mode
        self.dump = dump
        self.condition = ref_traj.condition
        self.layers = target_layers(backend, pcfg)
        self._selectors = {layer.index: _token_selector(subject_mask, layer) for layer in self.layers}
        self.reference_calls = 0
        if mode == "precompute":
            self.cache = extract_reference_kv(ref_traj, subject_mask, backend, sched, pcfg)
        else:
            self.cache = AttentionKVCache()
        self._z_ref: LatentTensor = ref_traj.at(sched.max_index)

    def prepare(self, index: int) -> None:
        """Make K/V for the generation latent at step ``index`` available."""
        if self.mode == "precompute":
            return
        if self._z_ref.timestep != index:
            raise CacheMissError(-1, self.sched.model_timestep(index))
        t = self.sched.model_timestep(index)
        self.cache.evict_except(t)
        hooks = _capture_hooks(self.layers, self._selectors, self.cache)
        eps = self.backend.predict(self._z_ref.data, t, self.condition, hooks=hooks)
        self.reference_calls += 1
        self._z_ref = ddim_step(self._z_ref, eps, self.sched)

    def _inject(self, state: AttentionState, output: np.ndarray) -> Optional[np.ndarray]:
        if not self.pcfg.applies(state.layer.block, state.branch):
            return None
        if self.dump is not None:
            entry = self.cache.get(state.layer.index, state.timestep)
            self.dump.rows.append((state.timestep, state.layer.index, state.branch,
                                   reference_mass(state, entry)))
        return extended_self_attention(state, self.cache, self.pcfg)

    def hooks(self) -> dict[int, list[AttentionHook]]:
        if not self.pcfg.enabled:
            return {}
        return {layer.index: [self._inject] for layer in self.layers}


def mask_token_counts(subject_mask, layers: Iterable[LayerDescriptor]) -> dict[int, int]:
    return {layer.index: int(subject_mask.level(layer.resolution).sum()) for layer in layers}
