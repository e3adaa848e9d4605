"""Core value types and the backend interfaces the pipeline is written against."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from ..errors import ShapeError

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"


@dataclass(frozen=True)
class LatentTensor:
    """A latent array ``(channels, height, width)`` tagged with its step index.

    ``timestep`` is the position on the sampling schedule: 0 is the clean latent,
    ``num_steps`` is the fully noised one.
    """

    data: np.ndarray
    timestep: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass(frozen=True)
class TextCondition:
    prompt_text: str
    embedding: Any = None
    is_null: bool = False

    @classmethod
    def null(cls, embedding: Any = None) -> "TextCondition":
        return cls(prompt_text="", embedding=embedding, is_null=True)

    @property
    def branch(self) -> str:
        return UNCONDITIONAL if self.is_null else CONDITIONAL


@dataclass(frozen=True)
class LayerDescriptor:
    index: int
    block: str
    resolution: tuple[int, int]
    dim: int
    name: str = ""

    @property
    def tokens(self) -> int:
        return self.resolution[0] * self.resolution[1]


@dataclass
class AttentionState:
    """Query/key/value blocks seen by one self-attention layer during one predict call.

    Arrays have shape ``(..., tokens, d)``; leading axes (e.g. heads) broadcast.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    layer: LayerDescriptor
    branch: str = CONDITIONAL
    timestep: int = 0

    def __post_init__(self) -> None:
        if self.q.shape[-1] != self.k.shape[-1]:
            raise ShapeError(f"query dim {self.q.shape[-1]} != key dim {self.k.shape[-1]}")
        if self.k.shape[-2] != self.v.shape[-2]:
            raise ShapeError(f"key tokens {self.k.shape[-2]} != value tokens {self.v.shape[-2]}")


# A hook receives the attention state and the output the layer would produce,
# and returns the output to use (``None`` keeps it).
AttentionHook = Callable[[AttentionState, np.ndarray], Optional[np.ndarray]]
HookMap = Mapping[int, Sequence[AttentionHook]]


class RemovableHandle:
    def __init__(self, registry: "HookRegistry", key: int):
        self._registry = registry
        self._key = key

    def remove(self) -> None:
        self._registry._hooks.pop(self._key, None)


class HookRegistry:
    """Persistent per-layer hooks; fired before any per-call hooks, in registration order."""

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self._hooks: dict[int, tuple[int, AttentionHook]] = {}
        self._ids = itertools.count()

    def register(self, layer_index: int, hook: AttentionHook) -> RemovableHandle:
        if not 0 <= layer_index < self.num_layers:
            raise IndexError(f"layer index {layer_index} out of range [0, {self.num_layers})")
        key = next(self._ids)
        self._hooks[key] = (layer_index, hook)
        return RemovableHandle(self, key)

    def for_layer(self, layer_index: int) -> list[AttentionHook]:
        return [h for key, (idx, h) in sorted(self._hooks.items()) if idx == layer_index]

    def clear(self) -> None:
        self._hooks.clear()


def run_hooks(state: AttentionState, output: np.ndarray, registry: HookRegistry,
              call_hooks: Optional[HookMap]) -> np.ndarray:
    hooks = registry.for_layer(state.layer.index)
    if call_hooks:
        hooks = hooks + list(call_hooks.get(state.layer.index, ()))
    for hook in hooks:
        replaced = hook(state, output)
        if replaced is not None:
            if replaced.shape != output.shape:
                raise ShapeError(
                    f"hook on layer {state.layer.index} returned shape {replaced.shape}, "
                    f"expected {output.shape}")
            output = replaced
    return output


@runtime_checkable
class ImageCodec(Protocol):
    """Maps RGB float images in ``[0, 1]`` of shape ``(H, W, 3)`` to latents and back."""

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...

    def latent_shape(self, image_shape: tuple[int, ...]) -> tuple[int, int, int]: ...


@runtime_checkable
class DenoiserBackend(Protocol):
    """Noise predictor with self-attention interception.

    ``predict`` takes the model (training) timestep, not the step index.
    """

    name: str
    attention_layers: Sequence[LayerDescriptor]
    codec: ImageCodec
    hooks: HookRegistry

    def predict(self, latent: np.ndarray, timestep: int, condition: TextCondition,
                hooks: Optional[HookMap] = None) -> np.ndarray: ...

    def encode_text(self, prompt: str) -> TextCondition: ...

    def null_condition(self) -> TextCondition: ...


def block_names(backend: DenoiserBackend) -> list[str]:
    seen: list[str] = []
    for layer in backend.attention_layers:
        if layer.block not in seen:
            seen.append(layer.block)
    return seen


def register_hook(backend: DenoiserBackend, layer_index: int, hook: AttentionHook) -> RemovableHandle:
    return backend.hooks.register(layer_index, hook)


@dataclass
class CallCounter:
    """Wraps a backend and records every predict call; used for call-budget checks."""

    backend: Any
    calls: list[tuple[int, str]] = field(default_factory=list)

    def __getattr__(self, item):
        return getattr(self.backend, item)

    def predict(self, latent, timestep, condition, hooks=None):
        self.calls.append((int(timestep), condition.branch))
        return self.backend.predict(latent, timestep, condition, hooks=hooks)
