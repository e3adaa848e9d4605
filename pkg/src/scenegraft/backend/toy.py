"""Analytic toy backend for desk-scale verification.

The noise prediction is affine in the latent:

    eps(z, t, c) = lam * W z + b0 + [c non-null] * insertion + gain * sum_l up(Attn_l(z)) Wo_l

Each attention layer pools the latent to its own resolution, projects it to
values, and attends with *positional* queries and keys. Queries and keys do not
depend on the latent, so every attention layer (plain or extended with a
fixed reference block) is affine in ``z`` as well, which gives inversion an
exact fixed point. Non-null conditions add a localized "insertion" pattern that
classifier-free guidance amplifies; the prompt text itself only matters when
``prompt_sensitivity`` is nonzero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ShapeError
from .base import AttentionState, HookMap, HookRegistry, LayerDescriptor, TextCondition, run_hooks

EMBED_DIM = 16


class SpaceToDepthCodec:
    """Exact codec: ``[0, 1]`` RGB -> ``[-1, 1]``, then ``factor x factor`` space-to-depth."""

    def __init__(self, factor: int = 2):
        self.factor = factor

    def latent_shape(self, image_shape) -> tuple[int, int, int]:
        H, W = image_shape[:2]
        f = self.factor
        if H % f or W % f:
            raise ShapeError(f"image size {(H, W)} not divisible by codec factor {f}")
        return (3 * f * f, H // f, W // f)

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        image = image / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
        c, h, w = self.latent_shape(image.shape)
        f = self.factor
        x = image * 2.0 - 1.0
        x = x.reshape(h, f, w, f, 3).transpose(4, 1, 3, 0, 2)
        return np.ascontiguousarray(x.reshape(c, h, w))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        c, h, w = latent.shape
        f = self.factor
        if c != 3 * f * f:
            raise ShapeError(f"latent has {c} channels, codec expects {3 * f * f}")
        x = latent.reshape(3, f, f, h, w).transpose(3, 1, 4, 2, 0).reshape(h * f, w * f, 3)
        return (x + 1.0) / 2.0


def _hash_vector(text: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return v / np.linalg.norm(v)


def _positional_features(res: int) -> np.ndarray:
    coords = (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    feats = []
    for freq in (0.5, 1.0):
        for axis in (yy, xx):
            feats += [np.sin(2 * np.pi * freq * axis), np.cos(2 * np.pi * freq * axis)]
    return np.stack([f.reshape(-1) for f in feats], axis=1)


def avg_pool(z: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return z
    c, h, w = z.shape
    return z.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def upsample(z: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return z
    return np.repeat(np.repeat(z, k, axis=1), k, axis=2)


@dataclass(frozen=True)
class ToyParams:
    lam: float
    mix: np.ndarray          # (C, C) symmetric channel mixing W
    bias: np.ndarray         # (C,) condition-independent offset b0
    insertion: np.ndarray    # (C, L, L) pattern added for non-null conditions
    attention_gain: float
    prompt_sensitivity: float
    blob_center: tuple[float, float]


class ToyBackend:
    name = "toy"

    def __init__(self, seed: int = 0, latent_size: int = 32, codec_factor: int = 2, lam: float = 0.04,
                 attention_gain: float = 0.02, insertion_strength: float = 0.024,
                 prompt_sensitivity: float = 0.0, head_dim: int = 8, attention_sharpness: float = 3.0):
        if latent_size < 8 or latent_size % 4:
            raise ValueError(f"latent_size must be a multiple of 4 and >= 8, got {latent_size}")
        self.seed = seed
        self.latent_size = L = latent_size
        self.codec = SpaceToDepthCodec(codec_factor)
        C = self.channels = 3 * codec_factor ** 2
        rng = np.random.default_rng(seed)

        a = rng.normal(size=(C, C))
        sym = (a + a.T) / 2
        mix = np.eye(C) + 0.3 * sym / np.linalg.norm(sym, 2)
        bias = 0.002 * rng.normal(size=C)

        cy, cx = L * (0.35 + 0.3 * rng.random(2))
        sx = L * (0.09 + 0.03 * rng.random())
        sy = 1.8 * sx
        yy, xx = np.meshgrid(np.arange(L) + 0.5, np.arange(L) + 0.5, indexing="ij")
        blob = np.exp(-((yy - cy) ** 2 / (2 * sy ** 2) + (xx - cx) ** 2 / (2 * sx ** 2)))
        colour = rng.uniform(0.6, 1.0, size=3)
        direction = -np.broadcast_to(colour[:, None, None], (3, codec_factor, codec_factor)).reshape(C)
        insertion = insertion_strength * direction[:, None, None] * blob[None]

        self.params = ToyParams(lam=lam, mix=mix, bias=bias, insertion=insertion,
                                attention_gain=attention_gain, prompt_sensitivity=prompt_sensitivity,
                                blob_center=(float(cy), float(cx)))
        self._prompt_pattern = rng.normal(size=(C, L, L)) * 0.01

        from ..attention import attention_weights

        self.attention_layers: list[LayerDescriptor] = []
        self._layer_weights = []
        layout = [("Up-1", L // 4), ("Up-2", L // 4), ("Up-3", L // 2), ("Up-4", L // 2)]
        for index, (block, res) in enumerate(layout):
            self.attention_layers.append(LayerDescriptor(index=index, block=block, resolution=(res, res),
                                                         dim=head_dim, name=f"{block.lower()}.attn1"))
            feats = _positional_features(res)
            rot, _ = np.linalg.qr(rng.normal(size=(head_dim, head_dim)))
            k = feats @ rot[: feats.shape[1]]
            q = attention_sharpness * k
            wv = rng.normal(size=(C, head_dim)) / np.sqrt(C)
            wo = rng.normal(size=(head_dim, C)) / np.sqrt(head_dim)
            # queries/keys are latent-independent, so the plain softmax is fixed per layer
            self._layer_weights.append((q, k, wv, wo, attention_weights(q, k)))
        self.hooks = HookRegistry(len(self.attention_layers))

    def encode_text(self, prompt: str) -> TextCondition:
        if not prompt:
            return self.null_condition()
        return TextCondition(prompt_text=prompt, embedding=_hash_vector(prompt, EMBED_DIM))

    def null_condition(self) -> TextCondition:
        return TextCondition.null(np.zeros(EMBED_DIM))

    def predict(self, latent: np.ndarray, timestep: int, condition: TextCondition,
                hooks: Optional[HookMap] = None) -> np.ndarray:
        L, C = self.latent_size, self.channels
        if latent.shape != (C, L, L):
            raise ShapeError(f"toy backend expects latent shape {(C, L, L)}, got {latent.shape}")
        p = self.params
        eps = p.lam * np.einsum("ij,jhw->ihw", p.mix, latent) + p.bias[:, None, None]
        if not condition.is_null:
            eps = eps + p.insertion
            if p.prompt_sensitivity:
                emb = np.asarray(condition.embedding)
                eps = eps + p.prompt_sensitivity * float(emb[0]) * self._prompt_pattern
        for layer, (q, k, wv, wo, plain) in zip(self.attention_layers, self._layer_weights):
            res = layer.resolution[0]
            pool = L // res
            tokens = avg_pool(latent, pool).reshape(C, -1).T
            state = AttentionState(q=q, k=k, v=tokens @ wv, layer=layer, branch=condition.branch,
                                   timestep=int(timestep))
            out = run_hooks(state, plain @ state.v, self.hooks, hooks)
            y = (out @ wo).T.reshape(C, res, res)
            eps = eps + p.attention_gain * upsample(y, pool)
        return eps


def make_toy_backend(seed: int, latent_size: int, **kwargs) -> ToyBackend:
    return ToyBackend(seed=seed, latent_size=latent_size, **kwargs)
