"""Adapter exposing a diffusers UNet + VAE as a :class:`DenoiserBackend`.

Every self-attention (``attn1``) module gets a processor that computes the
regular attention in torch, and hands ``q, k, v`` and the output to the
numpy hook chain only when hooks exist for that layer.

Block labels follow forward order over transformer groups: each
``*_blocks.i.attentions.j`` group is one block, numbered ``Down-1..``,
``Mid``, ``Up-1..``. On SDXL this yields 70 self-attention layers and puts
``Up-2``/``Up-3``/``Up-4`` at ``up_blocks.0.attentions.1``,
``up_blocks.0.attentions.2`` and ``up_blocks.1.attentions.0``.
"""

from __future__ import annotations

import logging
import re
import threading
from typing import Any, Callable, Optional

import numpy as np

from ..errors import ConfigError, ShapeError
from .base import AttentionState, HookMap, HookRegistry, LayerDescriptor, TextCondition, run_hooks

logger = logging.getLogger(__name__)

_KEY = re.compile(r"^(down_blocks|mid_block|up_blocks)(?:\.(\d+))?\.attentions\.(\d+)\.transformer_blocks\.(\d+)\.attn1$")
_SECTION_ORDER = {"down_blocks": 0, "mid_block": 1, "up_blocks": 2}

# encode_fn(prompt) -> (encoder_hidden_states, added_cond_kwargs or None)
TextEncodeFn = Callable[[str], tuple[Any, Optional[dict]]]


def _sort_key(name: str):
    m = _KEY.match(name)
    section, block, group, tb = m.groups()
    return _SECTION_ORDER[section], int(block or 0), int(group), int(tb)


def _downsample_factor(section: str, block: int, num_blocks: int) -> int:
    if section == "down_blocks":
        return 2 ** block
    if section == "mid_block":
        return 2 ** (num_blocks - 1)
    return 2 ** (num_blocks - 1 - block)


def label_self_attention_layers(unet, latent_size: tuple[int, int]) -> list[tuple[str, LayerDescriptor]]:
    """Forward-ordered ``(module_name, descriptor)`` for every ``attn1`` module of ``unet``."""
    names = sorted((n for n, _ in unet.named_modules() if _KEY.match(n)), key=_sort_key)
    num_blocks = len(unet.config.block_out_channels)
    groups: dict[tuple[str, int, int], str] = {}
    counters = {"down_blocks": 0, "up_blocks": 0}
    out = []
    for index, name in enumerate(names):
        section, block, group, _ = _KEY.match(name).groups()
        gkey = (section, int(block or 0), int(group))
        if gkey not in groups:
            if section == "mid_block":
                groups[gkey] = "Mid"
            else:
                counters[section] += 1
                groups[gkey] = f"{'Down' if section == 'down_blocks' else 'Up'}-{counters[section]}"
        f = _downsample_factor(section, int(block or 0), num_blocks)
        module = unet.get_submodule(name)
        res = (latent_size[0] // f, latent_size[1] // f)
        out.append((name, LayerDescriptor(index=index, block=groups[gkey], resolution=res,
                                          dim=module.inner_dim // module.heads, name=name)))
    return out


class _CallContext(threading.local):
    hooks: Optional[HookMap] = None
    branch: str = "conditional"
    timestep: int = 0


class HookedSelfAttnProcessor:
    """Scaled dot-product self-attention with a numpy hook point on the per-head output."""

    def __init__(self, backend: "DiffusersBackend", layer: LayerDescriptor):
        self.backend = backend
        self.layer = layer

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None,
                 *args, **kwargs):
        import torch
        import torch.nn.functional as F

        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch, tokens, _ = hidden_states.shape
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        q = attn.to_q(hidden_states)
        k = attn.to_k(hidden_states)
        v = attn.to_v(hidden_states)
        heads = attn.heads
        d = k.shape[-1] // heads
        q, k, v = (x.view(batch, -1, heads, d).transpose(1, 2) for x in (q, k, v))
        if getattr(attn, "norm_q", None) is not None:
            q = attn.norm_q(q)
        if getattr(attn, "norm_k", None) is not None:
            k = attn.norm_k(k)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attention_mask, dropout_p=0.0, is_causal=False)

        ctx = self.backend._ctx
        registry = self.backend.hooks
        if registry.for_layer(self.layer.index) or (ctx.hooks and ctx.hooks.get(self.layer.index)):
            outs = []
            for i in range(batch):
                state = AttentionState(q=q[i].double().cpu().numpy(), k=k[i].double().cpu().numpy(),
                                       v=v[i].double().cpu().numpy(), layer=self.layer,
                                       branch=ctx.branch, timestep=ctx.timestep)
                res = run_hooks(state, out[i].double().cpu().numpy(), registry, ctx.hooks)
                outs.append(torch.from_numpy(np.ascontiguousarray(res)))
            out = torch.stack(outs).to(dtype=q.dtype, device=q.device)

        out = out.transpose(1, 2).reshape(batch, -1, heads * d)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class VAECodec:
    """``AutoencoderKL`` wrapper: images in ``[0, 1]`` (H, W, 3) to scaled latents (C, h, w)."""

    def __init__(self, vae, device="cpu", dtype=None):
        import torch

        self.vae = vae
        self.device = device
        self.dtype = dtype or torch.float32
        self.scale = float(getattr(vae.config, "scaling_factor", 1.0))
        self.factor = 2 ** (len(vae.config.block_out_channels) - 1)
        self.channels = int(vae.config.latent_channels)

    def latent_shape(self, image_shape) -> tuple[int, int, int]:
        h, w = int(image_shape[0]), int(image_shape[1])
        if h % self.factor or w % self.factor:
            raise ShapeError(f"image size {(h, w)} is not divisible by {self.factor}")
        return self.channels, h // self.factor, w // self.factor

    def encode(self, image: np.ndarray) -> np.ndarray:
        import torch

        image = np.asarray(image)
        if image.dtype == np.uint8:
            image = image / 255.0
        self.latent_shape(image.shape)
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)[None] * 2.0 - 1.0))
        with torch.no_grad():
            z = self.vae.encode(x.to(self.device, self.dtype)).latent_dist.mean
        return (z[0].double().cpu().numpy()) * self.scale

    def decode(self, latent: np.ndarray) -> np.ndarray:
        import torch

        z = torch.from_numpy(np.ascontiguousarray(latent / self.scale)[None])
        with torch.no_grad():
            x = self.vae.decode(z.to(self.device, self.dtype)).sample
        return ((x[0].double().cpu().numpy().transpose(1, 2, 0) + 1.0) / 2.0).clip(0.0, 1.0)


class DiffusersBackend:
    name = "sdxl-class"

    def __init__(self, unet, vae, encode_fn: TextEncodeFn, latent_size: tuple[int, int], device="cpu",
                 dtype=None):
        import torch

        self.unet = unet.to(device)
        self.device = device
        self.dtype = dtype or torch.float32
        self.codec = VAECodec(vae.to(device), device, self.dtype)
        self.encode_fn = encode_fn
        self.latent_size = tuple(latent_size)
        self._ctx = _CallContext()
        labelled = label_self_attention_layers(unet, self.latent_size)
        if not labelled:
            raise ConfigError("UNet has no self-attention layers")
        self.attention_layers = [layer for _, layer in labelled]
        self.hooks = HookRegistry(len(self.attention_layers))
        processors = {}
        for name, proc in unet.attn_processors.items():
            module_name = name[: -len(".processor")]
            processors[name] = proc
            for mname, layer in labelled:
                if mname == module_name:
                    processors[name] = HookedSelfAttnProcessor(self, layer)
        unet.set_attn_processor(processors)
        self._null = None

    @classmethod
    def from_pretrained(cls, model_path: str, latent_size=(128, 128), device: Optional[str] = None,
                        dtype=None) -> "DiffusersBackend":
        """Load an SDXL-class checkpoint directory or hub id via ``StableDiffusionXLPipeline``."""
        import torch
        from diffusers import StableDiffusionXLPipeline

        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        dtype = dtype or (torch.float16 if device == "cuda" else torch.float32)
        pipe = StableDiffusionXLPipeline.from_pretrained(model_path, torch_dtype=dtype).to(device)
        if isinstance(latent_size, int):
            latent_size = (latent_size, latent_size)
        h, w = latent_size[0] * 8, latent_size[1] * 8

        def encode_fn(prompt: str):
            with torch.no_grad():
                emb, _, pooled, _ = pipe.encode_prompt(prompt, device=device, num_images_per_prompt=1,
                                                       do_classifier_free_guidance=False)
            time_ids = torch.tensor([[h, w, 0, 0, h, w]], device=device, dtype=dtype)
            return emb, {"text_embeds": pooled, "time_ids": time_ids}

        return cls(pipe.unet, pipe.vae, encode_fn, latent_size, device, dtype)

    def encode_text(self, prompt: str) -> TextCondition:
        if not prompt:
            return self.null_condition()
        return TextCondition(prompt_text=prompt, embedding=self.encode_fn(prompt))

    def null_condition(self) -> TextCondition:
        if self._null is None:
            self._null = TextCondition.null(self.encode_fn(""))
        return self._null

    def predict(self, latent: np.ndarray, timestep: int, condition: TextCondition,
                hooks: Optional[HookMap] = None) -> np.ndarray:
        import torch

        expected = (self.codec.channels,) + self.latent_size
        if latent.shape != expected:
            raise ShapeError(f"backend configured for latent shape {expected}, got {latent.shape}")
        states, added = condition.embedding
        self._ctx.hooks = hooks
        self._ctx.branch = condition.branch
        self._ctx.timestep = int(timestep)
        try:
            x = torch.from_numpy(np.ascontiguousarray(latent)[None]).to(self.device, self.dtype)
            t = torch.tensor([int(timestep)], device=self.device)
            with torch.no_grad():
                eps = self.unet(x, t, encoder_hidden_states=states, added_cond_kwargs=added).sample
        finally:
            self._ctx.hooks = None
        return eps[0].double().cpu().numpy()
