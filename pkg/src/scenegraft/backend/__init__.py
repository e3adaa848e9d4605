from .base import (
    CONDITIONAL,
    UNCONDITIONAL,
    AttentionState,
    CallCounter,
    DenoiserBackend,
    HookRegistry,
    ImageCodec,
    LatentTensor,
    LayerDescriptor,
    TextCondition,
    block_names,
    register_hook,
)
from .scheduler import (
    SchedulerState,
    constant_schedule,
    ddim_inverse_step,
    ddim_step,
    ddim_transfer,
    make_schedule,
)
from .toy import SpaceToDepthCodec, ToyBackend, make_toy_backend


def load_backend(name: str, **kwargs) -> DenoiserBackend:
    """Construct a backend by config name (``toy`` or ``sdxl-class``)."""
    if name == "toy":
        return make_toy_backend(kwargs.pop("seed", 0), kwargs.pop("latent_size", 32), **kwargs)
    if name == "sdxl-class":
        from .diffusers_backend import DiffusersBackend

        return DiffusersBackend.from_pretrained(**kwargs)
    raise ValueError(f"unknown backend {name!r}; expected 'toy' or 'sdxl-class'")
