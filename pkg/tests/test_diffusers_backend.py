from collections import Counter

import numpy as np
import pytest

torch = pytest.importorskip("torch")
diffusers = pytest.importorskip("diffusers")

from scenegraft.attention import (  # noqa: E402
    AttentionKVCache,
    PersonalizationConfig,
    ReferenceAttentionController,
    extended_self_attention,
    self_attention,
)
from scenegraft.backend import CallCounter, DenoiserBackend, block_names, make_schedule  # noqa: E402
from scenegraft.backend.diffusers_backend import DiffusersBackend, label_self_attention_layers  # noqa: E402
from scenegraft.errors import ShapeError  # noqa: E402
from scenegraft.guidance import GuidanceConfig, sample  # noqa: E402
from scenegraft.inversion import InversionConfig, invert_latent  # noqa: E402
from scenegraft.masks import build_pyramid  # noqa: E402


def tiny_unet():
    torch.manual_seed(0)
    return diffusers.UNet2DConditionModel(
        sample_size=8, in_channels=4, out_channels=4, layers_per_block=1, block_out_channels=(16, 32),
        down_block_types=("CrossAttnDownBlock2D", "DownBlock2D"), up_block_types=("UpBlock2D", "CrossAttnUpBlock2D"),
        cross_attention_dim=16, attention_head_dim=4, norm_num_groups=8).eval()


def tiny_vae():
    torch.manual_seed(1)
    return diffusers.AutoencoderKL(block_out_channels=(8, 16), in_channels=3, out_channels=3, latent_channels=4,
                                   norm_num_groups=8, down_block_types=("DownEncoderBlock2D",) * 2,
                                   up_block_types=("UpDecoderBlock2D",) * 2).eval()


def encode(prompt):
    g = torch.Generator().manual_seed(sum(map(ord, prompt)))
    return torch.randn(1, 3, 16, generator=g), None


@pytest.fixture(scope="module")
def backend():
    return DiffusersBackend(tiny_unet(), tiny_vae(), encode, (8, 8))


def test_sdxl_shaped_unet_has_seventy_layers():
    unet = diffusers.UNet2DConditionModel(
        sample_size=16, in_channels=4, out_channels=4, layers_per_block=2, block_out_channels=(8, 16, 32),
        down_block_types=("DownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D"),
        up_block_types=("CrossAttnUpBlock2D", "CrossAttnUpBlock2D", "UpBlock2D"),
        transformer_layers_per_block=(1, 2, 10), cross_attention_dim=8, attention_head_dim=(2, 4, 8),
        norm_num_groups=4)
    labels = label_self_attention_layers(unet, (128, 128))
    assert len(labels) == 70
    counts = Counter(layer.block for _, layer in labels)
    assert counts == {"Down-1": 2, "Down-2": 2, "Down-3": 10, "Down-4": 10, "Mid": 10,
                      "Up-1": 10, "Up-2": 10, "Up-3": 10, "Up-4": 2, "Up-5": 2, "Up-6": 2}
    first = {layer.block: (name, layer.resolution) for name, layer in reversed(labels)}
    assert first["Up-2"] == ("up_blocks.0.attentions.1.transformer_blocks.0.attn1", (32, 32))
    assert first["Up-4"] == ("up_blocks.1.attentions.0.transformer_blocks.0.attn1", (64, 64))
    assert [layer.index for _, layer in labels] == list(range(70))


def test_protocol_and_labels(backend):
    assert isinstance(backend, DenoiserBackend)
    # a cross-attention up block holds layers_per_block + 1 transformer groups
    assert block_names(backend) == ["Down-1", "Mid", "Up-1", "Up-2"]
    assert [layer.resolution for layer in backend.attention_layers] == [(8, 8), (4, 4), (8, 8), (8, 8)]


def test_matches_stock_attention_processor(backend):
    stock = tiny_unet()
    stock.set_default_attn_processor()
    z = np.random.default_rng(0).normal(size=(4, 8, 8))
    cond = backend.encode_text("a person")
    with torch.no_grad():
        ref = stock(torch.from_numpy(z[None]).float(), torch.tensor([500]),
                    encoder_hidden_states=cond.embedding[0]).sample[0].double().numpy()
    np.testing.assert_allclose(backend.predict(z, 500, cond), ref, atol=1e-5)


def test_numpy_hooks_reproduce_attention(backend):
    z = np.random.default_rng(1).normal(size=(4, 8, 8))
    cond = backend.encode_text("a person")
    base = backend.predict(z, 300, cond)
    seen = []

    def recompute(state, output):
        seen.append((state.layer.index, state.branch, state.timestep, state.q.shape))
        np.testing.assert_allclose(self_attention(state), output, atol=1e-5)
        return self_attention(state)

    hooks = {layer.index: [recompute] for layer in backend.attention_layers}
    np.testing.assert_allclose(backend.predict(z, 300, cond, hooks=hooks), base, atol=1e-5)
    assert [s[:3] for s in seen] == [(i, "conditional", 300) for i in range(4)]
    assert seen[0][3] == (4, 64, backend.attention_layers[0].dim) == (4, 64, 4)


def test_empty_reference_cache_is_identity(backend):
    z = np.random.default_rng(2).normal(size=(4, 8, 8))
    cond = backend.encode_text("a person")
    pcfg = PersonalizationConfig(target_blocks=("Up-1",))
    cache = AttentionKVCache()
    up = [layer for layer in backend.attention_layers if layer.block == "Up-1"][0]
    cache.put(up.index, 100, np.zeros((4, 0, 8)), np.zeros((4, 0, 8)))
    hook = {up.index: [lambda s, o: extended_self_attention(s, cache, pcfg)]}
    np.testing.assert_allclose(backend.predict(z, 100, cond, hooks=hook), backend.predict(z, 100, cond), atol=1e-5)


def test_shape_check(backend):
    with pytest.raises(ShapeError):
        backend.predict(np.zeros((4, 4, 4)), 10, backend.null_condition())


def test_codec_shapes(backend):
    img = np.random.default_rng(3).random((16, 16, 3))
    z = backend.codec.encode(img)
    assert z.shape == backend.codec.latent_shape(img.shape) == (4, 8, 8)
    out = backend.codec.decode(z)
    assert out.shape == (16, 16, 3) and 0.0 <= out.min() and out.max() <= 1.0
    with pytest.raises(ShapeError):
        backend.codec.encode(np.zeros((15, 16, 3)))


def test_inversion_and_personalized_sampling_run(backend):
    sched = make_schedule(3)
    counter = CallCounter(backend)
    cond = backend.encode_text("a man")
    rng = np.random.default_rng(4)
    traj = invert_latent(rng.normal(size=(4, 8, 8)), cond, counter, sched, InversionConfig(1))
    assert len(counter.calls) == 3 * 2 and traj.covers(sched)
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:12, 6:10] = 1
    pyr = build_pyramid(mask, [(8, 8), (4, 4)])
    ctl = ReferenceAttentionController(backend, sched, traj, pyr, PersonalizationConfig(target_blocks=("Up-1",)))
    gcfg = GuidanceConfig(7.5, backend.encode_text("a person"), backend.null_condition())
    out = sample(traj.at(3), gcfg, backend, sched, attn_ctl=ctl)
    plain = sample(traj.at(3), gcfg, backend, sched)
    assert np.isfinite(out.final.data).all()
    assert not np.allclose(out.final.data, plain.final.data)
    assert ctl.reference_calls == 3
