import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_attention
from scenegraft.attention import (
    AttentionDump,
    AttentionKVCache,
    PersonalizationConfig,
    ReferenceAttentionController,
    attention_weights,
    extended_self_attention,
    extract_reference_kv,
    mask_token_counts,
    reference_mass,
    self_attention,
    target_layers,
)
from scenegraft.backend import CallCounter, LayerDescriptor, make_schedule
from scenegraft.backend.base import AttentionState
from scenegraft.errors import CacheMissError, ConfigError, DegenerateMaskError, ShapeError
from scenegraft.guidance import GuidanceConfig, sample
from scenegraft.inversion import invert_latent
from scenegraft.masks import build_pyramid

LAYER = LayerDescriptor(index=0, block="Up-2", resolution=(2, 2), dim=4)


def _state(rng, n=4, d=4, branch="conditional", layer=LAYER, t=7):
    return AttentionState(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d)),
                          layer, branch, t)


def test_weights_rows_sum_to_one(rng):
    w = attention_weights(rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 6, 4)))
    assert w.shape == (3, 5, 6)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-14)
    with pytest.raises(ShapeError):
        attention_weights(np.zeros((2, 3)), np.zeros((2, 4)))


def test_self_attention_matches_brute(rng):
    st_ = _state(rng, n=6, d=3)
    np.testing.assert_allclose(self_attention(st_), brute_attention(st_.q, st_.k, st_.v), atol=1e-12)


def test_empty_reference_is_plain_attention(rng):
    st_ = _state(rng)
    cache = AttentionKVCache()
    cache.put(0, 7, np.zeros((0, 4)), np.zeros((0, 4)))
    np.testing.assert_array_equal(extended_self_attention(st_, cache, PersonalizationConfig()), self_attention(st_))


def test_full_duplication_is_plain_attention(rng):
    st_ = _state(rng, n=9, d=8)
    cache = AttentionKVCache()
    cache.put(0, 7, st_.k.copy(), st_.v.copy())
    np.testing.assert_allclose(extended_self_attention(st_, cache, PersonalizationConfig()),
                               self_attention(st_), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(0, 16), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_extended_matches_dense_brute_force(n, m, d, seed):
    rng = np.random.default_rng(seed)
    st_ = AttentionState(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d)),
                         LayerDescriptor(0, "Up-3", (1, n), d), "conditional", 3)
    k_ref, v_ref = rng.normal(size=(m, d)), rng.normal(size=(m, d))
    cache = AttentionKVCache()
    cache.put(0, 3, k_ref, v_ref)
    got = extended_self_attention(st_, cache, PersonalizationConfig(("Up-3",)))
    expected = brute_attention(st_.q, np.vstack([st_.k, k_ref]), np.vstack([st_.v, v_ref]))
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_heads_broadcast_over_reference(rng):
    q, k, v = rng.normal(size=(3, 2, 5, 4))
    st_ = AttentionState(q, k, v, LAYER, "conditional", 7)
    k_ref, v_ref = rng.normal(size=(2, 2, 2, 4))
    cache = AttentionKVCache()
    cache.put(0, 7, k_ref, v_ref)
    got = extended_self_attention(st_, cache, PersonalizationConfig())
    for h in range(2):
        np.testing.assert_allclose(got[h], brute_attention(q[h], np.vstack([k[h], k_ref[h]]),
                                                           np.vstack([v[h], v_ref[h]])), atol=1e-10)


@pytest.mark.parametrize("block,branch,cond_only,applies", [
    ("Up-2", "conditional", True, True),
    ("Up-2", "unconditional", True, False),
    ("Up-2", "unconditional", False, True),
    ("Up-1", "conditional", True, False),
])
def test_applies_gating(block, branch, cond_only, applies):
    assert PersonalizationConfig(conditional_branch_only=cond_only).applies(block, branch) is applies
    assert not PersonalizationConfig(enabled=False).applies(block, branch)


def test_gated_off_layers_ignore_cache(rng):
    st_ = _state(rng, branch="unconditional")
    # no entry in the cache: a gated-off call must not even look it up
    np.testing.assert_array_equal(extended_self_attention(st_, AttentionKVCache(), PersonalizationConfig()),
                                  self_attention(st_))


def test_cache_write_once_and_miss(rng):
    cache = AttentionKVCache()
    cache.put(1, 5, np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(KeyError):
        cache.put(1, 5, np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(CacheMissError) as info:
        cache.get(1, 6)
    assert (info.value.layer_index, info.value.timestep) == (1, 6)
    assert "layer 1" in str(info.value)
    cache.put(2, 6, np.zeros((3, 4)), np.zeros((3, 4)))
    assert cache.token_counts == {(1, 5): 2, (2, 6): 3}
    cache.evict_except(6)
    assert list(cache.keys()) == [(2, 6)]


def test_reference_mass_bounds(rng):
    st_ = _state(rng)
    cache = AttentionKVCache()
    cache.put(0, 7, st_.k.copy(), st_.v.copy())
    assert reference_mass(st_, cache.get(0, 7)) == pytest.approx(0.5, abs=1e-12)
    cache2 = AttentionKVCache()
    cache2.put(0, 7, np.zeros((0, 4)), np.zeros((0, 4)))
    assert reference_mass(st_, cache2.get(0, 7)) == 0.0


def test_target_layers_and_unknown_block(toy):
    assert [l.block for l in target_layers(toy, PersonalizationConfig())] == ["Up-2", "Up-3", "Up-4"]
    with pytest.raises(ConfigError):
        target_layers(toy, PersonalizationConfig(("Up-9",)))


def _reference(toy, sched, rng):
    cond = toy.encode_text("a man in a blue suit")
    traj = invert_latent(rng.normal(size=(12, 8, 8)) * 0.3, cond, toy, sched)
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[1:7, 2:5] = 1
    return traj, build_pyramid(mask, [(8, 8), (2, 2), (4, 4)])


def test_extract_reference_kv_token_counts(toy, rng):
    sched = make_schedule(5)
    traj, pyr = _reference(toy, sched, rng)
    counter = CallCounter(toy)
    cache = extract_reference_kv(traj, pyr, counter, sched, PersonalizationConfig())
    assert len(counter.calls) == 5
    counts = mask_token_counts(pyr, target_layers(toy, PersonalizationConfig()))
    for (layer, t), n in cache.token_counts.items():
        assert n == counts[layer]
    assert {t for _, t in cache.keys()} == {sched.model_timestep(i) for i in range(1, 6)}


def test_degenerate_mask_raises(toy, rng):
    sched = make_schedule(3)
    traj, _ = _reference(toy, sched, rng)
    empty = build_pyramid(np.zeros((8, 8), dtype=np.uint8), [(2, 2), (4, 4)])
    with pytest.raises(DegenerateMaskError):
        ReferenceAttentionController(toy, sched, traj, empty, PersonalizationConfig())


def _generate(toy, sched, ctl, zT):
    gcfg = GuidanceConfig(7.5, toy.encode_text("a person"), toy.null_condition())
    return sample(zT, gcfg, toy, sched, attn_ctl=ctl)


def test_lockstep_equals_precompute(toy, rng):
    sched = make_schedule(6)
    traj, pyr = _reference(toy, sched, rng)
    zT = traj.at(6)
    a = _generate(toy, sched, ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig()), zT)
    b = _generate(toy, sched, ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig(),
                                                           mode="precompute"), zT)
    np.testing.assert_array_equal(a.final.data, b.final.data)


def test_lockstep_holds_one_timestep(toy, rng):
    sched = make_schedule(4)
    traj, pyr = _reference(toy, sched, rng)
    ctl = ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig())
    ctl.prepare(4)
    ctl.prepare(3)
    assert {t for _, t in ctl.cache.keys()} == {sched.model_timestep(3)}
    assert ctl.reference_calls == 2
    with pytest.raises(CacheMissError):
        ctl.prepare(1)


def test_unconditional_branch_untouched(toy, rng):
    sched = make_schedule(4)
    traj, pyr = _reference(toy, sched, rng)
    ctl = ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig())
    z = rng.normal(size=(12, 8, 8))
    ctl.prepare(4)
    t = sched.model_timestep(4)
    null, cond = toy.null_condition(), toy.encode_text("a person")
    np.testing.assert_array_equal(toy.predict(z, t, null, hooks=ctl.hooks()), toy.predict(z, t, null))
    assert not np.array_equal(toy.predict(z, t, cond, hooks=ctl.hooks()), toy.predict(z, t, cond))


def test_both_branches_changes_unconditional(toy, rng):
    sched = make_schedule(4)
    traj, pyr = _reference(toy, sched, rng)
    ctl = ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig(conditional_branch_only=False))
    ctl.prepare(4)
    z = rng.normal(size=(12, 8, 8))
    t = sched.model_timestep(4)
    null = toy.null_condition()
    assert not np.array_equal(toy.predict(z, t, null, hooks=ctl.hooks()), toy.predict(z, t, null))


def test_disabled_controller_has_no_hooks(toy, rng):
    sched = make_schedule(3)
    traj, pyr = _reference(toy, sched, rng)
    ctl = ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig(enabled=False))
    assert ctl.hooks() == {}


def test_attention_dump_rows(tmp_path, toy, rng):
    sched = make_schedule(3)
    traj, pyr = _reference(toy, sched, rng)
    dump = AttentionDump()
    ctl = ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig(), dump=dump)
    _generate(toy, sched, ctl, traj.at(3))
    # three target layers, conditional branch only, three steps
    assert len(dump.rows) == 9
    assert all(0.0 < r[3] < 1.0 and r[2] == "conditional" for r in dump.rows)
    dump.write_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "timestep,layer,branch,reference_mass" and len(lines) == 10


def test_unknown_mode(toy, rng):
    sched = make_schedule(2)
    traj, pyr = _reference(toy, sched, rng)
    with pytest.raises(ConfigError):
        ReferenceAttentionController(toy, sched, traj, pyr, PersonalizationConfig(), mode="eager")
