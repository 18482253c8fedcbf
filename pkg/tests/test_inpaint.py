import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from surgsynth.dataset_io import SampleRecord, make_prompt
from surgsynth.diffusion import checkpoint as ckpt
from surgsynth.diffusion.core import SamplerConfig, forward_diffuse, to_model_space
from surgsynth.errors import EmptyClassError, RegistryLookupError, ValidationError
from surgsynth.inpaint import (
    InpaintContext,
    ModelRegistry,
    SSIConfig,
    inpaint_sample,
    masked_blend,
    organ_defaults,
    sample_inpaint,
    train_ssi,
)

SC = SamplerConfig(n_steps=4, guidance_scale=1.0)


# ---------------------------------------------------------------------------
# masked_blend


def test_blend_identity_cases():
    x_t, x0 = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(masked_blend(x_t, x0, torch.ones(2, 1, 4, 4)), x_t)
    assert torch.equal(masked_blend(x_t, x0, torch.zeros(2, 1, 4, 4)), x0)


def test_blend_checkerboard_matches_select_oracle():
    x_t, x0 = torch.randn(1, 3, 6, 6), torch.randn(1, 3, 6, 6)
    m = torch.from_numpy((np.indices((6, 6)).sum(0) % 2).astype(np.float32))[None, None]
    out = masked_blend(x_t, x0, m)
    for y in range(6):
        for x in range(6):
            src = x_t if m[0, 0, y, x] == 1 else x0
            assert torch.equal(out[0, :, y, x], src[0, :, y, x])


def test_blend_idempotent_and_validates():
    x_t, x0 = torch.randn(1, 3, 5, 5), torch.randn(1, 3, 5, 5)
    m = (torch.rand(1, 1, 5, 5) > 0.5).float()
    once = masked_blend(x_t, x0, m)
    assert torch.equal(masked_blend(once, x0, m), once)
    with pytest.raises(ValidationError):
        masked_blend(x_t, x0, torch.full((1, 1, 5, 5), 0.5))
    with pytest.raises(ValidationError):
        masked_blend(x_t, x0[..., :4], m)


def test_organ_defaults():
    assert organ_defaults("abdominal wall") == ("v", 0.6)
    assert organ_defaults("liver") == ("epsilon", 6.0)
    assert organ_defaults("spleen")[0] == "epsilon"


# ---------------------------------------------------------------------------
# context


def test_context_resamples_mask_nearest():
    src = np.zeros((16, 16, 3), np.uint8)
    big = np.zeros((32, 32), np.uint8)
    big[:16, :16] = 1
    ctx = InpaintContext.build(src, big, "p", 1, 16)
    assert ctx.mask.shape == (1, 1, 16, 16)
    assert ctx.mask.sum() == 64 and set(ctx.mask.unique().tolist()) <= {0.0, 1.0}
    with pytest.raises(ValidationError):
        InpaintContext.build(np.zeros((8, 8, 3), np.uint8), big, "p", 1, 16)
    with pytest.raises(ValidationError):
        InpaintContext.build(src, np.full((16, 16), 2, np.uint8), "p", 1, 16)


# ---------------------------------------------------------------------------
# training and registry


def test_train_ssi_deterministic(toy16, tmp_path):
    records, cm = toy16
    cfg = SSIConfig(steps=5, lr=1e-3, batch=4, seed=3, channel_mults=(1, 2))
    a = train_ssi(1, records, cm, cfg)
    b = train_ssi(1, records, cm, cfg)
    assert a.losses == b.losses
    assert ckpt.state_sha256(a.denoiser.net.state_dict()) == ckpt.state_sha256(b.denoiser.net.state_dict())
    # abdominal wall defaults to v-prediction, the others to epsilon
    assert a.denoiser.prediction_type == "v"
    assert a.denoiser.prompts[1] == make_prompt(1, cm, "organ")
    assert a.denoiser.descriptor["in_channels"] == 7


def test_train_ssi_empty_class(toy16):
    records, cm = toy16
    no_two = [SampleRecord(r.image, np.where(r.label_map == 2, 0, r.label_map).astype(np.uint8), r.split, r.id) for r in records]
    with pytest.raises(EmptyClassError):
        train_ssi(2, no_two, cm, SSIConfig(steps=1))


def test_registry_round_trip(tiny_registry, toy16):
    _, cm = toy16
    for cid in cm.class_ids:
        assert tiny_registry.header(cid)["class_id"] == cid
        den, sched, header = tiny_registry.load(cid)
        assert header["kind"] == "denoiser" and sched.T == 1000
    assert tiny_registry.scene not in tiny_registry.classes.values()
    with pytest.raises(RegistryLookupError):
        tiny_registry.path(42)


def test_registry_rejects_mismatched_key(tiny_registry, tmp_path):
    reg = ModelRegistry(tmp_path)
    src = tiny_registry.path(1)
    (tmp_path / "m.ckpt").write_bytes(src.read_bytes())
    with pytest.raises(ValidationError):
        reg.register(2, "m.ckpt")
    reg.register(1, "m.ckpt")
    with pytest.raises(ValidationError):
        reg.register_scene("m.ckpt")
    assert ModelRegistry(tmp_path).classes == {1: "m.ckpt"}


# ---------------------------------------------------------------------------
# sampling


def _test_item(toy16, cid):
    records, _ = toy16
    rec = next(r for r in records if r.split == "test" and (r.label_map == cid).any())
    return rec.image, (rec.label_map == cid).astype(np.uint8)


def test_zero_mask_returns_source(tiny_registry, toy16):
    img, _ = _test_item(toy16, 1)
    out = sample_inpaint(tiny_registry, 1, img, np.zeros(img.shape[:2], np.uint8), SC, seed=0)
    np.testing.assert_array_equal(out, img)


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3]), st.sampled_from(["clean", "noised"]))
def test_outside_mask_bit_exact(tiny_registry, toy16, seed, cid, mode):
    rng = np.random.default_rng(seed)
    records, _ = toy16
    img = records[int(rng.integers(len(records)))].image
    m = (rng.random((16, 16)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
    out = sample_inpaint(tiny_registry, cid, img, m, SC, seed=seed, context_noise=mode)
    keep = m == 0
    np.testing.assert_array_equal(out[keep], img[keep])


def test_sampling_deterministic_and_seeded(tiny_registry, toy16):
    img, m = _test_item(toy16, 2)
    a = sample_inpaint(tiny_registry, 2, img, m, SC, seed=5)
    b = sample_inpaint(tiny_registry, 2, img, m, SC, seed=5)
    c = sample_inpaint(tiny_registry, 2, img, m, SC, seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_equals_single(tiny_registry, toy16):
    img, m = _test_item(toy16, 3)
    single = [sample_inpaint(tiny_registry, 3, img, m, SC, seed=s) for s in (1, 2)]
    batch = sample_inpaint(tiny_registry, 3, np.stack([img, img]), np.stack([m, m]), SC, seed=[1, 2])
    for s, b in zip(single, batch):
        assert np.abs(s.astype(int) - b.astype(int)).max() <= 1


def test_intermediate_states_track_noised_source(tiny_registry, toy16):
    img, m = _test_item(toy16, 1)
    den, sched, _ = tiny_registry.load(1)
    ctx = InpaintContext.build(img, m, den.prompts[1], 1, 16)
    trace = []
    inpaint_sample(den, sched, ctx, SC, [4], context_noise="noised", trace=trace)
    outside = 1 - ctx.mask
    assert [t for t, _, _ in trace][-1] == -1
    for t, state, ref in trace:
        assert torch.equal(state * outside, ref * outside)
        if t >= 0:
            assert not torch.equal(ref, ctx.x0_ref)
    x0 = to_model_space(img)
    assert torch.equal(trace[-1][2], x0)


def test_noised_reference_is_forward_process(tiny_registry, toy16):
    img, m = _test_item(toy16, 1)
    den, sched, _ = tiny_registry.load(1)
    ctx = InpaintContext.build(img, m, den.prompts[1], 1, 16)
    trace = []
    inpaint_sample(den, sched, ctx, SC, [4], context_noise="noised", trace=trace)
    t, _, ref = trace[0]
    resid = ref - forward_diffuse(ctx.x0_ref, t, torch.zeros_like(ref), sched)
    z = resid / float(np.sqrt(1 - sched.alpha_bars[t]))
    assert abs(float(z.mean())) < 0.2 and 0.8 < float(z.std()) < 1.2


def test_sampling_errors(tiny_registry, toy16):
    img, m = _test_item(toy16, 1)
    with pytest.raises(RegistryLookupError):
        sample_inpaint(tiny_registry, 9, img, m, SC, seed=0)
    with pytest.raises(ValidationError):
        sample_inpaint(tiny_registry, 1, np.stack([img, img]), np.stack([m, m]), SC, seed=[1])
    with pytest.raises(ValidationError):
        sample_inpaint(tiny_registry, 1, img, m, SC, seed=0, context_noise="dusty")
