import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from surgsynth.diffusion import checkpoint as ckpt
from surgsynth.diffusion.core import (
    Condition,
    Denoiser,
    SamplerConfig,
    TrainConfig,
    cfg_predict,
    ddim_sample,
    draw_training_noise,
    eps_from_v,
    fit,
    forward_diffuse,
    sampling_timesteps,
    step_seed,
    to_model_space,
    to_uint8,
    training_loss,
    v_from_eps,
)
from surgsynth.diffusion.nets import TinyUNet
from surgsynth.diffusion.schedule import NoiseSchedule, build_schedule
from surgsynth.diffusion.store import load_denoiser, save_denoiser
from surgsynth.errors import RegistryLookupError, ValidationError

SCHED = build_schedule("linear", 1000, 1e-4, 0.02)


def tiny_denoiser(pred="epsilon", in_ch=3, seed=0):
    torch.manual_seed(seed)
    net = TinyUNet(in_ch, 3, 16, (1, 2), 2, 16)
    net.eval()
    return Denoiser(net, pred, ["", "an image of liver in toy"])


class Const:
    """Denoiser double returning a fixed tensor per prompt kind."""

    def __init__(self, cond_out, uncond_out, prediction_type="epsilon"):
        self.c, self.u = cond_out, uncond_out
        self.prediction_type = prediction_type

    def __call__(self, x_t, t, cond):
        p = cond.prompt
        null = p is None or (not isinstance(p, str) and all(q is None for q in p))
        return (self.u if null else self.c).expand_as(x_t).clone()


# ---------------------------------------------------------------------------
# schedule


def test_linear_schedule_values():
    assert SCHED.alpha_bars[0] == pytest.approx(0.9999, abs=1e-12)
    assert (np.diff(SCHED.alpha_bars) < 0).all()
    np.testing.assert_allclose(SCHED.alpha_bars, np.cumprod(1 - SCHED.betas), atol=1e-10)


@pytest.mark.parametrize("args", [("linear", 1), ("linear", 10, 0.1, 0.05), ("linear", 10, 0.0, 0.1), ("bogus", 10)])
def test_schedule_rejects_bad_args(args):
    with pytest.raises(ValidationError):
        build_schedule(*args)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["linear", "cosine"]),
    st.integers(2, 2000),
    st.floats(1e-5, 1e-2),
    st.floats(1.0, 50.0),
)
def test_schedule_invariants(kind, T, b0, ratio):
    s = build_schedule(kind, T, b0, min(b0 * ratio, 0.5))
    ab = s.alpha_bars
    assert 0 < ab[0] < 1 and (np.diff(ab) < 0).all() and (ab > 0).all()
    np.testing.assert_allclose(ab, np.cumprod(1 - s.betas), atol=1e-10)
    assert NoiseSchedule.from_dict(s.to_dict()).alpha_bars.tolist() == ab.tolist()


# ---------------------------------------------------------------------------
# forward process and parameterizations


def test_forward_identity_when_alpha_bar_one():
    s = NoiseSchedule.from_alpha_bars([1.0, 0.5])
    x0, z = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(forward_diffuse(x0, 0, z, s), x0)


def test_forward_hand_value():
    s = NoiseSchedule.from_alpha_bars([0.9, 0.25])
    out = forward_diffuse(torch.zeros(1, 3, 2, 2), 1, torch.ones(1, 3, 2, 2), s)
    torch.testing.assert_close(out, torch.full((1, 3, 2, 2), np.sqrt(0.75), dtype=torch.float32))


def test_forward_shape_and_range_errors():
    with pytest.raises(ValidationError):
        forward_diffuse(torch.zeros(1, 3, 2, 2), 0, torch.zeros(1, 3, 2, 3), SCHED)
    with pytest.raises(ValidationError):
        forward_diffuse(torch.zeros(1, 3, 2, 2), 1000, torch.zeros(1, 3, 2, 2), SCHED)


def test_forward_monte_carlo_moments():
    g = torch.Generator().manual_seed(0)
    x0 = torch.linspace(-1, 1, 8, dtype=torch.float64)
    for t in (0, 250, 500, 750, 999):
        z = torch.randn(10_000, 8, generator=g, dtype=torch.float64)
        xt = forward_diffuse(x0.expand(10_000, 8), t, z, SCHED)
        ab = SCHED.alpha_bars[t]
        sd = np.sqrt((1 - ab) / 10_000)
        assert (xt.mean(0) - np.sqrt(ab) * x0).abs().max() < 4 * sd
        assert ((xt.var(0) / (1 - ab)) - 1).abs().max() < 0.05


def test_v_limit_and_hand_values():
    s = NoiseSchedule.from_alpha_bars([1.0, 0.25])
    z = torch.randn(1, 3, 2, 2)
    assert torch.equal(v_from_eps(torch.randn(1, 3, 2, 2), z, 0, s), z)
    v = v_from_eps(torch.zeros(1, 3, 2, 2), torch.ones(1, 3, 2, 2), 1, s)
    torch.testing.assert_close(v, torch.full((1, 3, 2, 2), 0.5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 999), st.integers(0, 2**31))
def test_eps_v_round_trip(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(4, 3, 5, 5, generator=g, dtype=torch.float64)
    z = torch.randn(4, 3, 5, 5, generator=g, dtype=torch.float64)
    xt = forward_diffuse(x0, t, z, SCHED)
    eps, x0_back = eps_from_v(xt, v_from_eps(x0, z, t, SCHED), t, SCHED)
    assert (eps - z).abs().max() < 1e-6 and (x0_back - x0).abs().max() < 1e-6


def test_v_shape_mismatch():
    with pytest.raises(ValidationError):
        v_from_eps(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 1), 0, SCHED)
    with pytest.raises(ValidationError):
        eps_from_v(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 1), 0, SCHED)


# ---------------------------------------------------------------------------
# training loss


class Oracle:
    """Returns the exact training target (plus ``c``) for a known seed."""

    def __init__(self, prediction_type, seed, x0, c=0.0):
        self.prediction_type = prediction_type
        self.t, self.z, _ = draw_training_noise(x0.shape, SCHED.T, seed, 0.1)
        self.x0, self.c = x0, c

    def __call__(self, x_t, t, cond):
        target = self.z if self.prediction_type == "epsilon" else v_from_eps(self.x0, self.z, self.t, SCHED)
        return target + self.c


@pytest.mark.parametrize("pred", ["epsilon", "v"])
def test_training_loss_perfect_and_offset(pred):
    x0 = torch.rand(6, 3, 4, 4) * 2 - 1
    batch = {"x0": x0, "condition": Condition(prompt="p")}
    assert training_loss(Oracle(pred, 5, x0), batch, SCHED, 5).item() == 0.0
    assert training_loss(Oracle(pred, 5, x0, 0.3), batch, SCHED, 5).item() == pytest.approx(0.09, rel=1e-5)


def test_training_loss_deterministic_and_drops_prompts():
    den = tiny_denoiser()
    x0 = torch.rand(8, 3, 16, 16) * 2 - 1
    batch = {"x0": x0, "condition": Condition(prompt="an image of liver in toy")}
    a = training_loss(den, batch, SCHED, 11)
    b = training_loss(den, batch, SCHED, 11)
    assert torch.equal(a, b)
    seen = []

    class Spy(Const):
        def __call__(self, x_t, t, cond):
            seen.append(cond.prompt)
            return torch.zeros_like(x_t)

    training_loss(Spy(None, None), {"x0": torch.zeros(200, 1, 1, 1), "condition": Condition(prompt="p")}, SCHED, 3, p_uncond=0.5)
    frac = sum(p is None for p in seen[0]) / 200
    assert 0.35 < frac < 0.65
    with pytest.raises(ValidationError):
        training_loss(den, {"x0": x0[:0], "condition": Condition()}, SCHED, 0)


def test_masked_loss_ignores_outside():
    x0 = torch.zeros(2, 3, 4, 4)
    m = torch.zeros(2, 1, 4, 4)
    m[..., :2, :] = 1
    oracle = Oracle("epsilon", 1, x0)

    class WrongOutside:
        prediction_type = "epsilon"

        def __call__(self, x_t, t, cond):
            out = oracle(x_t, t, cond).clone()
            out[..., 2:, :] += 100.0
            return out

    assert training_loss(WrongOutside(), {"x0": x0, "condition": Condition()}, SCHED, 1, loss_mask=m).item() == 0.0


# ---------------------------------------------------------------------------
# denoiser wrapper and network


def test_denoiser_shapes_and_prompt_lookup():
    den = tiny_denoiser()
    x = torch.randn(3, 3, 16, 16)
    out = den(x, 10, Condition(prompt="an image of liver in toy"))
    assert out.shape == x.shape
    assert torch.equal(out, den(x, 10, Condition(prompt="an image of liver in toy")))
    with pytest.raises(RegistryLookupError):
        den(x, 10, Condition(prompt="an image of spleen in toy"))
    with pytest.raises(ValidationError):
        Denoiser(den.net, "x0")


def test_inpainting_denoiser_needs_mask():
    den = tiny_denoiser(in_ch=7)
    x = torch.randn(1, 3, 16, 16)
    with pytest.raises(ValidationError):
        den(x, 3, Condition())
    out = den(x, 3, Condition(mask=torch.ones(1, 1, 16, 16), masked_image=torch.zeros(1, 3, 16, 16)))
    assert out.shape == x.shape


# ---------------------------------------------------------------------------
# guidance


def test_cfg_special_cases():
    c, u = torch.full((1, 3, 1, 1), 2.0), torch.full((1, 3, 1, 1), -1.0)
    x = torch.zeros(1, 3, 1, 1)
    cond = Condition(prompt="p")
    assert torch.equal(cfg_predict(Const(c, u), x, 5, cond, 1.0, SCHED), c)
    assert torch.equal(cfg_predict(Const(c, u), x, 5, cond, 0.0, SCHED), u)
    torch.testing.assert_close(cfg_predict(Const(c, u), x, 5, cond, 3.0, SCHED), u + 3 * (c - u))
    for s in (0.0, 0.6, 5.5):
        assert torch.equal(cfg_predict(Const(c, c), x, 5, cond, s, SCHED), c)


def test_cfg_converts_v_to_eps():
    x = torch.randn(1, 3, 2, 2)
    v = torch.randn(1, 3, 2, 2)
    want, _ = eps_from_v(x, v, 100, SCHED)
    got = cfg_predict(Const(v, v, "v"), x, 100, Condition(prompt="p"), 1.0, SCHED)
    torch.testing.assert_close(got, want)


# ---------------------------------------------------------------------------
# sampling


def test_sampling_timesteps():
    ts = sampling_timesteps(999, 30)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 30
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(4, 30) == [4, 3, 2, 1, 0]


@pytest.mark.parametrize("kind", ["ddim", "fast_multistep"])
def test_sampler_deterministic_and_hook_neutral(kind):
    den = tiny_denoiser()
    x_T = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    cfg = SamplerConfig(n_steps=5, guidance_scale=2.0, scheduler_kind=kind)
    cond = Condition(prompt="an image of liver in toy")
    a = ddim_sample(den, x_T, cond, SCHED, cfg)
    b = ddim_sample(den, x_T, cond, SCHED, cfg)
    c = ddim_sample(den, x_T, cond, SCHED, cfg, per_step_hook=lambda x, t, i: x)
    assert torch.equal(a, b) and torch.equal(a, c)
    assert a.min() >= -1 and a.max() <= 1


def test_hook_sees_every_step():
    calls = []
    den = Const(torch.zeros(1), torch.zeros(1))
    ddim_sample(den, torch.zeros(1, 1, 1, 1), Condition(), SCHED, SamplerConfig(n_steps=4),
                per_step_hook=lambda x, t, i: calls.append((t, i)) or x)
    assert calls == [(666, 0), (333, 1), (0, 2), (-1, 3)]


class PointMass:
    prediction_type = "epsilon"

    def __init__(self, x_star, schedule):
        self.x_star, self.s = x_star, schedule

    def __call__(self, x_t, t, cond):
        ab = float(self.s.alpha_bars[int(t)])
        return (x_t - np.sqrt(ab) * self.x_star) / np.sqrt(1 - ab)


@pytest.mark.parametrize("kind", ["ddim", "fast_multistep"])
def test_point_mass_oracle(kind):
    s = build_schedule("linear", 200)
    x_star = 0.37
    x_T = torch.tensor([[[[1.3]]]], dtype=torch.float64)
    out = ddim_sample(PointMass(x_star, s), x_T, Condition(), s, SamplerConfig(n_steps=200, scheduler_kind=kind))
    assert abs(out.item() - x_star) < 1e-3


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(n_steps=0).validate(1000)
    with pytest.raises(ValidationError):
        SamplerConfig(n_steps=1001).validate(1000)
    with pytest.raises(ValidationError):
        SamplerConfig(guidance_scale=-1).validate(1000)
    with pytest.raises(ValidationError):
        SamplerConfig(scheduler_kind="euler").validate(1000)


# ---------------------------------------------------------------------------
# training loop, seeds, conversions


def test_fit_reduces_loss_and_is_deterministic():
    def run():
        torch.manual_seed(0)
        w = torch.nn.Parameter(torch.zeros(3))
        target = torch.tensor([1.0, -2.0, 0.5])
        hist = fit([w], lambda step: ((w - target) ** 2).sum(), TrainConfig(steps=200, lr=0.05, ema_decay=0.9))
        return w.detach().clone(), hist

    (w1, h1), (w2, h2) = run(), run()
    assert torch.equal(w1, w2) and h1 == h2
    assert h1[-1] < 0.01 * h1[0]


def test_step_seed_distinct():
    seeds = {step_seed(0, s, salt) for s in range(500) for salt in range(3)}
    assert len(seeds) == 1500


def test_uint8_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    np.testing.assert_array_equal(to_uint8(to_model_space(img)), img)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_and_header_only(tmp_path):
    den = tiny_denoiser("v", in_ch=7, seed=3)
    p = save_denoiser(tmp_path / "m.ckpt", den, SCHED, class_id=2, training_config={"steps": 5}, seed=9)
    header = ckpt.read_header(p)
    assert header["prediction_type"] == "v" and header["class_id"] == 2 and header["seed"] == 9
    assert header["schedule"] == SCHED.to_dict() and header["architecture"] == den.descriptor
    back, sched, _ = load_denoiser(p)
    assert ckpt.state_sha256(back.net.state_dict()) == ckpt.state_sha256(den.net.state_dict())
    assert back.prompts == den.prompts
    p2 = save_denoiser(tmp_path / "m2.ckpt", den, SCHED, class_id=2, training_config={"steps": 5}, seed=9)
    assert ckpt.file_sha256(p) == ckpt.file_sha256(p2)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValidationError):
        ckpt.read_header(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        ckpt.read_header(tmp_path / "y.ckpt")
    ckpt.save_checkpoint(tmp_path / "a.ckpt", {"kind": "other"}, {})
    with pytest.raises(ValidationError):
        load_denoiser(tmp_path / "a.ckpt")
