import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectragen import autodiff as ad
from spectragen import diffusion as df
from spectragen.autodiff import RandomSource, Tensor
from spectragen.diffusion import (ConditionalDenoiser, ConditionStack, DenoiserConfig,
                                  IdentityCodec, SpaceToDepthCodec, TinyAutoencoder,
                                  ddim_step, forward_noise, make_schedule,
                                  timestep_subsequence)
from spectragen.synth import synthetic_rgb

import oracles


def tiny_config(**kw):
    base = dict(latent_channels=2, base_channels=4, levels=2, time_dim=8)
    base.update(kw)
    return DenoiserConfig(**base)


# ---------------------------------------------------------------------------
# schedule


def test_make_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [0.5])
    assert s.alpha_bar_at(0) == 1.0
    assert s.alpha_bar_at(1) == 0.5


def test_make_schedule_defaults_match_product_oracle():
    s = make_schedule()
    assert s.timesteps == 1000
    prod = 1.0
    for t in range(1, 1001):
        prod *= s.alpha[t - 1]
        assert abs(s.alpha_bar_at(t) - prod) < 1e-12
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0.0 < s.alpha_bar_at(1000) < 0.01


def test_make_schedule_constant_beta_closed_form():
    b = 0.03
    s = make_schedule(50, b, b)
    for t in (1, 10, 50):
        assert abs(s.alpha_bar_at(t) - (1 - b) ** t) < 1e-12


def test_make_schedule_rejects_bad_range():
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_schedule(0)


# ---------------------------------------------------------------------------
# forward noising


def test_forward_noise_t0_is_identity():
    s = make_schedule(10)
    z0 = RandomSource(0).normal((2, 4, 4))
    out = forward_noise(z0, 0, np.zeros_like(z0), s)
    np.testing.assert_array_equal(out, z0)


def test_forward_noise_zero_eps():
    s = make_schedule(10)
    z0 = RandomSource(1).normal((2, 4, 4))
    t = 7
    out = forward_noise(z0, t, np.zeros_like(z0), s)
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bar_at(t)) * z0, atol=1e-14)


def test_forward_noise_statistics():
    # 1e5 seeded draws: mean within 4 sigma/sqrt(n), variance within 2%.
    s = make_schedule(100)
    t = 60
    z0 = np.full((10, 10, 10), 0.4)
    n = 100_000
    rng = RandomSource(2)
    ab = s.alpha_bar_at(t)
    samples = np.empty((100, 1000))
    for i in range(100):
        eps = rng.normal((10, 10, 10))
        samples[i] = forward_noise(z0, t, eps, s).reshape(-1)
    flat = samples.reshape(-1)
    sigma = np.sqrt(1 - ab)
    assert abs(flat.mean() - np.sqrt(ab) * 0.4) < 4 * sigma / np.sqrt(n)
    assert abs(flat.var() - (1 - ab)) < 0.02 * (1 - ab)


def test_forward_noise_shape_mismatch():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros((2, 4, 4)), 5, np.zeros((2, 4, 5)), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros((2, 4, 4)), 11, np.zeros((2, 4, 4)), s)


# ---------------------------------------------------------------------------
# DDIM step


def test_ddim_inverts_forward_noise_to_zero():
    s = make_schedule(40)
    rng = RandomSource(3)
    z0 = rng.normal((3, 4, 4))
    for t in range(1, 41, 4):
        eps = rng.normal((3, 4, 4))
        z_t = forward_noise(z0, t, eps, s)
        back = ddim_step(z_t, eps, t, 0, s)
        np.testing.assert_allclose(back, z0, atol=1e-10)


def test_ddim_zero_inputs():
    s = make_schedule(10)
    out = ddim_step(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 5, 2, s)
    np.testing.assert_array_equal(out, np.zeros((1, 2, 2)))


def test_ddim_deterministic():
    s = make_schedule(10)
    rng = RandomSource(4)
    z = rng.normal((2, 4, 4))
    e = rng.normal((2, 4, 4))
    a = ddim_step(z, e, 8, 3, s)
    b = ddim_step(z, e, 8, 3, s)
    np.testing.assert_array_equal(a, b)


def test_ddim_requires_decreasing_t():
    s = make_schedule(10)
    z = np.zeros((1, 2, 2))
    with pytest.raises(ValueError):
        ddim_step(z, z, 3, 3, s)


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 5000), t=st.integers(1, 30))
def test_ddim_inversion_property(seed, t):
    s = make_schedule(30)
    rng = RandomSource(seed)
    z0 = rng.normal((2, 3, 3))
    eps = rng.normal((2, 3, 3))
    back = ddim_step(forward_noise(z0, t, eps, s), eps, t, 0, s)
    np.testing.assert_allclose(back, z0, atol=1e-10)


def test_timestep_subsequence():
    ts = timestep_subsequence(10, 10)
    np.testing.assert_array_equal(ts, np.arange(10, -1, -1))
    ts = timestep_subsequence(100, 4)
    assert ts[0] == 100 and ts[-1] == 0 and len(ts) == 5
    assert np.all(np.diff(ts) < 0)


# ---------------------------------------------------------------------------
# codecs


def test_identity_codec_round_trip():
    x = RandomSource(5).normal((3, 8, 8))
    c = IdentityCodec()
    np.testing.assert_array_equal(c.decode(c.encode(x)), x)


def test_space_to_depth_round_trip_bit_exact():
    x = RandomSource(6).normal((3, 8, 12))
    c = SpaceToDepthCodec(2)
    lat = c.encode(x)
    assert lat.shape == (12, 4, 6)
    np.testing.assert_array_equal(c.decode(lat), x)


def test_space_to_depth_latent_shape():
    c = SpaceToDepthCodec(4)
    assert c.latent_shape((3, 16, 16)) == (48, 4, 4)
    with pytest.raises(ValueError):
        c.encode(np.zeros((3, 9, 8)))


def test_tiny_autoencoder_trains():
    images = [synthetic_rgb(i, 8, 8) for i in range(4)]
    codec = TinyAutoencoder(3, 6, factor=2, seed=0)
    trace = codec.train(images, steps=150, lr=2e-2, seed=1)
    assert trace[-1] < 0.5 * trace[0]
    recon = codec.decode(codec.encode(images[0]))
    assert recon.shape == images[0].shape


# ---------------------------------------------------------------------------
# conditions


def test_condition_stack_validation():
    with pytest.raises(ValueError):
        ConditionStack({"bogus": np.zeros((1, 4, 4))})
    with pytest.raises(ValueError):
        ConditionStack({"hed": np.zeros((1, 4, 4)), "seg": np.zeros((1, 8, 8))})
    stack = ConditionStack({"hed": np.zeros((1, 4, 4))})
    assert not stack.is_empty()
    assert ConditionStack().is_empty()


def test_condition_proxies_shapes_and_ranges():
    img = synthetic_rgb(7, 16, 16)
    edge = df.edge_proxy(img)
    sketch = df.sketch_proxy(img)
    seg = df.segmentation_proxy(img)
    for cmap in (edge, sketch, seg):
        assert cmap.shape == (1, 16, 16)
        assert cmap.min() >= 0.0 and cmap.max() <= 1.0
    assert set(np.unique(sketch)) <= {0.0, 1.0}


def test_segmentation_proxy_labels_connected_regions():
    img = np.zeros((1, 4, 4))
    img[0, :, 2:] = 1.0
    seg = df.segmentation_proxy(img, levels=2)
    assert seg[0, 0, 0] == seg[0, 3, 1]
    assert seg[0, 0, 3] == seg[0, 3, 2]
    assert seg[0, 0, 0] != seg[0, 0, 3]


# ---------------------------------------------------------------------------
# denoiser + zero-convolution contract


def test_zero_conv_conditional_equals_unconditional_at_init():
    cfg = tiny_config(cond_slots=(("hed", 1), ("lowres", 3)), global_dim=5)
    model = ConditionalDenoiser(cfg, seed=8)
    z = RandomSource(9).normal((2, 8, 8))
    stack = ConditionStack(
        {"hed": np.abs(synthetic_rgb(10, 8, 8))[:1], "lowres": synthetic_rgb(11, 8, 8)},
        global_embedding=RandomSource(12).normal((5,)),
    )
    uncond = model.predict(z, 3, None)
    cond = model.predict(z, 3, stack)
    np.testing.assert_array_equal(cond, uncond)


def test_condition_features_exactly_zero_at_init():
    cfg = tiny_config(cond_slots=(("seg", 1),))
    model = ConditionalDenoiser(cfg, seed=13)
    stack = ConditionStack({"seg": np.ones((1, 8, 8))})
    level_feats, top = model.condition_features(stack, 8, 8)
    for f in list(level_feats) + [top]:
        np.testing.assert_array_equal(f.data, np.zeros_like(f.data))


def test_empty_condition_stack_runs_unconditionally():
    cfg = tiny_config(cond_slots=(("hed", 1),))
    model = ConditionalDenoiser(cfg, seed=14)
    z = RandomSource(15).normal((2, 8, 8))
    a = model.predict(z, 2, None)
    b = model.predict(z, 2, ConditionStack())
    np.testing.assert_array_equal(a, b)


def test_condition_channel_mismatch_rejected():
    cfg = tiny_config(cond_slots=(("hed", 1),))
    model = ConditionalDenoiser(cfg, seed=16)
    stack = ConditionStack({"hed": np.zeros((2, 8, 8))})
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 8, 8)), 1, stack)


def test_denoiser_rejects_bad_extents():
    model = ConditionalDenoiser(tiny_config(), seed=17)
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 7, 8)), 1, None)


def test_diffusion_loss_zero_for_perfect_model():
    cfg = tiny_config()
    model = ConditionalDenoiser(cfg, seed=18)
    s = make_schedule(10)
    rng = RandomSource(19)
    z0 = rng.normal((2, 8, 8))
    eps = rng.normal((2, 8, 8))

    class Exact:
        def forward(self, z_t, t, conditions=None):
            return Tensor(eps)

    loss = df.diffusion_loss(Exact(), s, z0, 4, eps)
    assert float(loss.data) == 0.0


def test_diffusion_loss_zero_model_gives_mean_square():
    s = make_schedule(10)
    rng = RandomSource(20)
    z0 = rng.normal((2, 8, 8))
    eps = rng.normal((2, 8, 8))

    class Zero:
        def forward(self, z_t, t, conditions=None):
            return Tensor(np.zeros_like(eps))

    loss = df.diffusion_loss(Zero(), s, z0, 4, eps)
    assert abs(float(loss.data) - np.mean(eps**2)) < 1e-12


def test_diffusion_loss_gradcheck():
    cfg = tiny_config(latent_channels=1, base_channels=3, levels=2, time_dim=6)
    model = ConditionalDenoiser(cfg, seed=21)
    params = model.parameters()
    init = RandomSource(22)
    for p in params:
        p.data = init.child(abs(hash(p.name)) % 2**31).normal(p.shape) * 0.3
    s = make_schedule(10)
    rng = RandomSource(23)
    z0 = rng.normal((1, 4, 4))
    eps = rng.normal((1, 4, 4))

    def forward():
        return df.diffusion_loss(model, s, z0, 5, eps)

    loss = forward()
    ad.backward(loss)
    oracles.gradcheck(forward, params, RandomSource(24), n_coords=20)


# ---------------------------------------------------------------------------
# sampling


def test_sample_eps_zero_matches_analytic_rollout():
    # Freshly initialized model has a zero head, so eps_hat = 0 throughout;
    # the chain then collapses to z0 = z_T / sqrt(alpha_bar_T).
    cfg = tiny_config(latent_channels=3)
    model = ConditionalDenoiser(cfg, seed=25)
    s = make_schedule(20)
    codec = IdentityCodec()
    out = df.sample(model, s, steps=5, conditions=None, codec=codec, seed=77,
                    image_shape=(3, 8, 8))
    z_t = RandomSource(77).normal((3, 8, 8))
    want = z_t / np.sqrt(s.alpha_bar_at(20))
    np.testing.assert_allclose(out, want, atol=1e-10)


def test_sample_deterministic():
    cfg = tiny_config()
    model = ConditionalDenoiser(cfg, seed=26)
    s = make_schedule(12)
    a = df.sample(model, s, 4, None, IdentityCodec(), seed=5, image_shape=(2, 8, 8))
    b = df.sample(model, s, 4, None, IdentityCodec(), seed=5, image_shape=(2, 8, 8))
    np.testing.assert_array_equal(a, b)


def test_sample_dense_schedule_runs_every_step():
    cfg = tiny_config()
    model = ConditionalDenoiser(cfg, seed=27)
    s = make_schedule(6)
    calls = []
    original = model.predict

    def spy(z, t, conditions=None):
        calls.append(t)
        return original(z, t, conditions)

    model.predict = spy
    df.sample(model, s, 6, None, IdentityCodec(), seed=1, image_shape=(2, 8, 8))
    assert calls == [6, 5, 4, 3, 2, 1]


# ---------------------------------------------------------------------------
# checkpoints


def test_diffusion_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(cond_slots=(("lowres", 3),))
    model = ConditionalDenoiser(cfg, seed=28)
    s = make_schedule(16)
    path = tmp_path / "diff.ckpt"
    df.save_diffusion(path, model, s, SpaceToDepthCodec(2))
    back, s2, codec = df.load_diffusion(path)
    assert back.config == cfg
    assert s2.timesteps == 16
    assert codec.kind == "space_to_depth" and codec.factor == 2
    z = RandomSource(29).normal((2, 8, 8))
    a = df.load_diffusion(path)[0].predict(z, 3)
    np.testing.assert_array_equal(back.predict(z, 3), a)
