import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsunits import grad as G
from zsunits import inverter as I
from zsunits.dsp import ConfigurationError, StftConfig
from zsunits.vq import CodeSequence


def small_config(**kw):
    base = dict(code_dim=4, time_reduction=2, multiscale_layers=2, scale_channels=3, hidden_channels=6,
                out_dim=9, disc_channels=(5, 4), beta=0.0)
    base.update(kw)
    return I.InverterConfig(**base)


def toy_pairs(n=5, seed=0, out_dim=9, code_dim=4, r=2):
    """Codes from a 3-symbol alphabet; each symbol owns a spectral shape."""
    rng = np.random.default_rng(seed)
    book = rng.normal(size=(3, code_dim))
    shapes = rng.uniform(0.1, 2.0, size=(3, out_dim))
    pairs = []
    for _ in range(n):
        idx = rng.integers(0, 3, size=rng.integers(8, 14))
        mag = np.repeat(shapes[idx], r, axis=0) * rng.uniform(0.9, 1.1, size=(len(idx) * r, out_dim))
        pairs.append((book[idx], mag))
    return pairs


def scalar(v):
    return G.tensor(np.asarray(v, dtype=float))


# -- upsampling ---------------------------------------------------------------

def test_upsample_duplicates():
    a, b = [1.0, 2.0], [3.0, 4.0]
    np.testing.assert_array_equal(I.upsample_codes([a, b], 2), [a, a, b, b])


def test_upsample_identity_and_default_ratio():
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(I.upsample_codes(x, 1), x)
    assert I.upsample_codes(x, 4).shape == (20, 3)


def test_upsample_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        I.upsample_codes(np.ones((2, 2)), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 20), st.integers(0, 1000))
def test_upsample_every_frame_is_its_source(r, t, seed):
    x = np.random.default_rng(seed).normal(size=(t, 2))
    up = I.upsample_codes(x, r)
    assert len(up) == r * t
    for i, row in enumerate(up):
        np.testing.assert_array_equal(row, x[i // r])


# -- generator ----------------------------------------------------------------

def test_default_output_has_1025_bins():
    inv = I.Inverter.create(I.InverterConfig(), seed=0)
    mag = I.predict_magnitude(inv, np.random.default_rng(1).normal(size=(6, 64)))
    assert mag.shape == (24, 1025)
    assert np.all(mag >= 0)


def test_time_length_preserved():
    gen = I.Code2Spec(small_config(), np.random.default_rng(0))
    for t in (1, 2, 7, 16):
        assert gen(G.tensor(np.zeros((1, 4, t), np.float32))).shape == (1, 9, t)


@pytest.mark.parametrize("training", [True, False])
def test_zero_input_gives_constant_output(training):
    gen = I.Code2Spec(small_config(), np.random.default_rng(0)).train(training)
    out = gen(G.tensor(np.zeros((2, 4, 11), np.float32))).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1], out.shape), atol=1e-7)


def test_linear_mode_is_nonnegative():
    gen = I.Code2Spec(small_config(output_mode="linear"), np.random.default_rng(0))
    out = gen(G.tensor(np.random.default_rng(1).normal(size=(2, 4, 10)).astype(np.float32))).data
    assert np.all(out >= 0)


def test_time_shift_equivariance():
    cfg = small_config()
    gen = I.Code2Spec(cfg, np.random.default_rng(0), dtype=np.float64).eval()
    x = np.random.default_rng(1).normal(size=(1, 4, 30))
    shifted = np.roll(x, 1, axis=2)
    a = gen(G.tensor(x)).data
    b = gen(G.tensor(shifted)).data
    halo = 2 * 3 + 1 + 1 + 1  # receptive-field radius plus the shifted frame
    np.testing.assert_allclose(b[:, :, halo:-halo], a[:, :, halo - 1:-halo - 1], atol=1e-12)


def test_input_dim_checked():
    gen = I.Code2Spec(small_config(), np.random.default_rng(0))
    with pytest.raises(I.InverterInputError):
        gen(G.tensor(np.zeros((1, 5, 3))))


# -- adversarial losses -------------------------------------------------------

def test_lsgan_examples():
    g = I.generator_loss(scalar([1.0]), "lsgan")
    d = I.discriminator_loss(scalar([1.0]), scalar([1.0]), "lsgan")
    assert float(g.data) == 0.0 and float(d.data) == 1.0
    assert float(I.discriminator_loss(scalar([1.0]), scalar([0.0]), "lsgan").data) == 0.0


def test_wgan_examples():
    assert float(I.discriminator_loss(scalar([0.3, -2.0]), scalar([0.3, -2.0]), "wgan").data) == 0.0
    assert float(I.generator_loss(scalar([0.5, 1.5]), "wgan").data) == -1.0


def test_unknown_gan_kind():
    with pytest.raises(ConfigurationError):
        I.generator_loss(scalar([1.0]), "hinge")
    with pytest.raises(ConfigurationError):
        small_config(gan_kind="hinge")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_gan_loss_properties(real, fake):
    n = min(len(real), len(fake))
    r, f = scalar(real[:n]), scalar(fake[:n])
    assert float(I.generator_loss(f, "lsgan").data) >= 0
    assert float(I.discriminator_loss(r, f, "lsgan").data) >= 0
    fwd = float(I.discriminator_loss(r, f, "wgan").data)
    back = float(I.discriminator_loss(f, r, "wgan").data)
    assert fwd == pytest.approx(-back, abs=1e-12)


def test_gan_losses_shape_check():
    cfg = small_config()
    disc = I.Discriminator(cfg, np.random.default_rng(0))
    with pytest.raises(I.InverterInputError):
        I.gan_losses(disc, G.tensor(np.zeros((1, 9, 8))), G.tensor(np.zeros((1, 9, 6))), "lsgan")


def test_discriminator_scores_one_per_example():
    cfg = small_config()
    disc = I.Discriminator(cfg, np.random.default_rng(0))
    assert disc(G.tensor(np.ones((3, 9, 16), np.float32))).shape == (3,)


def test_one_critic_step_lowers_its_loss():
    cfg = small_config()
    rng = np.random.default_rng(2)
    disc = I.Discriminator(cfg, rng, dtype=np.float64)
    real = G.tensor(rng.normal(size=(4, 9, 16)))
    fake = G.tensor(rng.normal(size=(4, 9, 16)) + 0.5)
    opt = G.Adam(dict(disc.named_parameters()), lr=1e-5)
    before = I.discriminator_loss(disc(real), disc(fake), "lsgan")
    before.backward()
    opt.step()
    after = I.discriminator_loss(disc(real), disc(fake), "lsgan")
    assert float(after.data) < float(before.data)


def test_composite_generator_loss_grad_check():
    cfg = small_config(beta=1.0, alpha=1.0)
    rng = np.random.default_rng(3)
    gen = I.Code2Spec(cfg, rng, dtype=np.float64)
    disc = I.Discriminator(cfg, rng, dtype=np.float64)
    x = rng.normal(size=(2, 4, 8))
    y = rng.normal(size=(2, 9, 8))
    mask = np.ones((2, 1, 8))
    mask[1, :, 6:] = 0.0
    # masked frames feed exact zeros to the critic; nonzero biases keep its
    # activations off the LeakyReLU kink so finite differences are valid
    for _, p in disc.named_parameters():
        if p.ndim == 1:
            p.data = rng.normal(scale=0.1, size=p.shape)

    def loss():
        y_hat = gen(G.tensor(x))
        return G.mse(y_hat, y, mask) * cfg.alpha + I.generator_loss(disc(y_hat * mask), "lsgan") * cfg.beta

    params = {f"gen.{k}": p for k, p in gen.named_parameters()}
    params.update({f"disc.{k}": p for k, p in disc.named_parameters()})
    report = G.grad_check(loss, params, tolerance=1e-4)
    assert report.passed, list(report.lines())


# -- training -----------------------------------------------------------------

def test_pure_mse_strictly_decreases():
    pairs = toy_pairs()
    res = I.train_inverter(pairs, small_config(beta=0.0), I.InverterTrainConfig(steps=50, batch_size=64, chunk_frames=16))
    mse = [h["mse"] for h in res.history]
    assert all(b < a for a, b in zip(mse, mse[1:])), mse
    assert all(h["d_loss"] == 0.0 for h in res.history)


def test_lsgan_critic_separates_toy_data():
    pairs = toy_pairs(seed=4)
    cfg = small_config(beta=1.0, disc_channels=(16, 8))
    res = I.train_inverter(pairs, cfg, I.InverterTrainConfig(steps=200, batch_size=8, chunk_frames=16, disc_lr=1e-3))
    assert min(h["d_loss"] for h in res.history) < 0.5


def test_wgan_clips_critic():
    cfg = small_config(beta=1.0, gan_kind="wgan")
    res = I.train_inverter(toy_pairs(), cfg, I.InverterTrainConfig(steps=5, chunk_frames=16))
    for p in res.inverter.discriminator.parameters():
        assert np.all(np.abs(p.data) <= cfg.clip)


def test_training_is_deterministic():
    cfg = small_config(beta=1.0)
    a = I.train_inverter(toy_pairs(), cfg, I.InverterTrainConfig(steps=5, chunk_frames=16, seed=3))
    b = I.train_inverter(toy_pairs(), cfg, I.InverterTrainConfig(steps=5, chunk_frames=16, seed=3))
    assert a.history == b.history
    sa, sb = a.inverter.generator.state_dict(), b.inverter.generator.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_training_rejects_mismatched_pairs():
    with pytest.raises(I.InverterInputError):
        I.train_inverter(toy_pairs(code_dim=5), small_config(), I.InverterTrainConfig(steps=1))


# -- synthesis ----------------------------------------------------------------

@pytest.fixture(scope="module")
def stft_inverter():
    cfg = small_config(out_dim=257, time_reduction=2)
    stft = StftConfig(fft_size=512, window_length=400, hop_length=160)
    return I.Inverter.create(cfg, seed=0, stft=stft, codebook=np.random.default_rng(1).normal(size=(3, 4)))


def test_synthesis_duration(stft_inverter):
    codes = CodeSequence([0, 1, 2, 1, 0], 2, stft_inverter.codebook)
    out = I.synthesize(codes, stft_inverter, iterations=5)
    t_s = 10
    assert out.magnitude.shape == (t_s, 257)
    expected = t_s * 160 / 16000
    assert abs(out.audio.duration - expected) <= 400 / 16000


def test_synthesis_bit_identical_for_fixed_seed(stft_inverter):
    a = I.synthesize(np.array([0, 2, 2, 1]), stft_inverter, iterations=5, seed=4)
    b = I.synthesize(np.array([0, 2, 2, 1]), stft_inverter, iterations=5, seed=4)
    assert a.audio.samples.tobytes() == b.audio.samples.tobytes()


def test_synthesis_rejects_mismatched_code_model(stft_inverter):
    with pytest.raises(ConfigurationError, match=r"r=4.*r=2"):
        I.synthesize(CodeSequence([0, 1], 4, stft_inverter.codebook), stft_inverter)
    with pytest.raises(ConfigurationError, match=r"D_e=6.*D_e=4"):
        I.synthesize(CodeSequence([0, 1], 2, np.zeros((2, 6))), stft_inverter)


def test_bundle_round_trip(stft_inverter):
    back = I.Inverter.from_bundle(stft_inverter.to_bundle())
    v = stft_inverter.codebook[[0, 1, 1]]
    np.testing.assert_array_equal(I.predict_magnitude(back, v), I.predict_magnitude(stft_inverter, v))
    assert back.stft == stft_inverter.stft


def test_matched_prediction_beats_mismatched():
    pairs = toy_pairs(n=5, seed=6)
    res = I.train_inverter(pairs, small_config(beta=1.0), I.InverterTrainConfig(steps=80, chunk_frames=16, batch_size=8))
    pred = I.predict_magnitude(res.inverter, pairs[0][0], len(pairs[0][1]))

    def dist(a, b):
        n = min(len(a), len(b))
        return float(np.mean((np.log(a[:n]) - np.log(b[:n])) ** 2))

    matched = dist(pred, pairs[0][1])
    assert all(matched < dist(pred, other) for _, other in pairs[1:])
