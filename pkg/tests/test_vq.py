import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsunits import grad as G
from zsunits import synthetic, vq
from zsunits.corpus import load_manifest


def tiny_config(**kw):
    base = dict(
        feature_dim=3, time_reduction=2, codebook_size=3, code_dim=2, speaker_dim=2, n_speakers=2,
        stem_channels=2, encoder_channels=(3,), decoder_channels=(3,),
    )
    base.update(kw)
    return vq.VqVaeConfig(**base)


def brute_quantize(latents, codebook):
    out = []
    for z in latents:
        dists = [float(np.sum((z - c) ** 2)) for c in codebook]
        out.append(min(range(len(codebook)), key=lambda j: (dists[j], j)))
    return out


@pytest.fixture(scope="module")
def tone_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tones")
    synthetic.make_tone_corpus(root, n_utterances=8, seed=3)
    return vq.dataset_from_manifest(load_manifest(root / "manifest.tsv"))


# -- quantize -----------------------------------------------------------------

def test_quantize_small_example():
    codes, vecs = vq.quantize([[0.2, 0.1]], [[0.0, 0.0], [1.0, 1.0]])
    assert codes.indices.tolist() == [0]
    np.testing.assert_array_equal(vecs, [[0.0, 0.0]])


def test_quantize_exact_code_has_zero_residual():
    book = np.random.default_rng(0).normal(size=(5, 3))
    _, vecs = vq.quantize(book[[3, 1]], book)
    np.testing.assert_array_equal(vecs, book[[3, 1]])


def test_quantize_tie_goes_to_lowest_index():
    codes, _ = vq.quantize([[0.5]], [[1.0], [0.0]])
    assert codes.indices.tolist() == [0]


def test_quantize_matches_exhaustive_scan():
    rng = np.random.default_rng(1)
    latents, book = rng.normal(size=(20, 4)), rng.normal(size=(16, 4))
    codes, _ = vq.quantize(latents, book)
    assert codes.indices.tolist() == brute_quantize(latents, book)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 10_000))
def test_quantize_oracle_property(n, k, seed):
    rng = np.random.default_rng(seed)
    book = rng.integers(-2, 3, size=(k, 2)).astype(float)  # small integers force ties
    latents = rng.integers(-2, 3, size=(n, 2)).astype(float) / 2
    assert vq.quantize(latents, book)[0].indices.tolist() == brute_quantize(latents, book)


def test_quantize_errors():
    with pytest.raises(vq.CodebookStateError):
        vq.quantize([[0.0]], np.zeros((0, 1)))
    with pytest.raises(vq.VqInputError):
        vq.quantize([[0.0, 1.0]], np.zeros((2, 3)))


def test_code_sequence_bounds():
    with pytest.raises(vq.VqInputError):
        vq.CodeSequence([0, 3], 1, np.zeros((3, 2)))


# -- shapes -------------------------------------------------------------------

def test_encoder_shape_default_config():
    model = vq.VqVae(vq.VqVaeConfig(), np.random.default_rng(0))
    z = vq.encode(model, np.random.default_rng(1).normal(size=(100, 39)))
    assert z.shape == (25, 64)


def test_decoder_input_channels_default():
    model = vq.VqVae(vq.VqVaeConfig(), np.random.default_rng(0))
    assert model.decoder.in_channels == 96


def test_encode_deterministic():
    model = vq.VqVae(tiny_config(), np.random.default_rng(0))
    x = np.random.default_rng(2).normal(size=(9, 3))
    assert vq.encode(model, x).tobytes() == vq.encode(model, x).tobytes()


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 40))
def test_decode_encode_frame_contract(r, t):
    cfg = tiny_config(time_reduction=r, encoder_channels=(3, 3, 3), decoder_channels=(3, 3, 3))
    model = vq.VqVae(cfg, np.random.default_rng(r))
    x = np.random.default_rng(t).normal(size=(t, 3))
    _, vecs = vq.encode_utterance(model, x)
    assert len(vecs) == -(-t // r)
    assert vq.decode(model, vecs, 0).shape == (r * -(-t // r), 3)


def test_speakers_change_reconstruction():
    model = vq.VqVae(tiny_config(), np.random.default_rng(0), speakers=["a", "b"])
    codes = np.random.default_rng(1).normal(size=(4, 2))
    assert not np.allclose(vq.decode(model, codes, "a"), vq.decode(model, codes, "b"))


def test_unknown_speaker_rejected():
    model = vq.VqVae(tiny_config(), np.random.default_rng(0), speakers=["a", "b"])
    with pytest.raises(vq.VqInputError):
        vq.decode(model, np.zeros((2, 2)), "c")
    with pytest.raises(vq.VqInputError):
        vq.decode(model, np.zeros((2, 2)), 2)


def test_encode_dimension_mismatch():
    model = vq.VqVae(tiny_config(), np.random.default_rng(0))
    with pytest.raises(vq.VqInputError):
        vq.encode(model, np.zeros((4, 5)))


def test_config_validation():
    with pytest.raises(vq.VqInputError):
        vq.VqVaeConfig(time_reduction=3)
    with pytest.raises(vq.VqInputError):
        vq.VqVaeConfig(gamma=0.0)
    with pytest.raises(vq.VqInputError):
        vq.VqVaeConfig(time_reduction=8, encoder_channels=(8, 8))


# -- loss ---------------------------------------------------------------------

def test_loss_zero_on_code_with_perfect_reconstruction():
    x = G.tensor(np.ones((1, 2, 3)))
    z = G.tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    terms = vq.vq_loss(x, G.tensor(x.data.copy()), z, G.tensor(z.data.copy()), 0.25)
    assert [float(t.data) for t in terms] == [0.0, 0.0, 0.0, 0.0]


def test_codebook_and_commitment_differ_by_gamma():
    rng = np.random.default_rng(3)
    z = G.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    e = G.tensor(rng.normal(size=(5, 4)), requires_grad=True)
    x = G.tensor(np.zeros((1, 1, 1)))
    _, _, cb, commit = vq.vq_loss(x, x, z, e, 0.25)
    assert float(commit.data) == pytest.approx(0.25 * float(cb.data), rel=1e-15)


def _toy_graph(gamma=0.25):
    """Two frames, two codes, a linear decoder."""
    z = G.tensor([[0.9, 0.2], [-0.1, 1.2]], requires_grad=True)
    book = G.tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)
    w = G.tensor([[0.5, -1.0], [2.0, 0.3]], requires_grad=True)
    x = np.array([[[0.3, 0.1], [0.2, -0.4]]])
    idx, _ = vq.quantize(z.data, book.data)
    e = G.take_rows(book, idx.indices)
    st_in = z + G.stop_gradient(e - z)
    st_in.retain_grad()
    x_hat = (st_in @ w).reshape(1, 2, 2)
    return z, book, w, x, e, st_in, x_hat, gamma


def test_straight_through_contract_on_toy_graph():
    z, book, w, x, e, st_in, x_hat, gamma = _toy_graph()
    total, recon, cb, commit = vq.vq_loss(x, x_hat, z, e, gamma)
    total.backward()
    commit_grad = 2 * gamma * (z.data - e.data) / z.data.size
    np.testing.assert_allclose(z.grad, st_in.grad + commit_grad, atol=1e-15)


def test_codebook_term_gives_no_encoder_gradient():
    z, book, w, x, e, st_in, x_hat, gamma = _toy_graph()
    _, _, cb, _ = vq.vq_loss(x, x_hat, z, e, gamma)
    cb.backward()
    assert z.grad is None or not np.any(z.grad)
    assert w.grad is None or not np.any(w.grad)
    np.testing.assert_allclose(book.grad, 2 * (book.data - z.data) / z.data.size, atol=1e-15)


def test_codebook_gradient_only_from_codebook_term():
    z, book, w, x, e, st_in, x_hat, gamma = _toy_graph()
    total, *_ = vq.vq_loss(x, x_hat, z, e, gamma)
    total.backward()
    total_grad = book.grad.copy()
    z, book, w, x, e, st_in, x_hat, gamma = _toy_graph()
    _, _, cb, _ = vq.vq_loss(x, x_hat, z, e, gamma)
    cb.backward()
    np.testing.assert_array_equal(total_grad, book.grad)


def test_stop_gradient_is_exactly_zero_on_toy_graph():
    z, book, w, x, e, st_in, x_hat, gamma = _toy_graph()
    (G.stop_gradient(z) * 3.0 + z * 0.0).sum().backward()
    np.testing.assert_array_equal(z.grad, np.zeros_like(z.data))


def test_full_loss_grad_check_on_tiny_model():
    cfg = tiny_config()
    model = vq.VqVae(cfg, np.random.default_rng(4), dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 3))
    spk = np.array([0, 1])
    mask = np.ones((2, 4))
    mask[1, 3] = 0.0

    def loss():
        out = model(x, spk)
        return vq.vq_loss(x, out.x_hat, out.latents, out.quantized, cfg.gamma, mask[:, :, None],
                          vq.latent_mask_from(mask, cfg.time_reduction))[0]

    surrogate = vq.surrogate_loss(model, x, spk, mask)
    assert float(surrogate().data) == pytest.approx(float(loss().data), rel=1e-12)
    report = G.grad_check(loss, dict(model.named_parameters()), tolerance=1e-4, surrogate=surrogate)
    assert report.passed, list(report.lines())


def test_perplexity_values():
    assert vq.perplexity([2, 2, 2], 4) == 1.0
    assert vq.perplexity([0, 1, 2, 3], 4) == pytest.approx(4.0)


# -- training -----------------------------------------------------------------

def test_chunks_are_padded_and_masked():
    x, s, m = vq.make_chunks([np.ones((5, 2)), np.ones((2, 2))], [0, 1], 4)
    assert x.shape == (3, 4, 2)
    assert m.tolist() == [[1, 1, 1, 1], [1, 0, 0, 0], [1, 1, 0, 0]]
    assert s.tolist() == [0, 0, 1]
    assert x[1, 1:].sum() == 0


def test_smoke_training_lowers_loss(tone_data):
    res = vq.train_vqvae(tone_data, vq.VqVaeConfig(codebook_size=64), vq.TrainConfig(steps=50))
    totals = np.array([h["total"] for h in res.history])
    assert totals[-1] < totals[0]
    avg = np.convolve(totals, np.ones(10) / 10, mode="valid")
    assert avg[-1] < avg[0]
    assert res.final_perplexity > 1.0


def test_resume_is_bit_identical(tone_data, tmp_path):
    cfg = tiny_config(feature_dim=39, codebook_size=8, n_speakers=1)
    ckpt = tmp_path / "ckpt.zsu"
    base = dict(batch_size=2, chunk_frames=16, dtype="float64", seed=7)
    full = vq.train_vqvae(tone_data, cfg, vq.TrainConfig(steps=3, **base))
    vq.train_vqvae(tone_data, cfg, vq.TrainConfig(steps=2, checkpoint_path=str(ckpt), **base))
    resumed = vq.train_vqvae(tone_data, cfg, vq.TrainConfig(steps=3, **base), resume=ckpt)
    assert resumed.history[0]["step"] == 2
    assert resumed.history[0]["total"] == full.history[2]["total"]
    a = full.model.state_dict()
    b = resumed.model.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_bundle_round_trip(tone_data):
    model = vq.VqVae(tiny_config(feature_dim=39), np.random.default_rng(0), speakers=["spk1", "spk2"])
    back = vq.VqVae.from_bundle(model.to_bundle())
    x = tone_data.frames[0]
    assert vq.encode(back, x).tobytes() == vq.encode(model, x).tobytes()
    assert back.speakers == ["spk1", "spk2"]


def test_training_rejects_wrong_feature_dim(tone_data):
    with pytest.raises(vq.VqInputError):
        vq.train_vqvae(tone_data, tiny_config(), vq.TrainConfig(steps=1))
