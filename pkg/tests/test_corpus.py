import random
import struct

import numpy as np
import pytest

from zsunits import corpus
from zsunits.corpus import ModelBundle
from zsunits.dsp import AudioBuffer, StftConfig


def test_wav_round_trip_is_16bit_quantization(tmp_path):
    rng = np.random.default_rng(0)
    audio = AudioBuffer(rng.uniform(-1, 1, 16000), 16000)
    path = tmp_path / "a.wav"
    corpus.save_wav(path, audio)
    back = corpus.load_wav(path)
    assert back.samples.size == 16000
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - audio.samples)) <= 2**-15
    np.testing.assert_array_equal(back.samples, corpus.quantize_pcm16(audio.samples) / 32768.0)


def test_truncated_wav_is_parse_error(tmp_path):
    path = tmp_path / "t.wav"
    corpus.save_wav(path, AudioBuffer(np.zeros(1000), 16000))
    data = path.read_bytes()
    path.write_bytes(data[:500])
    with pytest.raises(corpus.WavFormatError) as info:
        corpus.load_wav(path)
    assert info.value.offset == 44  # start of the data chunk body
    path.write_bytes(data[:20])
    with pytest.raises(corpus.WavFormatError):
        corpus.load_wav(path)
    path.write_bytes(b"JUNK" + data[4:])
    with pytest.raises(corpus.WavFormatError, match="offset 0"):
        corpus.load_wav(path)


def test_unsupported_codec(tmp_path):
    path = tmp_path / "f.wav"
    corpus.save_wav(path, AudioBuffer(np.zeros(10), 16000))
    data = bytearray(path.read_bytes())
    struct.pack_into("<H", data, 20, 3)  # IEEE float tag
    path.write_bytes(bytes(data))
    with pytest.raises(corpus.UnsupportedFormatError):
        corpus.load_wav(path)


def test_stereo_downmix_warns(tmp_path):
    pcm = np.array([[1000, 3000], [-2000, 0]], dtype="<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16, 1, 2, 16000, 64000, 4, 16, b"data", len(pcm)
    )
    path = tmp_path / "s.wav"
    path.write_bytes(header + pcm)
    with pytest.warns(UserWarning, match="downmixed"):
        audio = corpus.load_wav(path)
    np.testing.assert_allclose(audio.samples, [2000 / 32768, -1000 / 32768])


def test_real_recording_loads(arctic_wav):
    audio = corpus.load_wav(arctic_wav)
    assert audio.sample_rate == 16000
    assert audio.samples.size == 64000


def _write_manifest(tmp_path, rows):
    for name in ("a.wav", "b.wav", "c.wav"):
        corpus.save_wav(tmp_path / name, AudioBuffer(np.zeros(1600), 16000))
    text = "utterance_id\taudio_path\tspeaker_id\n" + "".join("\t".join(r) + "\n" for r in rows)
    path = tmp_path / "manifest.tsv"
    path.write_text(text)
    return path


def test_manifest_well_formed(tmp_path):
    path = _write_manifest(tmp_path, [("u1", "a.wav", "s1"), ("u2", "b.wav", "s1"), ("u3", "c.wav", "s2")])
    manifest, issues = corpus.validate_manifest(path)
    assert len(manifest) == 3 and issues == []
    assert manifest.speakers() == ["s1", "s2"]
    assert manifest.total_duration() == pytest.approx(0.3)


def test_manifest_duplicate_id_names_both_lines(tmp_path):
    path = _write_manifest(tmp_path, [("u1", "a.wav", "s1"), ("u2", "b.wav", "s1"), ("u1", "c.wav", "s2")])
    _, issues = corpus.validate_manifest(path)
    assert len(issues) == 1
    assert issues[0].kind == "duplicate-id" and issues[0].subject == "u1"
    assert issues[0].lines == (2, 4)
    assert "u1" in str(issues[0]) and "2" in str(issues[0]) and "4" in str(issues[0])


def test_manifest_collects_all_errors(tmp_path):
    path = _write_manifest(
        tmp_path, [("u1", "missing.wav", "s1"), ("u2", "b.wav", ""), ("u3", "c.wav", "s2"), ("u3", "a.wav", "s2")]
    )
    _, issues = corpus.validate_manifest(path)
    kinds = sorted(i.kind for i in issues)
    assert kinds == ["duplicate-id", "missing-file", "missing-speaker"]
    missing = next(i for i in issues if i.kind == "missing-file")
    assert missing.subject.endswith("missing.wav")
    with pytest.raises(corpus.ManifestError):
        corpus.load_manifest(path)


def test_manifest_validation_order_independent(tmp_path):
    rows = [("u1", "missing.wav", "s1"), ("u2", "b.wav", ""), ("u3", "c.wav", "s2"), ("u3", "a.wav", "s2"), ("u4", "a.wav", "s3")]
    path = _write_manifest(tmp_path, rows)
    _, reference = corpus.validate_manifest(path)
    rng = random.Random(0)
    for _ in range(5):
        rng.shuffle(rows)
        path = _write_manifest(tmp_path, rows)
        _, issues = corpus.validate_manifest(path)
        assert set(issues) == set(reference)


def test_bundle_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "d": rng.normal(size=5),
        "idx": np.arange(7, dtype=np.int64),
        "scalar": np.float32(3.5).reshape(()),
        "nan": np.array([np.nan, -0.0, np.inf], dtype=np.float32),
    }
    b = ModelBundle("vqvae", {"K": 64, "gamma": 0.25, "nested": {"a": [1, 2]}}, tensors)
    corpus.save_bundle(b, tmp_path / "m.zsu")
    back = corpus.load_bundle(tmp_path / "m.zsu")
    assert back.kind == "vqvae" and back.hparams == b.hparams
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_bundle_payload_corruption_detected(tmp_path):
    b = ModelBundle("kmeans", {}, {"c": np.ones((4, 4), np.float32)})
    path = tmp_path / "m.zsu"
    corpus.save_bundle(b, path)
    data = bytearray(path.read_bytes())
    data[-3] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(corpus.ChecksumError):
        corpus.load_bundle(path)


def test_bundle_future_version_rejected(tmp_path):
    path = tmp_path / "m.zsu"
    corpus.save_bundle(ModelBundle("x"), path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, 4, 99)
    path.write_bytes(bytes(data))
    with pytest.raises(corpus.BundleVersionError):
        corpus.load_bundle(path)


def test_empty_bundle_is_valid(tmp_path):
    corpus.save_bundle(ModelBundle("empty"), tmp_path / "e.zsu")
    back = corpus.load_bundle(tmp_path / "e.zsu")
    assert back.kind == "empty" and back.tensors == {}


def test_crc64_check_value():
    assert corpus._crc64(b"123456789") == 0x62EC59E3F1A4F00A


def test_feature_cache_reuses_bundle(tmp_path):
    rng = np.random.default_rng(0)
    corpus.save_wav(tmp_path / "a.wav", AudioBuffer(rng.uniform(-0.3, 0.3, 4000), 16000))
    cfg = StftConfig.from_ms(16000)
    cache = tmp_path / "cache"
    first = corpus.cached_features(tmp_path / "a.wav", "mfcc39", cfg, cache)
    assert len(list(cache.iterdir())) == 1
    second = corpus.cached_features(tmp_path / "a.wav", "mfcc39", cfg, cache)
    np.testing.assert_array_equal(first.frames, second.frames)
