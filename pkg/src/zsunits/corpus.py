"""WAV ingest, dataset manifests and the ``ZSU1`` named-tensor container.

Bundle byte layout (all integers little-endian)::

    magic      4 bytes   b"ZSU1"
    version    u32       currently 1
    header_len u32       length of the UTF-8 JSON header that follows
    header     JSON      {"kind": str, "hparams": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    crc        u64       CRC-64/WE of the payload
    payload    bytes     tensor data, concatenated, little-endian

The header is plain JSON so loading never evaluates stored content.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import crcmod.predefined
import numpy as np

from .dsp import DEFAULT_SAMPLE_RATE, AudioBuffer

MAGIC = b"ZSU1"
VERSION = 1
_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")

DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE data; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


class BundleError(ValueError):
    pass


class ChecksumError(BundleError):
    pass


class BundleVersionError(BundleError):
    pass


# -- WAV ----------------------------------------------------------------------

def _parse_wav(buf):
    if len(buf) < 12:
        raise WavFormatError("file too short for a RIFF header", len(buf))
    if buf[:4] != b"RIFF":
        raise WavFormatError("missing RIFF tag", 0)
    if buf[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    data = None
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise WavFormatError("truncated chunk header", pos)
        tag = buf[pos : pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if tag == b"fmt ":
            if size < 16 or body + 16 > len(buf):
                raise WavFormatError("truncated fmt chunk", body)
            fmt = struct.unpack_from("<HHIIHH", buf, body)
            if fmt[0] == 0xFFFE and size >= 40 and body + 26 <= len(buf):
                # WAVE_FORMAT_EXTENSIBLE: real codec in the sub-format GUID
                (sub,) = struct.unpack_from("<H", buf, body + 24)
                fmt = (sub,) + fmt[1:]
        elif tag == b"data":
            if body + size > len(buf):
                raise WavFormatError(f"data chunk declares {size} bytes, only {len(buf) - body} present", body)
            data = (body, size)
        pos = body + size + (size & 1)
        if data is not None and fmt is not None:
            break
    if fmt is None:
        raise WavFormatError("no fmt chunk", pos)
    if data is None:
        raise WavFormatError("no data chunk", pos)
    return fmt, data


def load_wav(path, target_rate=DEFAULT_SAMPLE_RATE):
    """Read 16-bit PCM WAV into [-1, 1] floats; stereo is averaged, rate resampled.

    Pass ``target_rate=None`` to keep the file's native rate.
    """
    buf = Path(path).read_bytes()
    (codec, channels, rate, _, _, bits), (start, size) = _parse_wav(buf)
    if codec != 1:
        raise UnsupportedFormatError(f"{path}: codec {codec} is not integer PCM")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: {bits}-bit samples; only 16-bit PCM is supported")
    if channels < 1:
        raise WavFormatError("zero channels", 22)
    n = size // (2 * channels)
    pcm = np.frombuffer(buf, dtype="<i2", count=n * channels, offset=start).reshape(n, channels)
    samples = pcm.astype(np.float64) / 32768.0
    if channels > 1:
        warnings.warn(f"{path}: {channels} channels downmixed to mono", UserWarning)
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]
    audio = AudioBuffer(samples, rate)
    if target_rate is not None and rate != target_rate:
        audio = audio.resampled(target_rate)
    return audio


def quantize_pcm16(samples):
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path, audio: AudioBuffer):
    pcm = quantize_pcm16(audio.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        audio.sample_rate,
        audio.sample_rate * 2,
        2,
        16,
        b"data",
        len(pcm),
    )
    _atomic_write(path, header + pcm)


def _atomic_write(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- manifests ----------------------------------------------------------------

MANIFEST_COLUMNS = ("utterance_id", "audio_path", "speaker_id")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: Path
    speaker_id: str
    duration: float | None = None


@dataclass(frozen=True)
class ManifestIssue:
    """A validation problem. Equality ignores line numbers so issue sets do not depend on row order."""

    kind: str
    subject: str
    lines: tuple = field(default=(), compare=False)

    def __str__(self):
        where = f" (lines {', '.join(map(str, self.lines))})" if self.lines else ""
        return f"{self.kind}: {self.subject}{where}"


@dataclass
class Manifest:
    entries: list
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def speakers(self):
        return sorted({e.speaker_id for e in self.entries})

    def total_duration(self):
        total = 0.0
        for e in self.entries:
            total += e.duration if e.duration is not None else load_wav(e.audio_path, None).duration
        return total


class ManifestError(ValueError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(map(str, self.issues)))


def validate_manifest(path, sample_rate=DEFAULT_SAMPLE_RATE):
    """Parse a tab-separated manifest and check every row.

    Returns ``(manifest, issues)``; ``manifest`` holds the rows that passed.
    Audio paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    issues = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header[:3]) != MANIFEST_COLUMNS:
            raise ManifestError([ManifestIssue("bad-header", "\t".join(header or []), (1,))])
        has_duration = len(header) > 3 and header[3].strip() == "duration"
        rows = [(i, row) for i, row in enumerate(reader, start=2) if any(c.strip() for c in row)]

    seen = {}
    for line, row in rows:
        uid = row[0].strip() if row else ""
        seen.setdefault(uid, []).append(line)
    duplicates = {uid for uid, lines in seen.items() if len(lines) > 1}
    for uid in sorted(duplicates):
        issues.append(ManifestIssue("duplicate-id", uid, tuple(seen[uid])))

    entries = []
    for line, row in rows:
        uid = row[0].strip()
        ok = uid not in duplicates
        if len(row) < 3 or not row[2].strip():
            issues.append(ManifestIssue("missing-speaker", uid, (line,)))
            ok = False
        if len(row) < 2 or not row[1].strip():
            issues.append(ManifestIssue("missing-path", uid, (line,)))
            continue
        audio = (base / row[1].strip()).resolve()
        if not audio.is_file():
            issues.append(ManifestIssue("missing-file", str(audio), (line,)))
            ok = False
        duration = None
        if has_duration and len(row) > 3 and row[3].strip():
            try:
                duration = float(row[3])
            except ValueError:
                issues.append(ManifestIssue("bad-duration", uid, (line,)))
                ok = False
        if ok:
            entries.append(ManifestEntry(uid, audio, row[2].strip(), duration))
    return Manifest(entries, sample_rate), issues


def load_manifest(path, sample_rate=DEFAULT_SAMPLE_RATE):
    manifest, issues = validate_manifest(path, sample_rate)
    if issues:
        raise ManifestError(issues)
    if not manifest.entries:
        raise ManifestError([ManifestIssue("empty-manifest", str(path))])
    return manifest


def write_manifest(path, entries):
    path = Path(path)
    lines = ["\t".join(MANIFEST_COLUMNS + ("duration",))]
    for e in entries:
        audio = os.path.relpath(e.audio_path, path.parent)
        dur = "" if e.duration is None else repr(float(e.duration))
        lines.append(f"{e.utterance_id}\t{audio}\t{e.speaker_id}\t{dur}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# -- bundles ------------------------------------------------------------------

@dataclass
class ModelBundle:
    kind: str
    hparams: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def prefixed(self, prefix):
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _encode_bundle(bundle):
    table = []
    chunks = []
    offset = 0
    for name, arr in bundle.tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise BundleError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {"kind": bundle.kind, "hparams": bundle.hparams, "tensors": table}, sort_keys=True
    ).encode("utf-8")
    return (
        MAGIC
        + struct.pack("<II", VERSION, len(header))
        + header
        + struct.pack("<Q", _crc64(payload))
        + payload
    )


def save_bundle(bundle: ModelBundle, path):
    _atomic_write(path, _encode_bundle(bundle))


def bundle_bytes(bundle: ModelBundle):
    return _encode_bundle(bundle)


def load_bundle(path) -> ModelBundle:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BundleError(f"{path}: not a ZSU1 bundle")
    if len(buf) < 12:
        raise BundleError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version > VERSION:
        raise BundleVersionError(f"{path}: bundle version {version} newer than supported {VERSION}")
    start = 12 + hlen
    if len(buf) < start + 8:
        raise BundleError(f"{path}: truncated header")
    header = json.loads(buf[12:start].decode("utf-8"))
    (crc,) = struct.unpack_from("<Q", buf, start)
    payload = memoryview(buf)[start + 8 :]
    if _crc64(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    tensors = {}
    for item in header["tensors"]:
        lo = item["offset"]
        raw = payload[lo : lo + item["nbytes"]]
        arr = np.frombuffer(raw, dtype=DTYPES[item["dtype"]]).reshape(item["shape"])
        tensors[item["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return ModelBundle(header["kind"], header["hparams"], tensors)


# -- feature cache ------------------------------------------------------------

def feature_cache_key(audio_path, kind, cfg):
    spec = json.dumps(
        {"kind": kind, "fft": cfg.fft_size, "win": cfg.window_length, "hop": cfg.hop_length, "window": cfg.window},
        sort_keys=True,
    )
    return hashlib.sha256((file_digest(audio_path) + spec).encode()).hexdigest()[:32]


def cached_features(audio_path, kind, cfg, cache_dir=None, sample_rate=DEFAULT_SAMPLE_RATE):
    """Extract features for one file, reusing a cached bundle when the audio and config match."""
    from .dsp import FeatureSequence, extract

    target = None
    if cache_dir is not None:
        target = Path(cache_dir) / f"{feature_cache_key(audio_path, kind, cfg)}.zsu"
        if target.is_file():
            b = load_bundle(target)
            return FeatureSequence(b["frames"], kind, b.hparams["frame_rate"])
    feats = extract(load_wav(audio_path, sample_rate), cfg, kind)
    if target is not None:
        save_bundle(
            ModelBundle("features", {"frame_rate": feats.frame_rate, "kind": kind}, {"frames": feats.frames}),
            target,
        )
    return feats
