"""Synthetic multi-speaker "tone speech" for smoke tests and demos.

Each phone is a harmonic complex shaped by a phone-specific set of
resonances; each speaker has its own pitch and spectral tilt. Utterances
are random phone strings with short crossfades.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ManifestEntry, save_wav, write_manifest
from .dsp import AudioBuffer
from .metrics import AbxTriple

# resonance centres (Hz) per phone
PHONES = {
    "aa": (700, 1200, 2500),
    "iy": (300, 2300, 3000),
    "uw": (320, 900, 2300),
    "eh": (550, 1800, 2500),
    "ss": (4500, 5500, 6500),
    "mm": (250, 1000, 2200),
}


@dataclass(frozen=True)
class Speaker:
    name: str
    f0: float
    tilt: float


SPEAKERS = (Speaker("spk1", 110.0, 0.6), Speaker("spk2", 190.0, 1.6))


@dataclass(frozen=True)
class Segment:
    utterance_id: str
    phone: str
    start: int
    end: int


def render_phone(phone, speaker, n_samples, rate, rng):
    t = np.arange(n_samples) / rate
    f0 = speaker.f0 * (1.0 + 0.03 * rng.standard_normal())
    centres = np.array(PHONES[phone], dtype=float)
    out = np.zeros(n_samples)
    for h in range(1, int((rate / 2 - 200) // f0)):
        f = h * f0
        env = np.sum(np.exp(-0.5 * ((f - centres) / 120.0) ** 2)) + 0.02
        amp = env * (f / 1000.0) ** (-speaker.tilt)
        out += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if phone == "ss":
        out = 0.3 * out + 0.05 * rng.standard_normal(n_samples)
    return out


def render_utterance(phones, speaker, rate=16000, seed=0, phone_ms=(120, 220), fade_ms=10):
    rng = np.random.default_rng(seed)
    pieces, bounds, pos = [], [], 0
    fade = int(rate * fade_ms / 1000)
    for phone in phones:
        n = int(rate * rng.uniform(*phone_ms) / 1000)
        seg = render_phone(phone, speaker, n, rate, rng)
        ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / max(fade, 1))
        pieces.append(seg * ramp)
        bounds.append((phone, pos, pos + n))
        pos += n
    x = np.concatenate(pieces)
    x *= 0.5 / max(np.max(np.abs(x)), 1e-9)
    return AudioBuffer(x, rate), bounds


def make_tone_corpus(out_dir, n_utterances=12, speakers=SPEAKERS, phones_per_utt=(4, 8), seed=0, rate=16000):
    """Write WAVs plus ``manifest.tsv`` under ``out_dir``; returns (entries, segments).

    Utterances alternate between speakers. Segment boundaries are in samples.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = sorted(PHONES)
    entries, segments = [], []
    for i in range(n_utterances):
        spk = speakers[i % len(speakers)]
        count = int(rng.integers(phones_per_utt[0], phones_per_utt[1] + 1))
        phones = [names[j] for j in rng.integers(0, len(names), size=count)]
        audio, bounds = render_utterance(phones, spk, rate, seed=int(rng.integers(2**31)))
        uid = f"{spk.name}_u{i:03d}"
        path = out_dir / f"{uid}.wav"
        save_wav(path, audio)
        entries.append(ManifestEntry(uid, path, spk.name, audio.duration))
        segments.extend(Segment(uid, p, s, e) for p, s, e in bounds)
    write_manifest(out_dir / "manifest.tsv", entries)
    return entries, segments


def make_abx_triples(labels, n_triples, seed=0):
    """Sample (A, B, X) with A and X sharing a label and B differing.

    ``labels`` maps item id -> category.
    """
    rng = np.random.default_rng(seed)
    by_cat = {}
    for item, cat in sorted(labels.items()):
        by_cat.setdefault(cat, []).append(item)
    cats = [c for c, items in by_cat.items() if len(items) >= 2]
    if len(by_cat) < 2 or not cats:
        raise ValueError("need two categories, one with at least two items")
    triples = []
    for _ in range(n_triples):
        cat_a = cats[rng.integers(len(cats))]
        a, x = rng.choice(by_cat[cat_a], size=2, replace=False)
        others = [c for c in by_cat if c != cat_a]
        cat_b = others[rng.integers(len(others))]
        b = by_cat[cat_b][rng.integers(len(by_cat[cat_b]))]
        triples.append(AbxTriple(str(a), str(b), str(x), cat_a, cat_b))
    return triples
