"""DTW distances, ABX discriminability and unigram-entropy bitrate."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-10


class MetricInputError(ValueError):
    pass


def cosine_distances(a, b):
    """Pairwise 1 - cos(angle); any zero vector is at distance 1 from everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = np.outer(na, nb)
    out = np.ones_like(dots)
    ok = denom > 0
    out[ok] = 1.0 - dots[ok] / denom[ok]
    return np.clip(out, 0.0, 2.0)


def _check_probabilities(p, name):
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise MetricInputError(f"{name}: rows must be probability vectors for KL distance")


def _floored(p):
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=1, keepdims=True)


def symmetric_kl_distances(a, b):
    """Pairwise 0.5 * (KL(p||q) + KL(q||p)) after flooring at 1e-10 and renormalizing."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_probabilities(a, "seq_a")
    _check_probabilities(b, "seq_b")
    p, q = _floored(a), _floored(b)
    lp, lq = np.log(p), np.log(q)
    # KL(p||q) = sum p log p - sum p log q
    kl_pq = (p * lp).sum(axis=1)[:, None] - p @ lq.T
    kl_qp = (q * lq).sum(axis=1)[None, :] - lp @ q.T
    return np.maximum(0.5 * (kl_pq + kl_qp), 0.0)


FRAME_DISTANCES = {
    "cosine": cosine_distances,
    "symmetric_kl": symmetric_kl_distances,
    "kl": symmetric_kl_distances,
}


def frame_distance_matrix(a, b, frame_distance="cosine"):
    try:
        fn = FRAME_DISTANCES[frame_distance]
    except KeyError:
        raise MetricInputError(f"unknown frame distance {frame_distance!r}") from None
    return fn(a, b)


def dtw_from_costs(cost):
    """Minimal-cost monotone alignment with steps (1,0), (0,1), (1,1).

    Returns (total cost, path length) of the cheapest path; among equally
    cheap paths the shortest one is taken.
    """
    ta, tb = cost.shape
    inf = math.inf
    acc = [[inf] * (tb + 1) for _ in range(ta + 1)]
    length = [[0] * (tb + 1) for _ in range(ta + 1)]
    acc[0][0] = 0.0
    rows = cost.tolist()
    for i in range(1, ta + 1):
        row = rows[i - 1]
        prev_acc, cur_acc = acc[i - 1], acc[i]
        prev_len, cur_len = length[i - 1], length[i]
        for j in range(1, tb + 1):
            best, blen = prev_acc[j - 1], prev_len[j - 1]
            c, cl = prev_acc[j], prev_len[j]
            if c < best or (c == best and cl < blen):
                best, blen = c, cl
            c, cl = cur_acc[j - 1], cur_len[j - 1]
            if c < best or (c == best and cl < blen):
                best, blen = c, cl
            cur_acc[j] = best + row[j - 1]
            cur_len[j] = blen + 1
    return acc[ta][tb], length[ta][tb]


def dtw(seq_a, seq_b, frame_distance="cosine"):
    """DTW distance: cost of the cheapest alignment divided by its length."""
    seq_a = np.atleast_2d(np.asarray(seq_a, dtype=np.float64))
    seq_b = np.atleast_2d(np.asarray(seq_b, dtype=np.float64))
    if seq_a.shape[0] == 0 or seq_b.shape[0] == 0:
        raise MetricInputError("dtw needs nonempty sequences")
    if seq_a.shape[1] != seq_b.shape[1]:
        raise MetricInputError(f"feature dims differ: {seq_a.shape[1]} vs {seq_b.shape[1]}")
    total, steps = dtw_from_costs(frame_distance_matrix(seq_a, seq_b, frame_distance))
    return total / steps


@dataclass(frozen=True)
class AbxTriple:
    a: str
    b: str
    x: str
    category_a: str
    category_b: str


@dataclass
class AbxReport:
    error_rate: float
    n_triples: int
    n_skipped: int = 0
    by_category: dict = field(default_factory=dict)

    @property
    def error_percent(self):
        return 100.0 * self.error_rate


def read_triples(path):
    """One triple per line: ``A_id B_id X_id category_a category_b``."""
    triples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 5:
            raise MetricInputError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        triples.append(AbxTriple(*parts))
    return triples


def write_triples(path, triples):
    Path(path).write_text("".join(f"{t.a} {t.b} {t.x} {t.category_a} {t.category_b}\n" for t in triples))


def abx_score(triples, representations, frame_distance="cosine"):
    """Plain-mean ABX error: 1 when X is closer to B, 0.5 on ties, 0 otherwise."""
    scores = []
    per_cat = {}
    skipped = 0
    cache = {}

    def dist(u, v):
        key = (u, v)
        if key not in cache:
            cache[key] = dtw(representations[u], representations[v], frame_distance)
        return cache[key]

    for t in triples:
        if any(k not in representations for k in (t.a, t.b, t.x)):
            skipped += 1
            continue
        dax, dbx = dist(t.a, t.x), dist(t.b, t.x)
        err = 1.0 if dax > dbx else 0.5 if dax == dbx else 0.0
        scores.append(err)
        per_cat.setdefault(t.category_a, []).append(err)
    if skipped:
        log.warning("abx: %d triple(s) skipped for missing representations", skipped)
    rate = float(np.mean(scores)) if scores else float("nan")
    return AbxReport(rate, len(scores), skipped, {k: float(np.mean(v)) for k, v in sorted(per_cat.items())})


def unigram_entropy(symbols):
    counts = Counter(symbols)
    n = sum(counts.values())
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def bitrate(sequences, total_duration):
    """Bits per second: (symbol count / duration) * unigram entropy of all symbols."""
    if total_duration <= 0:
        raise MetricInputError("total duration must be positive")
    symbols = [s for seq in sequences for s in np.asarray(seq).ravel().tolist()]
    if not symbols:
        raise MetricInputError("bitrate needs at least one symbol")
    return len(symbols) / total_duration * unigram_entropy(symbols)


def read_units(path):
    """Parse ``utterance-id idx idx ...`` lines into a dict of int arrays."""
    units = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            units[parts[0]] = np.array([int(p) for p in parts[1:]], dtype=np.int64)
    return units


def write_units(path, units):
    Path(path).write_text("".join(f"{uid} {' '.join(map(str, np.asarray(seq).tolist()))}\n" for uid, seq in units.items()))
