"""
Discovering units in synthetic tone speech
==========================================

Two synthetic speakers read random strings of six vowel-like "phones".
We fit three unit models on MFCC frames and look at how many bits per
second each emits and how well their codes separate phones.
"""

# %%
# A small corpus: 12 utterances, alternating speakers, each phone a
# harmonic complex with its own resonances.
import tempfile
from pathlib import Path

import numpy as np

from zsunits import corpus, metrics, pipeline, synthetic

root = Path(tempfile.mkdtemp(prefix="zsunits_demo_"))
entries, segments = synthetic.make_tone_corpus(root, n_utterances=12, seed=0)
manifest = corpus.load_manifest(root / "manifest.tsv")
print(f"{len(manifest)} utterances, {manifest.total_duration():.1f} s, speakers {manifest.speakers()}")

# %%
# Features are 39-dim MFCCs (13 static + deltas + delta-deltas) at 100 frames/s.
cfg = pipeline.PipelineConfig.load(None, {"model.codebook": 32, "training.steps": 150})
data = pipeline.manifest_features(manifest, cfg)
print("frames per utterance:", [len(f) for f in data.frames])

# %%
# Fit each unit model at two time reductions. Bitrate is symbol rate times
# unigram entropy, so averaging r frames per code cuts it by roughly r.
models = {}
for kind in ("kmeans", "gmm", "vqvae"):
    for r in (1, 4):
        cfg.set("model.kind", kind)
        cfg.set("model.time_reduction", r)
        unit, stats = pipeline.train_units(data, cfg)
        codes = [unit.encode(f).indices for f in data.frames]
        rate = metrics.bitrate(codes, manifest.total_duration())
        models[kind, r] = unit
        print(f"{kind:6s} r={r}  {rate:7.1f} bits/s  perplexity {stats['codebook_perplexity']:.1f}")

# %%
# Phone ABX: cut every phone segment out of the code stream and ask whether
# X sits nearer a same-phone segment than a different-phone one.
rate, hop = manifest.sample_rate, cfg.stft().hop_length
by_id = dict(zip(data.ids, data.frames))
items, labels = {}, {}
for i, seg in enumerate(segments):
    lo, hi = seg.start // hop, seg.end // hop
    if hi - lo >= 8:
        items[f"seg{i}"] = by_id[seg.utterance_id][lo:hi]
        labels[f"seg{i}"] = seg.phone
triples = synthetic.make_abx_triples(labels, 300, seed=0)

for (kind, r), unit in sorted(models.items()):
    reps = {k: unit.encode(v).representation for k, v in items.items()}
    score = metrics.abx_score(triples, reps, unit.frame_distance)
    print(f"{kind:6s} r={r}  phone ABX error {score.error_percent:5.1f} %")

raw = metrics.abx_score(triples, items)
print(f"raw MFCC       phone ABX error {raw.error_percent:5.1f} %")
