"""
From codes back to audio
========================

Train a VQ-VAE on tone speech, fit the code-to-spectrogram network on
its codes, and turn a code string into a WAV file with Griffin-Lim.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from zsunits import corpus, pipeline, synthetic
from zsunits import inverter as I

root = Path(tempfile.mkdtemp(prefix="zsunits_demo_"))
synthetic.make_tone_corpus(root, n_utterances=12, seed=0)
manifest = corpus.load_manifest(root / "manifest.tsv")

cfg = pipeline.PipelineConfig.load(None, {
    "model.codebook": 64, "model.time_reduction": 4, "training.steps": 150, "training.inverter_steps": 300,
})
data = pipeline.manifest_features(manifest, cfg)
unit, stats = pipeline.train_units(data, cfg)
print(f"VQ-VAE loss {stats['initial_total']:.3f} -> {stats['final_total']:.3f}")

# %%
# Each code vector is repeated r times so the inverter works at the
# spectrogram frame rate. Targets are standardized log magnitudes.
pairs = pipeline.inverter_pairs(unit, manifest, cfg)
icfg = cfg.inverter_config(unit.codebook.shape[1], unit.time_reduction, pairs[0][1].shape[1])
result = I.train_inverter(pairs, icfg, cfg.inverter_train_config(), cfg.stft(), unit.codebook, manifest.sample_rate)
mse = [h["mse"] for h in result.history]
print(f"inverter MSE {np.mean(mse[:10]):.3f} -> {np.mean(mse[-10:]):.3f} (10-step means)")

# %%
# Resynthesize the first utterance from its integer codes alone.
codes = unit.encode(data.frames[0]).indices
print("first 24 codes:", " ".join(map(str, codes[:24])))
out = I.synthesize(unit.code_sequence(codes), result.inverter, iterations=60)
wav = root / "resynth.wav"
corpus.save_wav(wav, out.audio)
print(f"wrote {wav} ({out.audio.duration:.2f} s)")

# %%
# Does the predicted spectrogram look more like its own source than the others?
def log_gap(a, b):
    n = min(len(a), len(b))
    return float(np.mean((np.log(a[:n] + 1e-5) - np.log(b[:n] + 1e-5)) ** 2))

gaps = [log_gap(out.magnitude, mag) for _, mag in pairs]
print("log-spectral gap to each utterance:", np.round(gaps, 2))
print("closest utterance:", data.ids[int(np.argmin(gaps))])
