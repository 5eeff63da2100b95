"""Glue between features, unit models, the inverter and the evaluation metrics.

A :class:`PipelineConfig` is a two-level mapping (section -> key -> string)
resolved from defaults, an optional INI file and command-line overrides.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import cluster
from . import inverter as I
from . import vq
from .corpus import ModelBundle, cached_features, load_wav
from .dsp import ConfigurationError, StftConfig, linear_magnitude

# Learning rates, batch sizes, step counts and iteration counts are package
# choices, not published values; run reports say so in a ``defaults_note`` line.
DEFAULTS = {
    "features": {"kind": "mfcc39", "sample_rate": "16000", "window_ms": "25", "hop_ms": "10", "fft_size": "2048"},
    "model": {
        "kind": "vqvae", "codebook": "256", "time_reduction": "4", "gamma": "0.25",
        "code_dim": "64", "speaker_dim": "32", "codebook_init": "kmeans",
    },
    "inverter": {
        "alpha": "1.0", "beta": "1.0", "gan": "lsgan", "kernels": "1,3,5,7",
        "output": "log", "griffin_lim_iterations": "60",
    },
    "training": {
        "seed": "0", "steps": "1000", "lr": "0.001", "batch_size": "8", "chunk_frames": "128",
        "dtype": "float32", "kmeans_iters": "10", "gmm_iters": "25",
        "inverter_steps": "1000", "inverter_lr": "0.001", "disc_lr": "0.0001", "inverter_batch_size": "4",
        "inverter_chunk_frames": "64",
    },
}

UNIT_KINDS = ("kmeans", "gmm", "vqvae")


class PipelineConfig:
    def __init__(self, sections=None):
        self.sections = {s: dict(v) for s, v in DEFAULTS.items()}
        for s, values in (sections or {}).items():
            self.sections.setdefault(s, {}).update({k: str(v) for k, v in values.items()})

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            with open(path) as fh:
                parser.read_file(fh)
            for section in parser.sections():
                cfg.sections.setdefault(section, {}).update(parser[section])
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.set(key, value)
        return cfg

    def set(self, dotted, value):
        section, key = dotted.split(".", 1)
        self.sections.setdefault(section, {})[key] = str(value)

    def get(self, dotted):
        section, key = dotted.split(".", 1)
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigurationError(f"missing config value {dotted}") from None

    def int(self, dotted):
        return self._convert(dotted, int)

    def float(self, dotted):
        return self._convert(dotted, float)

    def _convert(self, dotted, fn):
        raw = self.get(dotted)
        try:
            return fn(raw)
        except ValueError:
            raise ConfigurationError(f"{dotted}: cannot parse {raw!r}") from None

    def flat(self):
        return {f"{s}.{k}": v for s in sorted(self.sections) for k, v in sorted(self.sections[s].items())}

    def write(self, path):
        parser = configparser.ConfigParser()
        for s in sorted(self.sections):
            parser[s] = dict(sorted(self.sections[s].items()))
        with open(path, "w") as fh:
            parser.write(fh)

    # derived settings
    def stft(self):
        return StftConfig.from_ms(self.int("features.sample_rate"), self.float("features.window_ms"),
                                  self.float("features.hop_ms"), self.int("features.fft_size"))

    def unit_kind(self):
        kind = self.get("model.kind")
        if kind not in UNIT_KINDS:
            raise ConfigurationError(f"model.kind must be one of {UNIT_KINDS}, got {kind!r}")
        return kind

    def vq_config(self, feature_dim):
        return vq.VqVaeConfig(
            feature_dim=feature_dim, time_reduction=self.int("model.time_reduction"),
            codebook_size=self.int("model.codebook"), code_dim=self.int("model.code_dim"),
            speaker_dim=self.int("model.speaker_dim"), gamma=self.float("model.gamma"),
        )

    def vq_train_config(self, checkpoint_path=None):
        return vq.TrainConfig(
            steps=self.int("training.steps"), batch_size=self.int("training.batch_size"),
            chunk_frames=self.int("training.chunk_frames"), lr=self.float("training.lr"),
            seed=self.int("training.seed"), dtype=self.get("training.dtype"),
            codebook_init=self.get("model.codebook_init"),
            checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
        )

    def inverter_config(self, code_dim, time_reduction, out_dim):
        kernels = tuple(int(k) for k in self.get("inverter.kernels").split(","))
        return I.InverterConfig(
            code_dim=code_dim, time_reduction=time_reduction, kernels=kernels, out_dim=out_dim,
            output_mode=self.get("inverter.output"), gan_kind=self.get("inverter.gan"),
            alpha=self.float("inverter.alpha"), beta=self.float("inverter.beta"),
        )

    def inverter_train_config(self, checkpoint_path=None):
        return I.InverterTrainConfig(
            steps=self.int("training.inverter_steps"), batch_size=self.int("training.inverter_batch_size"),
            chunk_frames=self.int("training.inverter_chunk_frames"), lr=self.float("training.inverter_lr"),
            disc_lr=self.float("training.disc_lr"), seed=self.int("training.seed"),
            dtype=self.get("training.dtype"),
            checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
        )


def reference_table():
    """Rows of published reference numbers: (system, representation, codebook, r, abx, bitrate)."""
    text = resources.files("zsunits").joinpath("data/reference_results.txt").read_text()
    rows = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            system, rep, k, r, abx, rate = line.split("\t")
            rows.append((system, rep, k, r, float(abx), float(rate)))
    return rows


# -- unit models --------------------------------------------------------------

@dataclass
class Encoded:
    indices: np.ndarray
    representation: np.ndarray  # what ABX compares
    code_vectors: np.ndarray  # what the inverter consumes


class UnitModel:
    """Uniform encode() over K-Means, GMM and VQ-VAE unit models."""

    def __init__(self, kind, model, time_reduction, feature_kind):
        self.kind = kind
        self.model = model
        self.time_reduction = int(time_reduction)
        self.feature_kind = feature_kind

    @property
    def codebook(self):
        if self.kind == "kmeans":
            return self.model.standardizer.inverse(self.model.centroids)
        if self.kind == "gmm":
            return self.model.standardizer.inverse(self.model.means)
        return self.model.codebook.data.astype(np.float64)

    @property
    def frame_distance(self):
        return "symmetric_kl" if self.kind == "gmm" else "cosine"

    def encode(self, frames):
        if self.kind == "vqvae":
            codes, vecs = vq.encode_utterance(self.model, frames)
            return Encoded(codes.indices, vecs.astype(np.float64), vecs.astype(np.float64))
        reduced = cluster.time_reduce(frames, self.time_reduction)
        if self.kind == "kmeans":
            idx, vecs = cluster.kmeans_encode(self.model, reduced)
            return Encoded(idx, vecs, vecs)
        idx, post = cluster.gmm_encode(self.model, reduced)
        return Encoded(idx, post, self.codebook[idx])

    def code_sequence(self, indices):
        return vq.CodeSequence(indices, self.time_reduction, self.codebook)

    def to_bundle(self, extra=None):
        meta = {"time_reduction": self.time_reduction, "feature_kind": self.feature_kind}
        meta.update(extra or {})
        return self.model.to_bundle(meta)

    @classmethod
    def from_bundle(cls, bundle: ModelBundle):
        hp = bundle.hparams
        kind = bundle.kind
        if kind == "kmeans":
            model = cluster.KMeansModel.from_bundle(bundle)
        elif kind == "gmm":
            model = cluster.GmmModel.from_bundle(bundle)
        elif kind == "vqvae":
            model = vq.VqVae.from_bundle(bundle)
        else:
            raise ConfigurationError(f"bundle kind {kind!r} is not a unit model")
        return cls(kind, model, hp.get("time_reduction", 1), hp.get("feature_kind", "mfcc39"))


def train_units(data: vq.UtteranceSet, cfg: PipelineConfig, checkpoint_path=None):
    """Fit the configured unit model; returns (UnitModel, metrics dict)."""
    kind = cfg.unit_kind()
    r = cfg.int("model.time_reduction")
    k = cfg.int("model.codebook")
    seed = cfg.int("training.seed")
    feature_kind = cfg.get("features.kind")
    if kind == "vqvae":
        res = vq.train_vqvae(data, cfg.vq_config(data.feature_dim), cfg.vq_train_config(checkpoint_path))
        last = res.history[-1] if res.history else {}
        metrics = {f"final_{key}": last[key] for key in ("total", "reconstruction", "codebook", "commitment") if key in last}
        metrics["initial_total"] = res.history[0]["total"] if res.history else float("nan")
        metrics["codebook_perplexity"] = res.final_perplexity
        return UnitModel(kind, res.model, r, feature_kind), metrics
    frames = np.concatenate([cluster.time_reduce(f, r) for f in data.frames])
    if kind == "kmeans":
        model = cluster.kmeans_fit(frames, k, iters=cfg.int("training.kmeans_iters"), seed=seed)
        metrics = {"inertia": float(model.inertia_history[-1]) if len(model.inertia_history) else float("nan")}
    else:
        model = cluster.gmm_fit(frames, k, iters=cfg.int("training.gmm_iters"), seed=seed)
        metrics = {"mean_loglik": float(model.loglik_history[-1])}
    unit = UnitModel(kind, model, r, feature_kind)
    idx = np.concatenate([unit.encode(f).indices for f in data.frames])
    metrics["codebook_perplexity"] = vq.perplexity(idx, k)
    return unit, metrics


def manifest_features(manifest, cfg: PipelineConfig, cache_dir=None, jobs=1):
    return vq.dataset_from_manifest(manifest, cfg.get("features.kind"), cfg.stft(), cache_dir, jobs)


def inverter_pairs(unit: UnitModel, manifest, cfg: PipelineConfig, cache_dir=None):
    """(code vectors, linear magnitude) for every utterance in ``manifest``."""
    stft = cfg.stft()
    pairs = []
    for entry in manifest:
        frames = cached_features(entry.audio_path, unit.feature_kind, stft, cache_dir, manifest.sample_rate).frames
        mag = linear_magnitude(load_wav(entry.audio_path, manifest.sample_rate), stft).frames
        pairs.append((unit.encode(frames).code_vectors, mag))
    return pairs
