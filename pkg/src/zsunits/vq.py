"""Speaker-conditioned VQ-VAE over acoustic feature frames.

Layout conventions: feature batches are (N, T, D); inside the networks
activations are channel-first (N, C, T). Code indices are 0-based.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import grad as G
from .cluster import kmeans_fit, nearest
from .corpus import ModelBundle, load_bundle, save_bundle
from .grad import nn

log = logging.getLogger(__name__)

ALLOWED_REDUCTIONS = (1, 2, 4, 8)


class VqInputError(ValueError):
    pass


class CodebookStateError(RuntimeError):
    pass


class TrainingHalted(RuntimeError):
    """Raised when a loss turns non-finite; ``diagnostics`` holds the last known state."""

    def __init__(self, message, diagnostics):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


# -- value types --------------------------------------------------------------

@dataclass
class Codebook:
    vectors: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise CodebookStateError("codebook must be a nonempty K x D matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise CodebookStateError("codebook holds non-finite values")
        if self.counts is None:
            self.counts = np.zeros(self.vectors.shape[0], dtype=np.int64)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class CodeSequence:
    indices: np.ndarray
    reduction: int
    codebook: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        k = len(self.codebook)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= k):
            raise VqInputError(f"code index outside [0, {k})")

    def __len__(self):
        return self.indices.size

    def vectors(self):
        return np.asarray(self.codebook)[self.indices]


@dataclass
class VqVaeConfig:
    feature_dim: int = 39
    time_reduction: int = 4
    codebook_size: int = 256
    code_dim: int = 64
    speaker_dim: int = 32
    n_speakers: int = 1
    stem_channels: int = 16
    encoder_channels: tuple = (64, 128, 256)
    decoder_channels: tuple = (256, 128, 64)
    kernel: int = 3
    gamma: float = 0.25
    slope: float = 0.01

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        r = self.time_reduction
        if r not in ALLOWED_REDUCTIONS:
            raise VqInputError(f"time_reduction must be one of {ALLOWED_REDUCTIONS}, got {r}")
        if self.n_strided > min(len(self.encoder_channels), len(self.decoder_channels)):
            raise VqInputError(f"r={r} needs {self.n_strided} strided layers in encoder and decoder")
        if self.gamma <= 0:
            raise VqInputError("gamma must be positive")
        if self.codebook_size < 1 or self.n_speakers < 1:
            raise VqInputError("codebook_size and n_speakers must be positive")

    @property
    def n_strided(self):
        return int(round(math.log2(self.time_reduction)))

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- networks -----------------------------------------------------------------

class Encoder(nn.Module):
    """3x3 2-D stem over (time, coefficient), then a strided 1-D stack."""

    def __init__(self, cfg: VqVaeConfig, rng, dtype=np.float32):
        super().__init__()
        c = cfg.stem_channels
        self.stem = nn.ConvBlock(nn.Conv2d(1, c, 3, rng, bias=False, dtype=dtype, name="encoder.stem"), c, slope=cfg.slope, dtype=dtype)
        layers = []
        prev = c * cfg.feature_dim
        for i, ch in enumerate(cfg.encoder_channels):
            stride = 2 if i < cfg.n_strided else 1
            conv = nn.Conv1d(prev, ch, cfg.kernel, rng, stride=stride, bias=False, dtype=dtype, name=f"encoder.conv{i}")
            layers.append(nn.ConvBlock(conv, ch, slope=cfg.slope, dtype=dtype))
            prev = ch
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv1d(prev, cfg.code_dim, 1, rng, dtype=dtype, name="encoder.proj")

    def forward(self, x):
        n, t, d = x.shape
        h = self.stem(x.reshape(n, 1, t, d))
        c = h.shape[1]
        h = h.transpose(0, 1, 3, 2).reshape(n, c * d, t)
        return self.proj(self.body(h))


class Decoder(nn.Module):
    """Codes concatenated with a broadcast speaker vector, upsampled by transposed convs."""

    def __init__(self, cfg: VqVaeConfig, rng, dtype=np.float32):
        super().__init__()
        layers = []
        prev = cfg.code_dim + cfg.speaker_dim
        self.in_channels = prev
        for i, ch in enumerate(cfg.decoder_channels):
            if i < cfg.n_strided:
                conv = nn.ConvTranspose1d(prev, ch, 4, rng, stride=2, bias=False, dtype=dtype, name=f"decoder.up{i}")
            else:
                conv = nn.Conv1d(prev, ch, cfg.kernel, rng, bias=False, dtype=dtype, name=f"decoder.conv{i}")
            layers.append(nn.ConvBlock(conv, ch, slope=cfg.slope, dtype=dtype))
            prev = ch
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv1d(prev, cfg.feature_dim, cfg.kernel, rng, dtype=dtype, name="decoder.proj")

    def forward(self, codes, speaker_vectors):
        n, _, t = codes.shape
        ones = np.ones((1, 1, t), dtype=codes.dtype)
        v = speaker_vectors.reshape(n, speaker_vectors.shape[1], 1) * ones
        h = G.concat([codes, v], axis=1)
        return self.proj(self.body(h))


@dataclass
class VqForward:
    x_hat: G.Tensor  # (N, T, D)
    latents: G.Tensor  # (N * T_z, D_e), row-major over (example, time)
    quantized: G.Tensor  # same shape, rows of the codebook
    indices: np.ndarray  # (N * T_z,)
    decoder_input: G.Tensor  # (N, D_e, T_z)


class VqVae(nn.Module):
    def __init__(self, cfg: VqVaeConfig, rng, dtype=np.float32, speakers=None):
        super().__init__()
        self.cfg = cfg
        self.speakers = list(speakers) if speakers is not None else [str(i) for i in range(cfg.n_speakers)]
        if len(self.speakers) != cfg.n_speakers:
            raise VqInputError("speaker list length differs from n_speakers")
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim, rng, dtype=dtype, name="speaker_table")
        self.add_param("codebook", rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.code_dim)).astype(dtype))
        self.add_buffer("feature_mean", np.zeros(cfg.feature_dim, dtype))
        self.add_buffer("feature_std", np.ones(cfg.feature_dim, dtype))

    @property
    def dtype(self):
        return self.codebook.data.dtype

    def speaker_index(self, speaker):
        if isinstance(speaker, (int, np.integer)):
            if not 0 <= speaker < len(self.speakers):
                raise VqInputError(f"speaker index {speaker} outside [0, {len(self.speakers)})")
            return int(speaker)
        try:
            return self.speakers.index(str(speaker))
        except ValueError:
            raise VqInputError(f"unknown speaker {speaker!r}; known: {self.speakers}") from None

    def normalize(self, frames):
        return ((np.asarray(frames) - self._buffers["feature_mean"]) / self._buffers["feature_std"]).astype(self.dtype)

    def denormalize(self, frames):
        return np.asarray(frames) * self._buffers["feature_std"] + self._buffers["feature_mean"]

    def forward(self, x, speakers):
        """``x``: normalized (N, T, D) batch with T a multiple of r; ``speakers``: (N,) row indices."""
        if not isinstance(x, G.Tensor):
            x = G.tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3 or x.shape[2] != self.cfg.feature_dim:
            raise VqInputError(f"expected (N, T, {self.cfg.feature_dim}) input, got {x.shape}")
        n = x.shape[0]
        z = self.encoder(x)
        t_z = z.shape[2]
        z_flat = z.transpose(0, 2, 1).reshape(n * t_z, self.cfg.code_dim)
        idx, _ = nearest(z_flat.data, self.codebook.data)
        e = G.take_rows(self.codebook, idx)
        straight = z_flat + G.stop_gradient(e - z_flat)
        dec_in = straight.reshape(n, t_z, self.cfg.code_dim).transpose(0, 2, 1)
        x_hat = self.decoder(dec_in, self.speaker_table(np.asarray(speakers))).transpose(0, 2, 1)
        return VqForward(x_hat, z_flat, e, idx, dec_in)

    # bundles
    def to_bundle(self, extra=None):
        hparams = {"config": self.cfg.to_dict(), "speakers": self.speakers, "dtype": np.dtype(self.dtype).name}
        hparams.update(extra or {})
        return ModelBundle("vqvae", hparams, {f"model.{k}": v for k, v in self.state_dict().items()})

    @classmethod
    def from_bundle(cls, bundle):
        if bundle.kind != "vqvae":
            raise VqInputError(f"expected a vqvae bundle, got {bundle.kind!r}")
        cfg = VqVaeConfig.from_dict(bundle.hparams["config"])
        dtype = np.dtype(bundle.hparams.get("dtype", "float32"))
        model = cls(cfg, np.random.default_rng(0), dtype, bundle.hparams["speakers"])
        model.load_state_dict(bundle.prefixed("model."))
        return model.eval()


# -- quantization and loss ----------------------------------------------------

def quantize(latents, codebook, reduction=1):
    """Nearest-code assignment per frame; ties resolve to the lowest index."""
    vectors = codebook.vectors if isinstance(codebook, Codebook) else np.asarray(codebook)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise CodebookStateError("cannot quantize against an empty codebook")
    latents = np.atleast_2d(np.asarray(latents))
    if latents.shape[1] != vectors.shape[1]:
        raise VqInputError(f"latent dim {latents.shape[1]} != codebook dim {vectors.shape[1]}")
    idx, _ = nearest(latents, vectors)
    return CodeSequence(idx, reduction, vectors), vectors[idx]


def vq_loss(x, x_hat, latents, quantized, gamma, mask=None, latent_mask=None):
    """Returns (total, reconstruction, codebook term, commitment term).

    Every term is a mean over unmasked elements. The commitment term is
    reported with its gamma weight applied.
    """
    recon = G.mse(x_hat, x, mask)
    codebook_term = G.mse(quantized, G.stop_gradient(latents), latent_mask)
    commitment = G.mse(latents, G.stop_gradient(quantized), latent_mask) * gamma
    return recon + codebook_term + commitment, recon, codebook_term, commitment


def latent_mask_from(mask, r):
    """Frame mask (N, T) -> per-latent mask (N * T/r, 1): valid if any covered frame is."""
    n, t = mask.shape
    return mask.reshape(n, t // r, r).any(axis=2).reshape(-1, 1).astype(mask.dtype)


def surrogate_loss(model, x, speakers, mask=None):
    """Loss with quantization choices frozen at the current point.

    ``mask`` is an (N, T) frame mask, as in training.

    Its value matches ``vq_loss`` there and its true derivatives match the
    straight-through gradients, so finite differences of it can check them.
    """
    out = model(x, speakers)
    idx = out.indices.copy()
    offset = out.quantized.data - out.latents.data
    z0 = out.latents.data.copy()
    e0 = out.quantized.data.copy()
    r = model.cfg.time_reduction
    lmask = None if mask is None else latent_mask_from(mask, r)
    fmask = None if mask is None else mask[:, :, None]
    cfg = model.cfg

    def fn():
        xt = G.tensor(np.asarray(x, dtype=model.dtype))
        n, t, d = xt.shape
        z = model.encoder(xt)
        t_z = z.shape[2]
        z_flat = z.transpose(0, 2, 1).reshape(n * t_z, cfg.code_dim)
        dec_in = (z_flat + offset).reshape(n, t_z, cfg.code_dim).transpose(0, 2, 1)
        x_hat = model.decoder(dec_in, model.speaker_table(np.asarray(speakers))).transpose(0, 2, 1)
        recon = G.mse(x_hat, x, fmask)
        cb = G.mse(G.take_rows(model.codebook, idx), z0, lmask)
        commit = G.mse(z_flat, e0, lmask) * cfg.gamma
        return recon + cb + commit

    return fn


def perplexity(indices, k):
    counts = np.bincount(np.asarray(indices, dtype=np.int64).ravel(), minlength=k)
    p = counts[counts > 0] / counts.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


# -- data ---------------------------------------------------------------------

@dataclass
class UtteranceSet:
    """Feature matrices with speaker labels, ready for chunked batching."""

    ids: list
    frames: list
    speakers: list

    def __post_init__(self):
        if not self.ids:
            raise VqInputError("training set is empty")
        if not (len(self.ids) == len(self.frames) == len(self.speakers)):
            raise VqInputError("ids, frames and speakers must align")

    def speaker_names(self):
        return sorted(set(self.speakers))

    @property
    def feature_dim(self):
        return self.frames[0].shape[1]


def dataset_from_manifest(manifest, kind="mfcc39", stft_cfg=None, cache_dir=None, jobs=1):
    from concurrent.futures import ThreadPoolExecutor

    from .corpus import cached_features
    from .dsp import StftConfig

    stft_cfg = stft_cfg or StftConfig()
    entries = list(manifest)
    if any(not e.speaker_id for e in entries):
        raise VqInputError("every utterance needs a speaker label")

    def one(e):
        return cached_features(e.audio_path, kind, stft_cfg, cache_dir, manifest.sample_rate).frames

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        frames = list(pool.map(one, entries))
    return UtteranceSet([e.utterance_id for e in entries], frames, [e.speaker_id for e in entries])


def make_chunks(frames_list, speaker_rows, chunk, dtype=np.float64):
    """Cut each utterance into ``chunk``-frame windows; the tail is zero padded and masked."""
    xs, ss, ms = [], [], []
    d = frames_list[0].shape[1]
    for frames, s in zip(frames_list, speaker_rows):
        for start in range(0, len(frames), chunk):
            piece = frames[start:start + chunk]
            x = np.zeros((chunk, d), dtype=dtype)
            m = np.zeros(chunk, dtype=dtype)
            x[: len(piece)] = piece
            m[: len(piece)] = 1.0
            xs.append(x)
            ss.append(s)
            ms.append(m)
    return np.stack(xs), np.asarray(ss, dtype=np.int64), np.stack(ms)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    chunk_frames: int = 128
    lr: float = 1e-3
    codebook_lr_scale: float = 30.0
    seed: int = 0
    dtype: str = "float32"
    codebook_init: str = "kmeans"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def to_dict(self):
        """Settings that affect results (the checkpoint location does not)."""
        d = asdict(self)
        d.pop("checkpoint_path")
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainResult:
    model: VqVae
    history: list = field(default_factory=list)
    final_perplexity: float = float("nan")


def _init_codebook_from_encoder(model, x, mask, seed):
    r = model.cfg.time_reduction
    k = model.cfg.codebook_size
    z = model.encoder(G.tensor(x)).data
    z = z.transpose(0, 2, 1).reshape(-1, model.cfg.code_dim)
    z = z[latent_mask_from(mask, r)[:, 0] > 0]
    if len(np.unique(z, axis=0)) < k:
        warnings.warn(f"only {len(z)} latent frames for {k} codes; keeping random codebook", RuntimeWarning)
        return False
    km = kmeans_fit(z.astype(np.float64), k, seed=seed, standardize=False)
    model.codebook.data = km.centroids.astype(model.dtype)
    return True


def _checkpoint(model, opt, step, train_cfg, path):
    bundle = model.to_bundle({"train": train_cfg.to_dict(), "step": step})
    for name, arr in opt.state_dict().items():
        bundle.tensors[f"adam.{name}"] = arr
    save_bundle(bundle, path)


def train_vqvae(data: UtteranceSet, cfg: VqVaeConfig, train_cfg: TrainConfig, resume=None):
    """Train from scratch (or from a checkpoint bundle/path in ``resume``).

    Batches for step s are drawn with ``default_rng([seed, s])`` so a resumed
    run sees exactly the batches an uninterrupted one would.
    """
    dtype = np.dtype(train_cfg.dtype)
    if train_cfg.chunk_frames % cfg.time_reduction:
        raise VqInputError("chunk_frames must be a multiple of the time reduction")
    if data.feature_dim != cfg.feature_dim:
        raise VqInputError(f"features have dim {data.feature_dim}, config expects {cfg.feature_dim}")
    names = data.speaker_names()
    if resume is not None:
        bundle = resume if isinstance(resume, ModelBundle) else load_bundle(resume)
        model = VqVae.from_bundle(bundle).train()
        if model.speakers != names:
            raise VqInputError(f"checkpoint speakers {model.speakers} differ from data speakers {names}")
        start = int(bundle.hparams["step"])
    else:
        cfg = VqVaeConfig.from_dict({**cfg.to_dict(), "n_speakers": len(names)})
        model = VqVae(cfg, np.random.default_rng(train_cfg.seed), dtype, names)
        all_frames = np.concatenate(data.frames)
        std = all_frames.std(axis=0)
        model._buffers["feature_mean"] = all_frames.mean(axis=0).astype(dtype)
        model._buffers["feature_std"] = np.where(std > 1e-8, std, 1.0).astype(dtype)
        start = 0
    cfg = model.cfg
    rows = [model.speaker_index(s) for s in data.speakers]
    x_all, s_all, m_all = make_chunks([model.normalize(f) for f in data.frames], rows, train_cfg.chunk_frames, dtype)
    n_chunks = len(x_all)

    params = dict(model.named_parameters())
    opt = G.Adam(params, lr=train_cfg.lr, lr_scale={"codebook": train_cfg.codebook_lr_scale})
    if resume is not None:
        opt.load_state_dict(bundle.prefixed("adam."), start)
    elif train_cfg.codebook_init == "kmeans":
        _init_codebook_from_encoder(model, x_all[:256], m_all[:256], train_cfg.seed)
    elif train_cfg.codebook_init != "normal":
        raise VqInputError(f"unknown codebook_init {train_cfg.codebook_init!r}")

    history = []
    model.train()
    for step in range(start, train_cfg.steps):
        rng = np.random.default_rng([train_cfg.seed, step])
        sel = rng.choice(n_chunks, size=min(train_cfg.batch_size, n_chunks), replace=False)
        x, spk, mask = x_all[sel], s_all[sel], m_all[sel]
        out = model(x, spk)
        fmask = mask[:, :, None]
        total, recon, cb, commit = vq_loss(
            G.tensor(x), out.x_hat, out.latents, out.quantized, cfg.gamma, fmask, latent_mask_from(mask, cfg.time_reduction)
        )
        record = {
            "step": step,
            "total": float(total.data),
            "reconstruction": float(recon.data),
            "codebook": float(cb.data),
            "commitment": float(commit.data),
            "perplexity": perplexity(out.indices, cfg.codebook_size),
        }
        if not np.isfinite(record["total"]):
            raise TrainingHalted("non-finite VQ-VAE loss", {**record, "checkpoint": train_cfg.checkpoint_path})
        opt.zero_grad()
        total.backward()
        if not opt.step():
            raise TrainingHalted("non-finite VQ-VAE gradient", {**record, "checkpoint": train_cfg.checkpoint_path})
        history.append(record)
        done = step + 1
        if train_cfg.checkpoint_path is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            _checkpoint(model, opt, done, train_cfg, train_cfg.checkpoint_path)
    if train_cfg.checkpoint_path is not None:
        _checkpoint(model, opt, train_cfg.steps, train_cfg, train_cfg.checkpoint_path)
    model.eval()
    codes = [encode_utterance(model, f)[0].indices for f in data.frames]
    return TrainResult(model, history, perplexity(np.concatenate(codes), cfg.codebook_size))


# -- inference ----------------------------------------------------------------

def encode(model: VqVae, frames):
    """Continuous latents (ceil(T / r), D_e) for one utterance, batchnorm in inference mode."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != model.cfg.feature_dim:
        raise VqInputError(f"expected (T, {model.cfg.feature_dim}) features, got {frames.shape}")
    if len(frames) == 0:
        raise VqInputError("cannot encode an empty utterance")
    was_training = model.training
    model.eval()
    z = model.encoder(G.tensor(model.normalize(frames)[None])).data[0].T
    model.train(was_training)
    return z


def encode_utterance(model: VqVae, frames):
    """(CodeSequence, quantized vectors) for one utterance."""
    return quantize(encode(model, frames), model.codebook.data, model.cfg.time_reduction)


def decode(model: VqVae, vectors, speaker):
    """Reconstruct (r * T_z, D) frames in the original feature scale."""
    row = model.speaker_index(speaker)
    vectors = np.atleast_2d(np.asarray(vectors, dtype=model.dtype))
    if vectors.shape[1] != model.cfg.code_dim:
        raise VqInputError(f"code dim {vectors.shape[1]} != {model.cfg.code_dim}")
    was_training = model.training
    model.eval()
    spk = model.speaker_table(np.array([row]))
    out = model.decoder(G.tensor(vectors.T[None]), spk).data[0].T
    model.train(was_training)
    return model.denormalize(out)
