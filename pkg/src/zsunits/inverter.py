"""Code-to-spectrogram inverter with an adversarial critic, plus Griffin-Lim synthesis."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import grad as G
from .corpus import ModelBundle, load_bundle, save_bundle
from .dsp import DEFAULT_SAMPLE_RATE, AudioBuffer, ConfigurationError, StftConfig, griffin_lim
from .grad import nn
from .vq import CodeSequence, TrainingHalted

GAN_KINDS = ("lsgan", "wgan")
MAG_FLOOR = 1e-5


class InverterInputError(ValueError):
    pass


@dataclass
class InverterConfig:
    code_dim: int = 64
    time_reduction: int = 4
    kernels: tuple = (1, 3, 5, 7)
    multiscale_layers: int = 4
    scale_channels: int = 64
    hidden_channels: int = 512
    out_dim: int = 1025
    output_mode: str = "log"
    gan_kind: str = "lsgan"
    alpha: float = 1.0
    beta: float = 1.0
    disc_channels: tuple = (256, 128, 64)
    clip: float = 0.01
    slope: float = 0.01

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        if self.gan_kind not in GAN_KINDS:
            raise ConfigurationError(f"gan_kind must be one of {GAN_KINDS}, got {self.gan_kind!r}")
        if self.output_mode not in ("log", "linear"):
            raise ConfigurationError(f"output_mode must be 'log' or 'linear', got {self.output_mode!r}")
        if self.time_reduction < 1:
            raise ConfigurationError("time_reduction must be >= 1")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigurationError("loss weights must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def upsample_codes(codes, r):
    """Repeat every code vector ``r`` times along time."""
    if r < 1:
        raise ConfigurationError(f"time reduction must be >= 1, got {r}")
    return np.repeat(np.atleast_2d(np.asarray(codes)), int(r), axis=0)


# -- networks -----------------------------------------------------------------

class MultiScaleConv(nn.Module):
    """Parallel same-padded convolutions of different widths, concatenated on channels."""

    def __init__(self, cin, kernels, channels, rng, dtype, name):
        super().__init__()
        self.branches = nn.Sequential(
            *[nn.Conv1d(cin, channels, k, rng, bias=False, dtype=dtype, name=f"{name}.k{k}") for k in kernels]
        )
        self.name = name

    def forward(self, x):
        return G.concat([conv(x) for conv in self.branches._children.values()], axis=1)


class Code2Spec(nn.Module):
    def __init__(self, cfg: InverterConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        width = cfg.scale_channels * len(cfg.kernels)
        blocks = []
        prev = cfg.code_dim
        for i in range(cfg.multiscale_layers):
            ms = MultiScaleConv(prev, cfg.kernels, cfg.scale_channels, rng, dtype, f"code2spec.ms{i}")
            blocks.append(nn.ConvBlock(ms, width, slope=cfg.slope, dtype=dtype))
            prev = width
        hidden = nn.Conv1d(prev, cfg.hidden_channels, 3, rng, bias=False, dtype=dtype, name="code2spec.hidden")
        blocks.append(nn.ConvBlock(hidden, cfg.hidden_channels, slope=cfg.slope, dtype=dtype))
        self.body = nn.Sequential(*blocks)
        self.proj = nn.Conv1d(cfg.hidden_channels, cfg.out_dim, 3, rng, dtype=dtype, name="code2spec.proj")

    def forward(self, codes):
        """(N, D_e, T) -> (N, D_m, T)."""
        if codes.ndim != 3 or codes.shape[1] != self.cfg.code_dim:
            raise InverterInputError(f"expected (N, {self.cfg.code_dim}, T) codes, got {codes.shape}")
        out = self.proj(self.body(codes))
        return G.softplus(out) if self.cfg.output_mode == "linear" else out


class Discriminator(nn.Module):
    """Strided conv stack averaged over time into one score per example."""

    def __init__(self, cfg: InverterConfig, rng, dtype=np.float32):
        super().__init__()
        layers = []
        prev = cfg.out_dim
        for i, ch in enumerate(cfg.disc_channels):
            conv = nn.Conv1d(prev, ch, 3, rng, stride=2, dtype=dtype, name=f"disc.conv{i}")
            layers.append(nn.ConvBlock(conv, norm=False, slope=0.2, dtype=dtype))
            prev = ch
        self.body = nn.Sequential(*layers)
        self.score = nn.Conv1d(prev, 1, 3, rng, dtype=dtype, name="disc.score")

    def forward(self, spec):
        out = self.score(self.body(spec))
        return out.reshape(out.shape[0], out.shape[2]).mean(axis=1)


# -- adversarial losses -------------------------------------------------------

def _check_kind(kind):
    if kind not in GAN_KINDS:
        raise ConfigurationError(f"unknown gan kind {kind!r}; expected one of {GAN_KINDS}")


def generator_loss(d_fake, kind):
    _check_kind(kind)
    if kind == "lsgan":
        return ((d_fake - 1.0) ** 2).mean()
    return -d_fake.mean()


def discriminator_loss(d_real, d_fake, kind):
    _check_kind(kind)
    if kind == "lsgan":
        return (d_fake**2).mean() + ((d_real - 1.0) ** 2).mean()
    return d_fake.mean() - d_real.mean()


def gan_losses(disc, real, fake, kind):
    """(generator loss, discriminator loss); the critic sees ``fake`` detached for its own loss."""
    _check_kind(kind)
    if real.shape != fake.shape:
        raise InverterInputError(f"real {real.shape} and generated {fake.shape} shapes differ")
    g = generator_loss(disc(fake), kind)
    d = discriminator_loss(disc(real), disc(G.stop_gradient(fake)), kind)
    return g, d


# -- target scaling -----------------------------------------------------------

@dataclass
class TargetScaler:
    """Maps linear magnitudes to network targets and back."""

    mode: str
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, mags, mode="log"):
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in mags])
        if mode == "log":
            logs = np.log(np.maximum(stacked, MAG_FLOOR))
            std = logs.std(axis=0)
            return cls(mode, logs.mean(axis=0), np.where(std > 1e-8, std, 1.0))
        scale = float(stacked.std()) or 1.0
        return cls(mode, np.zeros(stacked.shape[1]), np.full(stacked.shape[1], scale))

    def transform(self, mag):
        mag = np.asarray(mag, dtype=np.float64)
        if self.mode == "log":
            return (np.log(np.maximum(mag, MAG_FLOOR)) - self.mean) / self.std
        return mag / self.std

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.mode == "log":
            return np.exp(y * self.std + self.mean)
        return np.maximum(y * self.std, 0.0)


# -- model container ----------------------------------------------------------

@dataclass
class Inverter:
    cfg: InverterConfig
    generator: Code2Spec
    discriminator: Discriminator
    scaler: TargetScaler
    stft: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    codebook: np.ndarray | None = None

    @classmethod
    def create(cls, cfg, seed=0, dtype=np.float32, scaler=None, stft=None, sample_rate=DEFAULT_SAMPLE_RATE, codebook=None):
        rng = np.random.default_rng(seed)
        scaler = scaler or TargetScaler("log", np.zeros(cfg.out_dim), np.ones(cfg.out_dim))
        return cls(cfg, Code2Spec(cfg, rng, dtype), Discriminator(cfg, rng, dtype), scaler, stft or StftConfig(), sample_rate, codebook)

    @property
    def dtype(self):
        return self.generator.proj.weight.data.dtype

    def to_bundle(self, extra=None):
        hp = {
            "config": self.cfg.to_dict(),
            "scaler_mode": self.scaler.mode,
            "stft": asdict(self.stft),
            "sample_rate": self.sample_rate,
            "dtype": np.dtype(self.dtype).name,
        }
        hp.update(extra or {})
        tensors = {f"gen.{k}": v for k, v in self.generator.state_dict().items()}
        tensors.update({f"disc.{k}": v for k, v in self.discriminator.state_dict().items()})
        tensors["scaler.mean"] = self.scaler.mean
        tensors["scaler.std"] = self.scaler.std
        if self.codebook is not None:
            tensors["codebook"] = np.asarray(self.codebook)
        return ModelBundle("inverter", hp, tensors)

    @classmethod
    def from_bundle(cls, bundle):
        if isinstance(bundle, (str,)) or hasattr(bundle, "__fspath__"):
            bundle = load_bundle(bundle)
        if bundle.kind != "inverter":
            raise InverterInputError(f"expected an inverter bundle, got {bundle.kind!r}")
        hp = bundle.hparams
        cfg = InverterConfig.from_dict(hp["config"])
        scaler = TargetScaler(hp["scaler_mode"], bundle["scaler.mean"], bundle["scaler.std"])
        inv = cls.create(
            cfg, 0, np.dtype(hp.get("dtype", "float32")), scaler, StftConfig(**hp["stft"]), hp["sample_rate"],
            bundle.tensors.get("codebook"),
        )
        inv.generator.load_state_dict(bundle.prefixed("gen."))
        inv.discriminator.load_state_dict(bundle.prefixed("disc."))
        inv.generator.eval()
        return inv


# -- training -----------------------------------------------------------------

@dataclass
class InverterTrainConfig:
    steps: int = 1000
    batch_size: int = 4
    chunk_frames: int = 64
    lr: float = 1e-3
    disc_lr: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
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
class InverterResult:
    inverter: Inverter
    history: list


def align_codes(codes, n_frames, r):
    """Upsample codes by ``r`` and fit them to ``n_frames`` (crop, or repeat the last vector)."""
    up = upsample_codes(codes, r)
    if len(up) >= n_frames:
        return up[:n_frames]
    return np.concatenate([up, np.repeat(up[-1:], n_frames - len(up), axis=0)])


def _chunk_pairs(pairs, r, scaler, chunk, dtype):
    xs, ys, ms = [], [], []
    for codes, mag in pairs:
        mag = np.asarray(mag)
        x = align_codes(codes, len(mag), r)
        y = scaler.transform(mag)
        for start in range(0, len(mag), chunk):
            n = min(chunk, len(mag) - start)
            cx = np.zeros((chunk, x.shape[1]))
            cy = np.zeros((chunk, y.shape[1]))
            cm = np.zeros(chunk)
            cx[:n], cy[:n], cm[:n] = x[start:start + n], y[start:start + n], 1.0
            xs.append(cx.T)
            ys.append(cy.T)
            ms.append(cm)
    return np.stack(xs).astype(dtype), np.stack(ys).astype(dtype), np.stack(ms).astype(dtype)


def _clip(module, c):
    for p in module.parameters():
        np.clip(p.data, -c, c, out=p.data)


def _save_checkpoint(inv, opt_g, opt_d, step, train_cfg, path):
    bundle = inv.to_bundle({"train": train_cfg.to_dict(), "step": step})
    for k, v in opt_g.state_dict().items():
        bundle.tensors[f"adam_gen.{k}"] = v
    if opt_d is not None:
        for k, v in opt_d.state_dict().items():
            bundle.tensors[f"adam_disc.{k}"] = v
    save_bundle(bundle, path)


def train_inverter(pairs, cfg: InverterConfig, train_cfg: InverterTrainConfig, stft=None, codebook=None,
                   sample_rate=DEFAULT_SAMPLE_RATE):
    """Fit the inverter on ``pairs`` of (code vectors (T_z, D_e), magnitude (T_s, D_m)).

    Each step updates the generator on alpha * MSE + beta * adversarial loss,
    then (when beta > 0) the critic once on the same batch.
    """
    if not pairs:
        raise InverterInputError("no training pairs")
    for codes, mag in pairs:
        if np.asarray(codes).shape[1] != cfg.code_dim or np.asarray(mag).shape[1] != cfg.out_dim:
            raise InverterInputError(
                f"pair dims ({np.asarray(codes).shape[1]}, {np.asarray(mag).shape[1]}) != ({cfg.code_dim}, {cfg.out_dim})"
            )
    dtype = np.dtype(train_cfg.dtype)
    scaler = TargetScaler.fit([m for _, m in pairs], cfg.output_mode)
    inv = Inverter.create(cfg, train_cfg.seed, dtype, scaler, stft, sample_rate, codebook)
    gen, disc = inv.generator, inv.discriminator
    xs, ys, ms = _chunk_pairs(pairs, cfg.time_reduction, scaler, train_cfg.chunk_frames, dtype)
    adversarial = cfg.beta > 0
    opt_g = G.Adam(dict(gen.named_parameters()), lr=train_cfg.lr)
    opt_d = G.Adam(dict(disc.named_parameters()), lr=train_cfg.disc_lr) if adversarial else None
    history = []
    gen.train()
    for step in range(train_cfg.steps):
        rng = np.random.default_rng([train_cfg.seed, step])
        sel = rng.choice(len(xs), size=min(train_cfg.batch_size, len(xs)), replace=False)
        x, y, m = G.tensor(xs[sel]), G.tensor(ys[sel]), ms[sel][:, None, :]
        y_hat = gen(x)
        mse = G.mse(y_hat, y, m)
        record = {"step": step, "mse": float(mse.data), "g_adv": 0.0, "d_loss": 0.0}
        loss = mse * cfg.alpha
        if adversarial:
            g_adv = generator_loss(disc(y_hat * m), cfg.gan_kind)
            loss = loss + g_adv * cfg.beta
            record["g_adv"] = float(g_adv.data)
        if not np.isfinite(float(loss.data)):
            raise TrainingHalted("non-finite inverter loss", {**record, "checkpoint": train_cfg.checkpoint_path})
        opt_g.zero_grad()
        disc.zero_grad()
        loss.backward()
        opt_g.step()
        if adversarial:
            fake = G.tensor(y_hat.data * m)
            d_loss = discriminator_loss(disc(y), disc(fake), cfg.gan_kind)
            record["d_loss"] = float(d_loss.data)
            if not np.isfinite(record["d_loss"]):
                raise TrainingHalted("non-finite critic loss", {**record, "checkpoint": train_cfg.checkpoint_path})
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            if cfg.gan_kind == "wgan":
                _clip(disc, cfg.clip)
        history.append(record)
        done = step + 1
        if train_cfg.checkpoint_path is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            _save_checkpoint(inv, opt_g, opt_d, done, train_cfg, train_cfg.checkpoint_path)
    if train_cfg.checkpoint_path is not None:
        _save_checkpoint(inv, opt_g, opt_d, train_cfg.steps, train_cfg, train_cfg.checkpoint_path)
    gen.eval()
    return InverterResult(inv, history)


# -- synthesis ----------------------------------------------------------------

def predict_magnitude(inv: Inverter, vectors, n_frames=None):
    """Linear magnitude (T_s, D_m) for one utterance's code vectors."""
    vectors = np.atleast_2d(np.asarray(vectors))
    if vectors.shape[1] != inv.cfg.code_dim:
        raise ConfigurationError(f"code dim mismatch: inverter expects {inv.cfg.code_dim}, codes have {vectors.shape[1]}")
    r = inv.cfg.time_reduction
    n_frames = n_frames or r * len(vectors)
    x = align_codes(vectors, n_frames, r).T[None].astype(inv.dtype)
    was = inv.generator.training
    inv.generator.eval()
    y = inv.generator(G.tensor(x)).data[0].T
    inv.generator.train(was)
    return inv.scaler.inverse(y)


@dataclass
class Synthesis:
    audio: AudioBuffer
    magnitude: np.ndarray


def synthesize(codes, inv: Inverter, iterations=60, seed=0, n_frames=None):
    """Codes -> predicted magnitude -> Griffin-Lim waveform.

    ``codes`` may be a CodeSequence (checked against the inverter's
    reduction and code size), an index array (looked up in the embedded
    codebook) or a matrix of code vectors.
    """
    if isinstance(codes, CodeSequence):
        dim = np.asarray(codes.codebook).shape[1]
        if codes.reduction != inv.cfg.time_reduction or dim != inv.cfg.code_dim:
            raise ConfigurationError(
                f"code model (r={codes.reduction}, D_e={dim}) does not match inverter "
                f"(r={inv.cfg.time_reduction}, D_e={inv.cfg.code_dim})"
            )
        vectors = codes.vectors()
    else:
        arr = np.asarray(codes)
        if arr.ndim == 1:
            if inv.codebook is None:
                raise ConfigurationError("index input needs a codebook embedded in the inverter")
            vectors = np.asarray(inv.codebook)[arr.astype(np.int64)]
        else:
            vectors = arr
    mag = predict_magnitude(inv, vectors, n_frames)
    result = griffin_lim(mag, inv.stft, iterations, seed, inv.sample_rate)
    return Synthesis(result.audio, mag)
