"""Finite-difference gradient checks over every layer kind and the composed training losses."""
from __future__ import annotations

import numpy as np

from . import grad as G
from . import inverter as I
from . import vq
from .grad import nn

F64 = np.float64


def _projected(out, seed=9):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * w).sum()


def _input(rng, *shape):
    return G.tensor(rng.normal(size=shape), requires_grad=True)


def _layer(module, x):
    params = dict(module.named_parameters())
    params["input"] = x
    return (lambda: _projected(module(x))), params, None


def layer_cases(rng):
    """name -> (loss_fn, tensors, surrogate)."""
    cases = {
        "conv1d": _layer(nn.Conv1d(3, 4, 3, rng, dtype=F64), _input(rng, 2, 3, 7)),
        "conv1d_stride2": _layer(nn.Conv1d(3, 4, 3, rng, stride=2, dtype=F64), _input(rng, 2, 3, 9)),
        "conv2d": _layer(nn.Conv2d(2, 3, 3, rng, dtype=F64), _input(rng, 2, 2, 5, 4)),
        "conv_transpose1d": _layer(nn.ConvTranspose1d(3, 2, 4, rng, stride=2, dtype=F64), _input(rng, 2, 3, 5)),
        "linear": _layer(nn.Linear(3, 5, rng, dtype=F64), _input(rng, 4, 3)),
        "leaky_relu": _layer(nn.LeakyReLU(0.01), _input(rng, 3, 5)),
        "multiscale_conv": _layer(I.MultiScaleConv(3, (1, 3, 5, 7), 2, rng, F64, "ms"), _input(rng, 2, 3, 9)),
        "conv_bn_lrelu": _layer(
            nn.ConvBlock(nn.Conv1d(3, 4, 3, rng, bias=False, dtype=F64), 4, dtype=F64), _input(rng, 2, 3, 8)
        ),
    }
    bn = nn.BatchNorm(4, dtype=F64)
    cases["batchnorm_train"] = _layer(bn, _input(rng, 3, 4, 6))
    bn_eval = nn.BatchNorm(4, dtype=F64).eval()
    bn_eval._buffers["running_mean"] = rng.normal(size=4)
    bn_eval._buffers["running_var"] = rng.uniform(0.5, 2.0, size=4)
    cases["batchnorm_eval"] = _layer(bn_eval, _input(rng, 3, 4, 6))
    emb = nn.Embedding(5, 3, rng, dtype=F64)
    idx = np.array([0, 2, 2, 4])
    cases["embedding"] = ((lambda: _projected(emb(idx))), dict(emb.named_parameters()), None)
    x = _input(rng, 4)
    frozen = x.data.copy()
    cases["stop_gradient"] = (
        lambda: (x * x).sum() + (G.stop_gradient(x) * x).sum(),
        {"x": x},
        lambda: (x * x).sum() + (G.tensor(frozen) * x).sum(),
    )
    a, b = _input(rng, 3, 4), _input(rng, 3, 4)
    cases["masked_mse"] = ((lambda: G.mse(a, b, np.array([[1.0], [1.0], [0.0]]))), {"a": a, "b": b}, None)
    return cases


def vq_loss_case(rng):
    cfg = vq.VqVaeConfig(
        feature_dim=3, time_reduction=2, codebook_size=3, code_dim=2, speaker_dim=2, n_speakers=2,
        stem_channels=2, encoder_channels=(3,), decoder_channels=(3,),
    )
    model = vq.VqVae(cfg, rng, dtype=F64)
    x = rng.normal(size=(2, 4, 3))
    spk = np.array([0, 1])
    mask = np.ones((2, 4))
    mask[1, 3] = 0.0

    def loss():
        out = model(x, spk)
        lmask = vq.latent_mask_from(mask, cfg.time_reduction)
        return vq.vq_loss(x, out.x_hat, out.latents, out.quantized, cfg.gamma, mask[:, :, None], lmask)[0]

    return loss, dict(model.named_parameters()), vq.surrogate_loss(model, x, spk, mask)


def inverter_loss_case(rng, alpha=1.0, beta=1.0):
    cfg = I.InverterConfig(code_dim=4, time_reduction=2, multiscale_layers=2, scale_channels=3,
                           hidden_channels=6, out_dim=9, disc_channels=(5, 4), alpha=alpha, beta=beta)
    gen = I.Code2Spec(cfg, rng, dtype=F64)
    disc = I.Discriminator(cfg, rng, dtype=F64)
    for _, p in disc.named_parameters():
        if p.ndim == 1:
            p.data = rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(2, 4, 8))
    y = rng.normal(size=(2, 9, 8))

    def loss():
        y_hat = gen(G.tensor(x))
        return G.mse(y_hat, y) * alpha + I.generator_loss(disc(y_hat), cfg.gan_kind) * beta

    params = {f"gen.{k}": p for k, p in gen.named_parameters()}
    params.update({f"disc.{k}": p for k, p in disc.named_parameters()})
    return loss, params, None


def gradcheck_suite(seed=0, tolerance=1e-4):
    """Run all checks; returns name -> GradCheckReport."""
    rng = np.random.default_rng(seed)
    cases = layer_cases(rng)
    cases["vq_loss"] = vq_loss_case(rng)
    cases["inverter_generator_loss"] = inverter_loss_case(rng)
    return {name: G.grad_check(fn, tensors, tolerance, surrogate=sur) for name, (fn, tensors, sur) in cases.items()}
