"""Beta-VAE over BEV tensors: conv encoder, upsample-conv decoder.

The encoder is a strided-conv stack ending in two linear heads (mean and
log-variance); the decoder mirrors it with nearest-neighbour upsampling
followed by 3x3 convs and a per-pixel sigmoid. Once trained the params
are frozen and downstream code treats z = mean(X) as the scene context.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nn import Adam, Conv2d, Linear, ParamSet
from .snapshot import load_snapshot, save_snapshot

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 64
    beta: float = 0.01
    enc_channels: tuple = (16, 32, 64, 128, 256)
    dec_channels: tuple = (192, 96, 48, 24, 16)
    in_shape: tuple = (7, 140, 80)
    dtype: str = "f64"

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be > 0")
        if len(self.enc_channels) != len(self.dec_channels):
            raise ValueError("encoder and decoder need equally many stages")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")


def light_config(**overrides) -> VaeConfig:
    """Narrow channel stack for quick experiments; same contract."""
    kwargs = dict(enc_channels=(8, 16, 32, 64, 128),
                  dec_channels=(96, 48, 24, 12, 8), dtype="f32")
    kwargs.update(overrides)
    return VaeConfig(**kwargs)


def _stage_shapes(cfg: VaeConfig) -> list[tuple[int, int]]:
    """Spatial shape before each encoder stage, ending at the bottleneck."""
    h, w = cfg.in_shape[1], cfg.in_shape[2]
    shapes = [(h, w)]
    for _ in cfg.enc_channels:
        h, w = (h + 1) // 2, (w + 1) // 2
        shapes.append((h, w))
    return shapes


@dataclass(frozen=True)
class LatentSample:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class VaeLossBreakdown:
    kl: float
    mse: float
    total: float
    beta: float


class VaeParams:
    """Parameter container plus the architecture that interprets it."""

    def __init__(self, cfg: VaeConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen = False
        self.params = ParamSet(dtype=_DTYPES[cfg.dtype])
        rng = np.random.Generator(np.random.PCG64(seed))
        shapes = _stage_shapes(cfg)
        bh, bw = shapes[-1]
        flat = cfg.enc_channels[-1] * bh * bw

        chans = (cfg.in_shape[0],) + tuple(cfg.enc_channels)
        self.enc = [Conv2d(self.params, f"enc{i}", chans[i], chans[i + 1],
                           kernel=3, stride=2, padding=1, rng=rng)
                    for i in range(len(cfg.enc_channels))]
        self.enc_mu = Linear(self.params, "enc_mu", flat, cfg.latent_dim, rng=rng)
        self.enc_logvar = Linear(self.params, "enc_logvar", flat,
                                 cfg.latent_dim, rng=rng)

        dh, dw = shapes[-1]
        self.dec_in = Linear(self.params, "dec_in", cfg.latent_dim,
                             cfg.dec_channels[0] * dh * dw, rng=rng)
        dchans = tuple(cfg.dec_channels) + (cfg.in_shape[0],)
        self.dec = [Conv2d(self.params, f"dec{i}", dchans[i], dchans[i + 1],
                           kernel=3, stride=1, padding=1, rng=rng)
                    for i in range(len(cfg.dec_channels))]
        self.up_targets = list(reversed(shapes[:-1]))
        self.bottleneck = (cfg.dec_channels[0], dh, dw)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.params.state_arrays()


def _check_input(cfg: VaeConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=_DTYPES[cfg.dtype])
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(cfg.in_shape):
        raise ValueError(f"expected input shaped {tuple(cfg.in_shape)}, "
                         f"got {x.shape}")
    return x


def encode_graph(vp: VaeParams, x: Tensor) -> tuple[Tensor, Tensor]:
    h = x
    for conv in vp.enc:
        h = ad.relu(conv(h))
    flat = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    return vp.enc_mu(flat), vp.enc_logvar(flat)


def decode_graph(vp: VaeParams, z: Tensor) -> Tensor:
    ch, dh, dw = vp.bottleneck
    h = ad.reshape(vp.dec_in(z), (z.shape[0], ch, dh, dw))
    for conv, (th, tw) in zip(vp.dec, vp.up_targets):
        h = ad.upsample_nn(h, th, tw)
        h = conv(h)
        if conv is not vp.dec[-1]:
            h = ad.relu(h)
    return ad.sigmoid(h)


def encode(vp: VaeParams, x: np.ndarray,
           rng: np.random.Generator | None = None) -> LatentSample:
    """Latent statistics for x; z is sampled only when an rng is passed."""
    single = np.asarray(x).ndim == 3
    xb = _check_input(vp.cfg, x)
    mu_t, logvar_t = encode_graph(vp, Tensor(xb))
    mu, logvar = mu_t.data, logvar_t.data
    if rng is not None:
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = mu + np.exp(0.5 * logvar) * eps
    else:
        z = mu.copy()
    if single:
        mu, logvar, z = mu[0], logvar[0], z[0]
    return LatentSample(mu=mu, logvar=logvar, z=z)


def decode(vp: VaeParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=_DTYPES[vp.cfg.dtype])
    single = z.ndim == 1
    if single:
        z = z[None]
    if z.ndim != 2 or z.shape[1] != vp.cfg.latent_dim:
        raise ValueError(f"expected latent of length {vp.cfg.latent_dim}, "
                         f"got shape {z.shape}")
    out = decode_graph(vp, Tensor(z)).data
    return out[0] if single else out


def vae_loss_graph(x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor,
                   beta: float) -> tuple[Tensor, VaeLossBreakdown]:
    """Per-sample sums averaged over the batch; total = beta*kl + mse."""
    diff = ad.sub(x_hat, x)
    mse = ad.mean(ad.sum_(ad.power(diff, 2.0), axis=(1, 2, 3)))
    terms = ad.sub(ad.add(ad.power(mu, 2.0), ad.exp(logvar)),
                   ad.shift(logvar, 1.0))
    kl = ad.scale(ad.mean(ad.sum_(terms, axis=1)), 0.5)
    total = ad.add(ad.scale(kl, beta), mse)
    return total, VaeLossBreakdown(kl=kl.item(), mse=mse.item(),
                                   total=total.item(), beta=beta)


def vae_loss(x: np.ndarray, x_hat: np.ndarray, mu: np.ndarray,
             logvar: np.ndarray, beta: float = 0.01) -> VaeLossBreakdown:
    """Loss breakdown on plain arrays (single sample or batch)."""
    arrs = [np.asarray(a, dtype=np.float64) for a in (x, x_hat, mu, logvar)]
    if arrs[0].ndim == 3:
        arrs[0], arrs[1] = arrs[0][None], arrs[1][None]
        arrs[2], arrs[3] = arrs[2][None], arrs[3][None]
    _, breakdown = vae_loss_graph(*(Tensor(a) for a in arrs), beta=beta)
    return breakdown


def train_vae(frames: np.ndarray, cfg: VaeConfig, steps: int,
              batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
              log_path: str | Path | None = None, log_every: int = 50,
              lr_schedule: tuple = (), probe=None,
              probe_every: int = 250) -> VaeParams:
    """Adam-train on (N, C, H, W) binary frames; returns frozen params.

    lr_schedule: (step, lr) pairs; the rate switches when that step begins.
    probe: optional callable(params, steps_done) evaluated every probe_every
    steps; returning True ends training early (e.g. a reconstruction gate).
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError("train_vae needs a non-empty (N, C, H, W) dataset")
    dtype = _DTYPES[cfg.dtype]
    frames = frames.astype(dtype)
    vp = VaeParams(cfg, seed=seed)
    adam = Adam(vp.params, lr=lr)
    drops = dict(lr_schedule)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    rows = []
    for step in range(steps):
        adam.lr = drops.get(step, adam.lr)
        idx = rng.integers(0, len(frames), size=min(batch_size, len(frames)))
        xb = Tensor(frames[idx])
        eps = rng.standard_normal((len(idx), cfg.latent_dim)).astype(dtype)
        with Tape() as tape:
            mu, logvar = encode_graph(vp, xb)
            z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps)))
            x_hat = decode_graph(vp, z)
            total, breakdown = vae_loss_graph(xb, x_hat, mu, logvar, cfg.beta)
        adam.step(tape.backward(total))
        if step % log_every == 0 or step == steps - 1:
            rows.append((step, breakdown.total, breakdown.mse, breakdown.kl))
        if probe is not None and (step + 1) % probe_every == 0:
            if probe(vp, step + 1):
                break
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total", "mse", "kl"])
            writer.writerows(rows)
    vp.frozen = True
    return vp


def save_vae(vp: VaeParams, path: str | Path) -> None:
    meta = {"kind": "vae", "frozen": vp.frozen, "config": asdict(vp.cfg)}
    save_snapshot(path, vp.params.state_arrays(), meta)


def load_vae(path: str | Path) -> VaeParams:
    arrays, meta = load_snapshot(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"snapshot at {path} is not a vae checkpoint")
    raw = dict(meta["config"])
    for key in ("enc_channels", "dec_channels", "in_shape"):
        raw[key] = tuple(raw[key])
    vp = VaeParams(VaeConfig(**raw), seed=0)
    vp.params.load_arrays(arrays)
    vp.frozen = bool(meta.get("frozen", False))
    return vp
