"""Variational encoder/decoder with a locally-linear latent transition model.

Observations are embedded with a Gaussian encoder, the next latent is
predicted as ``A mu + B a + c`` with ``A = I + u v^T`` produced per state,
and the whole thing is trained jointly on augmented inputs while the decoder
reconstructs the unaugmented frames. The encoder mean defines the distance
used for reward shaping.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .diffnet import (Network, NetworkSpec, Optimizer, conv, dense, dynamics_spec, flatten, infer_shapes,
                      model_decoder_spec, reshape)
from .errors import ConfigurationError, TrainingError, UsageError

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0


@dataclass
class LatentGaussian:
    """Diagonal Gaussian; ``log_std`` is the log standard deviation per axis."""

    mu: torch.Tensor
    log_std: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(2.0 * self.log_std)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class LocalLinearParams:
    u: torch.Tensor  # (N, d)
    v: torch.Tensor  # (N, d)
    B: torch.Tensor  # (N, d, action_dim)
    c: torch.Tensor  # (N, d)

    def dense_A(self) -> torch.Tensor:
        """Materialized ``I + u v^T``; only for checks on small latents."""
        d = self.u.shape[-1]
        eye = torch.eye(d, dtype=self.u.dtype).expand(self.u.shape[0], d, d)
        return eye + self.u.unsqueeze(-1) * self.v.unsqueeze(-2)


class Augmenter:
    """Random crop from ``side`` to ``side - 2 * pad``; the identity view is the centre crop."""

    def __init__(self, pad: int, seed: int = 0):
        if pad < 0:
            raise ConfigurationError("crop pad must be non-negative")
        self.pad = pad
        self.rng = np.random.default_rng(seed)

    def output_side(self, side: int) -> int:
        return side - 2 * self.pad

    def __call__(self, images: torch.Tensor, rng: Optional[np.random.Generator] = None) -> torch.Tensor:
        """Independent crop per element of an (N, C, H, W) batch."""
        if self.pad == 0:
            return images
        rng = self.rng if rng is None else rng
        n, _, h, w = images.shape
        size_h, size_w = h - 2 * self.pad, w - 2 * self.pad
        offs = rng.integers(0, 2 * self.pad + 1, size=(n, 2))
        rows = torch.as_tensor(offs[:, 0])[:, None] + torch.arange(size_h)[None, :]
        cols = torch.as_tensor(offs[:, 1])[:, None] + torch.arange(size_w)[None, :]
        idx_n = torch.arange(n)[:, None, None]
        # (N, size_h, size_w, C) -> (N, C, size_h, size_w)
        out = images.permute(0, 2, 3, 1)[idx_n, rows[:, :, None], cols[:, None, :]]
        return out.permute(0, 3, 1, 2).contiguous()

    def identity(self, images: torch.Tensor) -> torch.Tensor:
        p = self.pad
        if p == 0:
            return images
        return images[:, :, p:-p, p:-p]


def to_chw(images) -> torch.Tensor:
    """(N, H, W, C) float array in [0, 1] to an (N, C, H, W) tensor."""
    t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def sample_latent(g: LatentGaussian, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterized draw ``mu + std * eta``."""
    eta = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype)
    return g.mu + torch.exp(g.log_std) * eta


def predict_next(g: LatentGaussian, action: torch.Tensor, params: LocalLinearParams) -> LatentGaussian:
    """Propagate ``N(mu, Sigma)`` through ``z' = A z + B a + c`` with ``A = I + u v^T``.

    The covariance ``A Sigma A^T`` is projected onto its diagonal:
    ``s_k + 2 u_k v_k s_k + u_k^2 sum_j v_j^2 s_j``.
    """
    u, v = params.u, params.v
    s = g.var
    mu = g.mu + u * (v * g.mu).sum(-1, keepdim=True) + torch.einsum("nda,na->nd", params.B, action) + params.c
    quad = (v * v * s).sum(-1, keepdim=True)
    var = s + 2.0 * u * v * s + u * u * quad
    if not torch.isfinite(mu).all() or not torch.isfinite(var).all():
        raise TrainingError("non-finite latent transition parameters")
    log_std = 0.5 * torch.log(var.clamp_min(np.exp(2 * LOG_STD_MIN)))
    return LatentGaussian(mu, log_std)


def kl_gaussians(q1: LatentGaussian, q2: LatentGaussian) -> torch.Tensor:
    """KL(q1 || q2) for diagonal Gaussians, summed over the last axis."""
    if q1.mu.shape[-1] != q2.mu.shape[-1]:
        raise UsageError(f"latent dimension mismatch: {q1.mu.shape[-1]} vs {q2.mu.shape[-1]}")
    var_ratio = torch.exp(2.0 * (q1.log_std - q2.log_std))
    maha = (q1.mu - q2.mu) ** 2 * torch.exp(-2.0 * q2.log_std)
    return 0.5 * (var_ratio + maha - 1.0).sum(-1) + (q2.log_std - q1.log_std).sum(-1)


def desk_encoder_spec(in_channels: int, crop: int, latent_dim: int, channels: int = 16,
                      hidden: int = 128) -> NetworkSpec:
    layers = [conv(in_channels, channels, 3, 2, activation="relu", norm=True),
              conv(channels, channels, 3, 2, activation="relu", norm=True), flatten()]
    n = infer_shapes(NetworkSpec((in_channels, crop, crop), tuple(layers)))[-1][0]
    layers += [dense(n, hidden, "relu"), dense(hidden, hidden, "relu"), dense(hidden, 2 * latent_dim)]
    return NetworkSpec((in_channels, crop, crop), tuple(layers))


def desk_decoder_spec(latent_dim: int, out_channels: int, side: int, hidden: int = 128) -> NetworkSpec:
    """Fully connected decoder: two hidden layers, then one dense map onto every pixel."""
    return NetworkSpec((latent_dim,), (dense(latent_dim, hidden, "relu"), dense(hidden, hidden, "relu"),
                                       dense(hidden, out_channels * side * side),
                                       reshape(out_channels, side, side)))


@dataclass
class ModelConfig:
    latent_dim: int = 8
    action_dim: int = 2
    side: int = 48
    channels: int = 3
    crop_pad: int = 4
    dynamics_weight: float = 1.0
    enc_channels: int = 16
    enc_hidden: int = 128
    dec_channels: int = 16
    dec_upsample: int = 2
    dyn_hidden: int = 128
    lr: float = 4e-3
    batch_size: int = 64
    use_dynamics: bool = True
    augment: bool = True
    recon_std: float = 1.0  # fixed decoder standard deviation
    decoder: str = "conv"  # "conv" (upsampling) or "mlp"
    dec_hidden: int = 128


class LatentModel(nn.Module):
    """Encoder E, decoder D and transition model M trained jointly."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        crop = cfg.side - 2 * cfg.crop_pad
        if crop <= 0:
            raise ConfigurationError("crop pad leaves no image")
        self.encoder = Network(
            desk_encoder_spec(cfg.channels, crop, cfg.latent_dim, cfg.enc_channels, cfg.enc_hidden), seed)
        if cfg.recon_std <= 0:
            raise ConfigurationError("recon_std must be positive")
        if cfg.decoder == "conv":
            dec_spec = model_decoder_spec(cfg.latent_dim, cfg.channels, cfg.side, cfg.dec_channels,
                                          cfg.dec_upsample, cfg.dec_hidden)
        elif cfg.decoder == "mlp":
            dec_spec = desk_decoder_spec(cfg.latent_dim, cfg.channels, cfg.side, cfg.dec_hidden)
        else:
            raise ConfigurationError(f"unknown decoder kind {cfg.decoder!r}")
        self.decoder = Network(dec_spec, seed + 1)
        self.dynamics = Network(dynamics_spec(cfg.latent_dim, cfg.action_dim, cfg.dyn_hidden), seed + 2)
        self.augmenter = Augmenter(cfg.crop_pad, seed + 3)
        self.generator = torch.Generator().manual_seed(seed + 4)
        self.optimizer = Optimizer(self.parameters(), cfg.lr)
        self.version = 0

    @classmethod
    def from_networks(cls, cfg: ModelConfig, encoder: Network, decoder: Network, dynamics: Network,
                      seed: int = 0) -> "LatentModel":
        model = cls.__new__(cls)
        nn.Module.__init__(model)
        model.cfg = cfg
        model.encoder, model.decoder, model.dynamics = encoder, decoder, dynamics
        model.augmenter = Augmenter(cfg.crop_pad, seed)
        model.generator = torch.Generator().manual_seed(seed)
        model.optimizer = Optimizer(model.parameters(), cfg.lr)
        model.version = 0
        return model

    # -- pieces ------------------------------------------------------------
    def encode(self, x_aug: torch.Tensor) -> LatentGaussian:
        out = self.encoder(x_aug)
        d = self.cfg.latent_dim
        return LatentGaussian(out[:, :d], out[:, d:].clamp(LOG_STD_MIN, LOG_STD_MAX))

    def transition_params(self, z: torch.Tensor) -> LocalLinearParams:
        d, a = self.cfg.latent_dim, self.cfg.action_dim
        out = self.dynamics(z)
        return LocalLinearParams(out[:, :d], out[:, d:2 * d], out[:, 2 * d:2 * d + d * a].reshape(-1, d, a),
                                 out[:, 2 * d + d * a:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def view(self, images: torch.Tensor, augment: bool, rng=None) -> torch.Tensor:
        return self.augmenter(images, rng) if augment else self.augmenter.identity(images)

    # -- objective ---------------------------------------------------------
    def loss_terms(self, obs: torch.Tensor, action: torch.Tensor, next_obs: torch.Tensor,
                   augment: Optional[bool] = None, rng=None) -> Dict[str, torch.Tensor]:
        """Batch-mean loss terms for (N, C, H, W) observations.

        Reconstruction is a Gaussian likelihood with fixed standard deviation
        ``cfg.recon_std``: half the summed squared error over ``recon_std**2``,
        constants dropped.
        """
        w = 0.5 / self.cfg.recon_std ** 2
        augment = self.cfg.augment if augment is None else augment
        q = self.encode(self.view(obs, augment, rng))
        z = sample_latent(q, self.generator)
        recon = w * ((self.decode(z) - obs) ** 2).flatten(1).sum(1)
        prior = LatentGaussian(torch.zeros_like(q.mu), torch.zeros_like(q.log_std))
        prior_kl = kl_gaussians(q, prior)
        terms = {"recon": recon.mean(), "prior_kl": prior_kl.mean()}
        total = recon + prior_kl
        if self.cfg.use_dynamics:
            q_next = self.encode(self.view(next_obs, augment, rng))
            pred = predict_next(q, action, self.transition_params(z))
            z_hat = sample_latent(pred, self.generator)
            recon_next = w * ((self.decode(z_hat) - next_obs) ** 2).flatten(1).sum(1)
            dyn_kl = kl_gaussians(pred, q_next)
            total = total + recon_next + self.cfg.dynamics_weight * dyn_kl
            terms.update(recon_next=recon_next.mean(), dynamics_kl=dyn_kl.mean())
        terms["loss"] = total.mean()
        return terms

    def model_loss(self, obs, action, next_obs, augment=None, rng=None) -> torch.Tensor:
        terms = self.loss_terms(obs, action, next_obs, augment, rng)
        loss = terms["loss"]
        if not torch.isfinite(loss):
            detail = {k: float(v) for k, v in terms.items()}
            raise TrainingError(f"non-finite latent model loss: {detail}")
        return loss

    def update(self, obs, action, next_obs, rng=None) -> float:
        loss = self.model_loss(obs, action, next_obs, rng=rng)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return loss.item()

    # -- distance ----------------------------------------------------------
    @torch.no_grad()
    def embed(self, images, augment: bool = False, rng=None, chunk: int = 256) -> np.ndarray:
        """Encoder means for (N, H, W, C) images; identity view unless ``augment``."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        outs = []
        for k in range(0, len(images), chunk):
            x = to_chw(images[k:k + chunk])
            outs.append(self.encode(self.view(x, augment, rng)).mu.numpy())
        if not outs:
            return np.zeros((0, self.cfg.latent_dim), np.float32)
        return np.concatenate(outs)

    def adm_distance(self, o1, o2, augment: bool = False, rng=None) -> float:
        e = self.embed(np.stack([o1, o2]), augment, rng)
        return float(np.linalg.norm(e[0] - e[1]))


def train_until_converged(model: LatentModel, sample_fn, max_updates: int = 2000, min_updates: int = 100,
                          window: int = 50, average: int = 20, tol: float = 0.01) -> Dict[str, float]:
    """Run updates until the ``average``-step moving-average loss improves by < ``tol`` over ``window`` updates.

    ``sample_fn()`` returns ``(obs, action, next_obs)`` as (N, H, W, C)/(N, A) arrays.
    """
    recent = deque(maxlen=average)
    history = []
    losses = []
    n = 0
    for n in range(1, max_updates + 1):
        obs, act, nxt = sample_fn()
        losses.append(model.update(to_chw(obs), torch.as_tensor(act, dtype=torch.float32), to_chw(nxt)))
        recent.append(losses[-1])
        history.append(sum(recent) / len(recent))
        if n >= max(min_updates, window + average):
            old, new = history[-1 - window], history[-1]
            if (old - new) < tol * abs(old):
                break
    model.version += 1
    return {"updates": n, "loss": history[-1] if history else float("nan"), "version": model.version}
