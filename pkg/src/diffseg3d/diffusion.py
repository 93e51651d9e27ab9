"""Cosine-schedule DDPM over volumes with an x0-predicting U-Net.

The denoiser is trained with an L1 loss on the clean volume. Its decoder
stages double as a per-voxel feature extractor: noise a clean volume to step
``t``, run the network once, upsample each requested stage to full resolution
and concatenate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .unet import UNet3D, UNet3DConfig, build_unet

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Tables indexed by timestep 0..T; index 0 holds alpha_bar_0 = 1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.clip(1.0 - ratio, 0.0, max_beta)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(
        T=T,
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bars=alpha_bars,
    )


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule | None = None, alpha_bar: float | None = None):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps (no clamping)."""
    if alpha_bar is None:
        if schedule is None:
            raise ValueError("need a schedule or an explicit alpha_bar")
        if not 1 <= t <= schedule.T:
            raise ValueError(f"timestep {t} outside 1..{schedule.T}")
        alpha_bar = float(schedule.alpha_bars[t])
    if tuple(eps.shape) != tuple(x0.shape):
        raise ad.ShapeError(f"noise shape {tuple(eps.shape)} != volume shape {tuple(x0.shape)}")
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def _alpha_bar_tensor(schedule: NoiseSchedule, t: torch.Tensor, dtype) -> torch.Tensor:
    return torch.as_tensor(schedule.alpha_bars, dtype=dtype)[t].reshape(-1, 1, 1, 1, 1)


@dataclass
class DiffusionModel:
    net: UNet3D
    schedule: NoiseSchedule
    loss_history: list[float] = field(default_factory=list)  # per optimizer step
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def config(self) -> UNet3DConfig:
        return self.net.config


def new_diffusion_model(unet_config: UNet3DConfig, T: int = 250, seed: int = 0) -> DiffusionModel:
    if not unet_config.time_embedding or unet_config.out_channels != 1 or unet_config.in_channels != 1:
        raise ValueError("denoiser needs a time-conditioned 1 -> 1 channel U-Net")
    net = build_unet(unet_config, seed)
    # Start from x0_hat = 0: a random output layer begins with an L1 error
    # several times the data scale and spends most of a short run undoing it.
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()
    return DiffusionModel(net=net, schedule=cosine_schedule(T))


def denoise_forward(model: DiffusionModel, x_t: torch.Tensor, t) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if ((t < 1) | (t > model.schedule.T)).any():
        raise ValueError(f"timestep outside 1..{model.schedule.T}: {t.tolist()}")
    return model.net(x_t, t, return_stages=True)


@dataclass
class DiffusionTrainConfig:
    epochs: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0


def train_diffusion(volumes: Sequence[np.ndarray], model: DiffusionModel, config: DiffusionTrainConfig,
                    checkpoint: Callable[[DiffusionModel, int], None] | None = None) -> DiffusionModel:
    """Minimize mean |x0_hat - x0| over random timesteps with Adam."""
    if len(volumes) == 0:
        raise ValueError("train split is empty")
    data = torch.from_numpy(np.stack([np.asarray(v, dtype=np.float32) for v in volumes]))[:, None]
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    opt = ad.Adam(model.net.parameters(), lr=config.lr)
    T = model.schedule.T
    model.net.train()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            x0 = data[order[start : start + config.batch_size]]
            t = torch.randint(1, T + 1, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            ab = _alpha_bar_tensor(model.schedule, t, x0.dtype)
            x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
            pred, _ = denoise_forward(model, x_t, t)
            loss = ad.l1_loss(pred, x0)
            value = loss.item()
            if not math.isfinite(value):
                raise ad.DivergenceError(
                    f"diffusion loss became {value} at step {opt.step_count + 1} (epoch {epoch}, lr={config.lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.loss_history.append(value)
            batch_losses.append(value)
        model.epoch_losses.append(float(np.mean(batch_losses)))
        if epoch % 50 == 0 or epoch == config.epochs:
            log.info("diffusion epoch %d loss %.5f", epoch, model.epoch_losses[-1])
        if checkpoint is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint(model, epoch)
    model.net.eval()
    return model


@torch.no_grad()
def sample(model: DiffusionModel, shape, seed: int) -> np.ndarray:
    """Ancestral sampling with the clamped x0 parameterization."""
    requested = tuple(shape)
    shape = (1, 1) + requested if len(requested) == 3 else requested
    gen = torch.Generator().manual_seed(seed)
    sch = model.schedule
    x = torch.randn(shape, generator=gen)
    for t in range(sch.T, 0, -1):
        x0_hat, _ = denoise_forward(model, x, t)
        x0_hat = x0_hat.clamp(-1.0, 2.0)
        ab_t, ab_prev = sch.alpha_bars[t], sch.alpha_bars[t - 1]
        beta_t, alpha_t = sch.betas[t], sch.alphas[t]
        c0 = math.sqrt(ab_prev) * beta_t / (1 - ab_t)
        ct = math.sqrt(alpha_t) * (1 - ab_prev) / (1 - ab_t)
        mean = c0 * x0_hat + ct * x
        if t > 1:
            var = beta_t * (1 - ab_prev) / (1 - ab_t)
            x = mean + math.sqrt(var) * torch.randn(shape, generator=gen)
        else:
            x = mean
    return x.reshape(requested).numpy()


@torch.no_grad()
def extract_features(model: DiffusionModel, x0: np.ndarray, t: int = 25, stages: Sequence[int] = (1, 2, 3),
                     seed: int = 0) -> np.ndarray:
    """Per-voxel features [p, D, H, W] from the selected decoder stages."""
    stages = sorted(set(stages))
    if not stages:
        raise ValueError("at least one stage must be selected")
    if any(s not in (1, 2, 3) for s in stages):
        raise ValueError(f"stages must be a subset of {{1, 2, 3}}, got {stages}")
    x0_t = torch.as_tensor(np.asarray(x0, dtype=np.float32))[None, None]
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0_t.shape, generator=gen)
    x_t = forward_noise(x0_t, t, eps, model.schedule)
    _, acts = denoise_forward(model, x_t, t)
    size = x0_t.shape[2:]
    feats = [ad.trilinear_upsample(acts[s], size) for s in stages]
    return ad.concat_channels(feats)[0].numpy()


def feature_channels(config: UNet3DConfig, stages: Sequence[int]) -> int:
    return sum(config.stage_channels[s] for s in set(stages))
