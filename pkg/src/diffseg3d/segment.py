"""Predictive unsupervised segmentation f: x0 -> M and its three losses.

All losses take single-volume tensors: features ``h`` as [p, D, H, W] and soft
masks ``M`` as [K, D, H, W] whose channels sum to one per voxel.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .baselines import standardize_channels
from .synth import gamma_transform, sample_gamma
from .unet import UNet3D, UNet3DConfig, build_unet

log = logging.getLogger(__name__)

EMPTY_PART_MASS = 1e-8
DICE_GUARD = 1e-8


def _check_spatial(h: torch.Tensor, m: torch.Tensor) -> None:
    if h.shape[1:] != m.shape[1:]:
        raise ad.ShapeError(f"feature extents {tuple(h.shape[1:])} != mask extents {tuple(m.shape[1:])}")


def consistency(h: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Volume-normalized soft K-means objective of features ``h`` under mask ``m``.

    Parts with total mass below ``EMPTY_PART_MASS`` contribute nothing.
    """
    if h.dim() == m.dim() - 1:
        h = h[None]
    _check_spatial(h, m)
    p, k = h.shape[0], m.shape[0]
    hf = h.reshape(p, -1)
    mf = m.reshape(k, -1)
    n = hf.shape[1]
    mass = mf.sum(dim=1)
    live = mass >= EMPTY_PART_MASS
    centroids = (mf @ hf.T) / torch.where(live, mass, torch.ones_like(mass))[:, None]
    total = hf.new_zeros(())
    for j in range(k):
        if not bool(live[j]):
            continue
        d2 = ((hf - centroids[j][:, None]) ** 2).sum(dim=0)
        total = total + (mf[j] * d2).sum()
    return total / n


def loss_f(x0: torch.Tensor, m: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    if phi.shape[1:] != m.shape[1:] or tuple(x0.shape[-3:]) != tuple(m.shape[1:]):
        raise ad.ShapeError(
            f"extent mismatch: image {tuple(x0.shape[-3:])}, features {tuple(phi.shape[1:])}, mask {tuple(m.shape[1:])}"
        )
    return consistency(phi.detach(), m)


def loss_v(x0: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    x0 = x0.reshape(x0.shape[-3:])
    if tuple(x0.shape) != tuple(m.shape[1:]):
        raise ad.ShapeError(f"image extents {tuple(x0.shape)} != mask extents {tuple(m.shape[1:])}")
    return consistency(x0.detach()[None], m)


def loss_inv(ma: torch.Tensor, mb: torch.Tensor) -> torch.Tensor:
    """Soft Dice disagreement between two masks, averaged over parts."""
    if ma.shape != mb.shape:
        raise ad.ShapeError(f"mask shapes differ: {tuple(ma.shape)} vs {tuple(mb.shape)}")
    k = ma.shape[0]
    a = ma.reshape(k, -1)
    b = mb.reshape(k, -1)
    num = 2.0 * (a * b).sum(dim=1)
    # A floor rather than an additive guard, so identical masks give exactly 0.
    den = ((a * a).sum(dim=1) + (b * b).sum(dim=1)).clamp(min=DICE_GUARD)
    return 1.0 - (num / den).mean()


@dataclass(frozen=True)
class LossWeights:
    visual: float = 1.0
    feature: float = 1.0
    invariance: float = 1.0

    def __post_init__(self):
        for name in ("visual", "feature", "invariance"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


class SegModel(torch.nn.Module):
    """3D U-Net producing K logits, followed by a channel softmax."""

    def __init__(self, k: int, base_channels: int = 16, seed: int = 0):
        super().__init__()
        if k < 1:
            raise ValueError("K must be >= 1")
        self.k = k
        self.unet: UNet3D = build_unet(
            UNet3DConfig(base_channels=base_channels, time_embedding=False, out_channels=k), seed
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[N,1,D,H,W] -> soft masks [N,K,D,H,W]."""
        return ad.channel_softmax(self.unet(x), dim=1)

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None, None]
        return self(x)[0].numpy()

    @torch.no_grad()
    def predict_many(self, images: Sequence[np.ndarray], batch_size: int = 4) -> list[np.ndarray]:
        out = []
        for start in range(0, len(images), batch_size):
            chunk = [np.asarray(im, dtype=np.float32) for im in images[start : start + batch_size]]
            out.extend(self(torch.as_tensor(np.stack(chunk))[:, None]).numpy())
        return out


def total_loss(x0: torch.Tensor, phi: torch.Tensor, f: Callable[[torch.Tensor], torch.Tensor],
               transform: Callable[[torch.Tensor], torch.Tensor], weights: LossWeights):
    """Weighted sum of the three losses plus a per-term breakdown.

    ``x0`` is [1,1,D,H,W]; ``f`` maps it to soft masks [1,K,D,H,W].
    Terms with zero weight are not evaluated.
    """
    if weights.invariance:
        # One batched pass for both views; single-volume 3D convolutions are
        # several times slower per volume on CPU.
        both = f(torch.cat([x0, transform(x0)]))
        m, m_t = both[0], both[1]
    else:
        m = f(x0)[0]
    zero = m.new_zeros(())
    lv = loss_v(x0, m) if weights.visual else zero
    lf = loss_f(x0, m, phi) if weights.feature else zero
    li = loss_inv(m, m_t) if weights.invariance else zero
    total = weights.visual * lv + weights.feature * lf + weights.invariance * li
    return total, {"L_v": lv.item(), "L_f": lf.item(), "L_inv": li.item(), "total": total.item()}


@torch.no_grad()
def selection_score(predict: Callable[[np.ndarray], np.ndarray], volumes: Sequence[np.ndarray]) -> float:
    """Mean over volumes of the mean per-voxel max part probability."""
    if len(volumes) == 0:
        raise ValueError("selection score needs at least one volume")
    return float(np.mean([np.asarray(predict(v)).max(axis=0).mean() for v in volumes]))


@dataclass
class SegTrainConfig:
    k: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    gamma_range: tuple[float, float] = (0.9, 1.1)
    epochs: int = 100
    lr: float = 3e-4
    base_channels: int = 16
    standardize_features: bool = True
    seed: int = 0


@dataclass
class SegTrainResult:
    model: SegModel
    best_epoch: int
    best_score: float
    log: list[dict] = field(default_factory=list)


def prepare_features(phi: np.ndarray, standardize: bool) -> torch.Tensor:
    f = standardize_channels(phi) if standardize else np.asarray(phi, dtype=np.float64)
    return torch.from_numpy(f.astype(np.float32))


def train_segmentation(images: Sequence[np.ndarray], features: Sequence[np.ndarray],
                       config: SegTrainConfig,
                       checkpoint: Callable[[SegModel, int], None] | None = None) -> SegTrainResult:
    """One volume per Adam step; keep the epoch with the highest selection score."""
    if config.k < 2:
        raise ValueError("K must be >= 2 for segmentation training")
    if len(images) == 0 or len(images) != len(features):
        raise ValueError(f"need matching non-empty image/feature lists, got {len(images)} and {len(features)}")
    rng = np.random.default_rng(config.seed)
    model = SegModel(config.k, config.base_channels, seed=int(rng.integers(2**31)))
    xs = [torch.as_tensor(np.asarray(im, dtype=np.float32))[None, None] for im in images]
    phis = [prepare_features(p, config.standardize_features) for p in features]
    opt = ad.Adam(model.parameters(), lr=config.lr)

    def score() -> float:
        model.eval()
        s = selection_score(lambda mask: mask, model.predict_many(images))
        model.train()
        return s

    best_state = copy.deepcopy(model.state_dict())
    best_score = score()
    best_epoch = 0
    history: list[dict] = []
    if config.epochs == 0:
        history.append({"epoch": 0, "L_v": 0.0, "L_f": 0.0, "L_inv": 0.0, "total": 0.0, "selection": best_score})
    model.train()
    for epoch in range(1, config.epochs + 1):
        sums = {"L_v": 0.0, "L_f": 0.0, "L_inv": 0.0, "total": 0.0}
        for i in rng.permutation(len(xs)):
            gamma = sample_gamma(config.gamma_range, rng)
            loss, parts = total_loss(xs[i], phis[i], model, lambda x: gamma_transform(x, gamma), config.weights)
            if not math.isfinite(parts["total"]):
                model.load_state_dict(best_state)
                raise ad.DivergenceError(
                    f"segmentation loss became {parts['total']} at epoch {epoch}; best checkpoint "
                    f"(epoch {best_epoch}) restored"
                )
            if loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
            for key in sums:
                sums[key] += parts[key]
        s = score()
        row = {"epoch": epoch, **{k_: v / len(xs) for k_, v in sums.items()}, "selection": s}
        history.append(row)
        log.info("seg epoch %d total %.5f selection %.4f", epoch, row["total"], s)
        if s > best_score:
            best_score, best_epoch = s, epoch
            best_state = copy.deepcopy(model.state_dict())
        if checkpoint is not None:
            checkpoint(model, epoch)
    model.load_state_dict(best_state)
    model.eval()
    return SegTrainResult(model=model, best_epoch=best_epoch, best_score=best_score, log=history)
