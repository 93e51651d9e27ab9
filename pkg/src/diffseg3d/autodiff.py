"""Tensor kernels, Adam, finite-difference checking and parameter checkpoints.

Tensors are ``torch.Tensor`` values; torch's tape provides reverse-mode
differentiation. The functions here pin down the exact conventions the rest
of the package relies on (cross-correlation, align-corners=False trilinear
interpolation, max-subtracted softmax, G = min(8, C) group normalization).
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

CHECKPOINT_MAGIC = b"HDT1"


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def _spatial_triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or 3 values, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x`` [N,Cin,D,H,W] with ``weight`` [Cout,Cin,kd,kh,kw]."""
    if x.dim() != 5 or weight.dim() != 5:
        raise ShapeError(f"conv3d needs 5-D input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    stride = _spatial_triple(stride)
    padding = _spatial_triple(padding)
    if min(stride) < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    for ax in range(3):
        if weight.shape[2 + ax] > x.shape[2 + ax] + 2 * padding[ax]:
            raise ShapeError(
                f"kernel extent {tuple(weight.shape[2:])} exceeds padded input extent "
                f"{tuple(x.shape[2 + a] + 2 * padding[a] for a in range(3))}"
            )
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def trilinear_upsample(x: Tensor, size) -> Tensor:
    """Trilinear resize of [N,C,D,H,W] to ``size`` (align_corners=False)."""
    if x.dim() != 5:
        raise ShapeError(f"trilinear_upsample needs a 5-D tensor, got {tuple(x.shape)}")
    size = _spatial_triple(size)
    if any(s < e for s, e in zip(size, x.shape[2:])):
        raise ShapeError(f"target extents {size} smaller than input extents {tuple(x.shape[2:])}")
    if tuple(size) == tuple(x.shape[2:]):
        return x
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


def channel_softmax(logits: Tensor, dim: int = 1) -> Tensor:
    if logits.dim() < 1 or logits.shape[dim] < 1:
        raise ShapeError(f"channel_softmax needs at least one channel, got {tuple(logits.shape)}")
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def num_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    spatial = {tuple(t.shape[2:]) for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"cannot concatenate tensors with spatial extents {sorted(spatial)}")
    return torch.cat(tensors, dim=1)


def downsample2x(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Halve spatial extents with a stride-2, pad-1 convolution (3x3x3 kernel)."""
    return conv3d(x, weight, bias, stride=2, padding=1)


class Adam:
    """Adam with bias correction over a list of leaf tensors.

    Moments live in ``self.m`` / ``self.v`` and match parameter shapes. A NaN
    or infinite gradient aborts the step before any parameter is touched.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: list[Tensor] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ShapeError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {i} at step {self.step_count + 1} (lr={self.lr})")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def adam_step(params: list[Tensor], grads: list[Tensor], state: Adam) -> Adam:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ShapeError("Adam state was built for a different parameter list")
    state.step(grads)
    return state


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    Run in double precision; single precision is too noisy for this.
    """
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {tuple(out.shape)}")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)
    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = fn(flat.view_as(x)).item()
            flat[i] = orig - eps
            fm = fn(flat.view_as(x)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    err = (analytic - numeric).abs() / numeric.abs().clamp(min=1.0)
    return float(err.max())


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor]) -> None:
    """Write ``HDT1`` + (name, rank, extents, float32 payload) records."""
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf += struct.pack("<Q", len(raw)) + raw
        buf += struct.pack("<Q", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an HDT1 checkpoint")
    out: dict[str, Tensor] = {}
    pos = 4
    while pos < len(data):
        (nlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = math.prod(shape)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out
