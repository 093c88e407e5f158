"""Feature extraction and branch embedding.

A shared strided FCN maps each RGB image to a C-channel feature grid at 1/stride
resolution; two branch encoders (independent parameters by default) specialize
the shared features per branch. The branch embeddings are aligned during
training with a maximum-mean-discrepancy penalty and concatenated along the
channel axis for the super-resolution stage.

No normalization layers anywhere: the stack is pure conv/ReLU, so features are
translation-covariant at stride granularity (interior crops shift exactly with
the input).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise RuntimeError(f"non-finite activations in {where} (corrupt weights or inputs?)")
    return t


class FeatureExtractor(nn.Module):
    """Strided FCN: (B, 3, H, W) -> (B, C, H/stride, W/stride).

    stride must be a power of two; each factor of two is one stride-2 conv.
    Input dims must be divisible by stride (use pad_to_stride first otherwise).
    """

    def __init__(self, channels: int = 64, stride: int = 4):
        super().__init__()
        if stride < 1 or (stride & (stride - 1)) != 0:
            raise ValueError(f"stride must be a power of two >= 1, got {stride}")
        if channels < 2:
            raise ValueError(f"channels must be >= 2, got {channels}")
        self.channels = channels
        self.stride = stride
        mid = max(channels // 2, 8)
        layers: list[nn.Module] = []
        c_prev = 3
        n_down = stride.bit_length() - 1
        for i in range(n_down):
            c_out = mid if i < n_down - 1 else channels
            layers += [nn.Conv2d(c_prev, c_out, 3, stride=2, padding=1), nn.ReLU()]
            c_prev = c_out
        if n_down == 0:
            layers += [nn.Conv2d(c_prev, channels, 3, padding=1), nn.ReLU()]
            c_prev = channels
        layers += [
            nn.Conv2d(c_prev, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"input dims {h}x{w} not divisible by stride {self.stride}; "
                f"pad with pad_to_stride first"
            )
        return _check_finite(self.net(images), "FeatureExtractor")


def pad_to_stride(images: torch.Tensor, stride: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad bottom/right so spatial dims divide stride; returns (padded, (ph, pw))."""
    h, w = images.shape[-2:]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return images, (0, 0)
    return F.pad(images, (0, pw, 0, ph), mode="replicate"), (ph, pw)


class BranchEncoder(nn.Module):
    """Two 3x3 convs refining shared features into a branch embedding (same dims)."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) features, got {tuple(features.shape)}")
        return _check_finite(self.net(features), "BranchEncoder")


def mmd(a: torch.Tensor, b: torch.Tensor, kernel: str = "linear") -> torch.Tensor:
    """Maximum mean discrepancy between two embedding samples.

    The last axis is the channel/feature axis; all leading axes are flattened
    into samples. linear kernel: squared norm of the sample-mean difference
    (the closed form of MMD^2 with k(x,y)=<x,y>). rbf: biased V-statistic with
    the median heuristic bandwidth, clamped at zero against float error.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"channel dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    x = a.reshape(-1, a.shape[-1])
    y = b.reshape(-1, b.shape[-1])
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty embedding passed to mmd")
    if kernel == "linear":
        d = x.mean(dim=0) - y.mean(dim=0)
        return (d * d).sum()
    if kernel == "rbf":
        z = torch.cat([x, y], dim=0)
        sq = torch.cdist(z, z, compute_mode="donot_use_mm_for_euclid_dist") ** 2
        n = z.shape[0]
        off_diag = sq[~torch.eye(n, dtype=torch.bool, device=z.device)]
        med = off_diag.median()
        gamma = 1.0 / (2.0 * med) if float(med) > 0 else torch.ones((), dtype=z.dtype)
        nx = x.shape[0]
        kxx = torch.exp(-gamma * sq[:nx, :nx]).mean()
        kyy = torch.exp(-gamma * sq[nx:, nx:]).mean()
        kxy = torch.exp(-gamma * sq[:nx, nx:]).mean()
        return (kxx + kyy - 2 * kxy).clamp_min(0.0)
    raise ValueError(f"unknown kernel {kernel!r}, expected 'linear' or 'rbf'")


def embedding_mmd(z1: torch.Tensor, z2: torch.Tensor, kernel: str = "linear") -> torch.Tensor:
    """mmd() over channel-first feature grids (..., C, H, W): each spatial
    position is one sample vector in R^C."""
    if z1.shape != z2.shape:
        raise ValueError(f"embedding shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if z1.ndim < 3:
        raise ValueError(f"expected (..., C, H, W), got {tuple(z1.shape)}")
    return mmd(z1.movedim(-3, -1), z2.movedim(-3, -1), kernel=kernel)


def concat_embeddings(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate two equal-shape embeddings; z1 occupies the first C
    channels (ordering is part of the contract: branch 1 = original)."""
    if z1.shape != z2.shape:
        raise ValueError(f"embedding shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if z1.ndim < 3:
        raise ValueError(f"expected (..., C, H, W), got {tuple(z1.shape)}")
    return torch.cat([z1, z2], dim=-3)
