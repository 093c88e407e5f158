"""Arbitrary-scale decoding: coordinates, local neighborhoods, CSLAB and LFEB.

Coordinate convention: every axis of length N maps its pixel centers to
    coord(i) = (2*i + 1 - N) / N,   i = 0..N-1
which is -1 + (2i+1)/N written in an exactly antisymmetric form, so grids are
bit-exact symmetric about 0. Coordinate channel 0 is the vertical (H) axis,
channel 1 the horizontal (W) axis. All coordinate math is float64.

Nearest low-res pixel of a query coordinate x uses the cell-containment rule
    i* = clamp(floor((x + 1) * N / 2), 0, N - 1)
(pixel centers never lie on cell boundaries, so there are no ties).

The cross-scale local attention block (CSLAB) scores a query embedding against
the local G_h x G_w key neighborhood:
    w = softmax_over_grid( <q, k> / sqrt(2C) + b(delta) )
with b a learned linear map R^2 -> R over the query-to-neighbor offset delta,
and aggregates values with w. The local frequency-encoding block (LFEB) turns
per-neighbor frequency vectors f (C interleaved (f_h, f_w) pairs, f_h at even
channels) into phases phi_c = f_h,c * delta_h + f_w,c * delta_w and the
encoding [cos(pi*phi), sin(pi*phi)] in R^{2C}, aggregated with the *same*
attention weights. The two aggregates are fused by elementwise product followed
by a learned linear map R^{2C} -> R^{2C}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn


# ---------------------------------------------------------------------------
# coordinates and scale


def axis_coords(n: int) -> np.ndarray:
    """Pixel-center coordinates of an axis of length n, float64 in (-1, 1)."""
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    return (2.0 * i + 1.0 - n) / n


def nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    """Containment rule: index of the LR cell holding each coordinate."""
    idx = np.floor((np.asarray(coords, dtype=np.float64) + 1.0) * n / 2.0).astype(np.int64)
    return np.clip(idx, 0, n - 1)


@dataclass(frozen=True)
class ScaleSpec:
    """Target scale r = (r_h, r_w) >= 1 over a base grid lr_size = (H, W).

    hr_size = (floor(r_h*H), floor(r_w*W)); cell = (2/hr_h, 2/hr_w), the height
    and width of one HR pixel in [-1, 1] coordinates.
    """

    r: tuple[float, float]
    lr_size: tuple[int, int]

    def __post_init__(self):
        rh, rw = self.r
        h, w = self.lr_size
        if rh < 1.0 or rw < 1.0:
            raise ValueError(f"scale factors must be >= 1, got {self.r}")
        if h < 1 or w < 1:
            raise ValueError(f"lr_size must be positive, got {self.lr_size}")

    @property
    def hr_size(self) -> tuple[int, int]:
        return (int(math.floor(self.r[0] * self.lr_size[0])),
                int(math.floor(self.r[1] * self.lr_size[1])))

    @property
    def cell(self) -> tuple[float, float]:
        hh, hw = self.hr_size
        return (2.0 / hh, 2.0 / hw)


def make_hr_coords(lr_size: tuple[int, int], scale: ScaleSpec) -> np.ndarray:
    """(hr_h, hr_w, 2) float64 grid of HR pixel-center coordinates."""
    if tuple(lr_size) != tuple(scale.lr_size):
        raise ValueError(f"lr_size {lr_size} does not match scale.lr_size {scale.lr_size}")
    hr_h, hr_w = scale.hr_size
    ys = axis_coords(hr_h)
    xs = axis_coords(hr_w)
    grid = np.empty((hr_h, hr_w, 2), dtype=np.float64)
    grid[:, :, 0] = ys[:, None]
    grid[:, :, 1] = xs[None, :]
    return grid


# ---------------------------------------------------------------------------
# local neighborhoods


@dataclass(frozen=True)
class LocalGrid:
    g_h: int = 3
    g_w: int = 3

    def __post_init__(self):
        for g in (self.g_h, self.g_w):
            if g < 1 or g % 2 == 0:
                raise ValueError(f"grid extents must be odd and >= 1, got {(self.g_h, self.g_w)}")

    @property
    def count(self) -> int:
        return self.g_h * self.g_w


class SamplePlan(NamedTuple):
    """Index plan for one (lr_size, query set, grid) combination.

    nearest:   (Q,)      flat LR index of each query's containing cell
    neighbors: (Q, G2)   flat LR indices of the (border-clamped) local grid
    delta:     (Q, G2, 2) float64 query coord minus neighbor center coord
    """

    nearest: np.ndarray
    neighbors: np.ndarray
    delta: np.ndarray


def plan_local_grid(lr_size: tuple[int, int], coords: np.ndarray,
                    grid: LocalGrid = LocalGrid()) -> SamplePlan:
    """Resolve queries to nearest cells, clamped local grids, and offsets.

    coords is (Q, 2) float64 in [-1, 1], channel 0 = vertical axis.
    Out-of-range coordinates (beyond the clamp margin of one cell) are an error.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must be (Q, 2), got {coords.shape}")
    if coords.size and (coords.min() < -1.0 or coords.max() > 1.0):
        raise ValueError("query coordinates must lie in [-1, 1]")
    h, w = lr_size
    iy = nearest_index(coords[:, 0], h)
    ix = nearest_index(coords[:, 1], w)
    oy = np.arange(grid.g_h, dtype=np.int64) - grid.g_h // 2
    ox = np.arange(grid.g_w, dtype=np.int64) - grid.g_w // 2
    ny = np.clip(iy[:, None] + oy[None, :], 0, h - 1)  # (Q, g_h)
    nx = np.clip(ix[:, None] + ox[None, :], 0, w - 1)  # (Q, g_w)
    flat = (ny[:, :, None] * w + nx[:, None, :]).reshape(coords.shape[0], grid.count)
    cy = axis_coords(h)[ny]  # (Q, g_h)
    cx = axis_coords(w)[nx]  # (Q, g_w)
    q = coords.shape[0]
    full = (q, grid.g_h, grid.g_w)
    dy = np.broadcast_to((coords[:, 0, None] - cy)[:, :, None], full)
    dx = np.broadcast_to((coords[:, 1, None] - cx)[:, None, :], full)
    delta = np.stack([dy, dx], axis=-1).reshape(q, grid.count, 2)
    return SamplePlan(nearest=iy * w + ix, neighbors=flat, delta=delta)


def gather_center(field: torch.Tensor, plan: SamplePlan) -> torch.Tensor:
    """(B, C, H, W) + plan -> (B, C, Q) values at each query's nearest cell."""
    flat = field.flatten(-2)
    idx = torch.from_numpy(plan.nearest).to(field.device)
    return flat[..., idx]


def gather_neighbors(field: torch.Tensor, plan: SamplePlan) -> torch.Tensor:
    """(B, C, H, W) + plan -> (B, C, Q, G2) values over each local grid."""
    flat = field.flatten(-2)
    idx = torch.from_numpy(plan.neighbors).to(field.device)
    return flat[..., idx]


def local_sample(field: torch.Tensor, coords: np.ndarray,
                 grid: LocalGrid = LocalGrid()) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather local neighborhoods and their offsets for a query set.

    Returns (values (B, C, Q, G2), delta (Q, G2, 2) float64 tensor).
    """
    if field.ndim != 4:
        raise ValueError(f"field must be (B, C, H, W), got {tuple(field.shape)}")
    plan = plan_local_grid((field.shape[-2], field.shape[-1]), coords, grid)
    return gather_neighbors(field, plan), torch.from_numpy(plan.delta)


# ---------------------------------------------------------------------------
# learned blocks


class LatentBundle(NamedTuple):
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    f: torch.Tensor


class QkvfProjector(nn.Module):
    """Four separate 3x3 convs mapping the concatenated embedding (2C channels)
    to query / key / value / frequency fields, each 2C channels."""

    def __init__(self, channels2: int):
        super().__init__()
        if channels2 < 2 or channels2 % 2:
            raise ValueError(f"channels2 must be even and >= 2, got {channels2}")
        self.channels2 = channels2
        self.q = nn.Conv2d(channels2, channels2, 3, padding=1)
        self.k = nn.Conv2d(channels2, channels2, 3, padding=1)
        self.v = nn.Conv2d(channels2, channels2, 3, padding=1)
        self.f = nn.Conv2d(channels2, channels2, 3, padding=1)

    def forward(self, z3: torch.Tensor) -> LatentBundle:
        if z3.ndim != 4 or z3.shape[1] != self.channels2:
            raise ValueError(f"expected (B, {self.channels2}, H, W), got {tuple(z3.shape)}")
        return LatentBundle(self.q(z3), self.k(z3), self.v(z3), self.f(z3))


class Cslab(nn.Module):
    """Cross-scale local attention: softmax over the local grid of scaled dot
    products plus a learned linear position bias b(delta)."""

    def __init__(self, channels2: int):
        super().__init__()
        self.channels2 = channels2
        self.bias = nn.Linear(2, 1, bias=False)  # b: R^2 -> R, pure linear map

    def forward(self, q_center: torch.Tensor, k_nbr: torch.Tensor, v_nbr: torch.Tensor,
                delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """q_center (B, 2C, Q); k_nbr/v_nbr (B, 2C, Q, G2); delta (Q, G2, 2).

        Returns (aggregate (B, 2C, Q), weights (B, Q, G2)); weights sum to 1
        over the last axis.
        """
        if q_center.shape[-2] != self.channels2:
            raise ValueError(f"expected {self.channels2} channels, got {q_center.shape[-2]}")
        if k_nbr.shape != v_nbr.shape or k_nbr.shape[:-1] != q_center.shape:
            raise ValueError(
                f"inconsistent shapes: q {tuple(q_center.shape)}, k {tuple(k_nbr.shape)}, "
                f"v {tuple(v_nbr.shape)}"
            )
        d = delta.to(dtype=q_center.dtype, device=q_center.device)
        scores = torch.einsum("bcq,bcqg->bqg", q_center, k_nbr) / math.sqrt(self.channels2)
        scores = scores + self.bias(d).squeeze(-1)  # (Q, G2) broadcasts over B
        weights = scores.softmax(dim=-1)
        out = torch.einsum("bqg,bcqg->bcq", weights, v_nbr)
        return out, weights


def lfeb_encode(delta: torch.Tensor, f_nbr: torch.Tensor) -> torch.Tensor:
    """Frequency encoding of offsets: f_nbr (B, 2C, Q, G2) interleaved
    (f_h, f_w) pairs, delta (Q, G2, 2) -> (B, 2C, Q, G2) = [cos(pi*phi); sin(pi*phi)].
    """
    if f_nbr.shape[1] % 2:
        raise ValueError(f"frequency field needs even channels, got {f_nbr.shape[1]}")
    d = delta.to(dtype=f_nbr.dtype, device=f_nbr.device)
    f_h = f_nbr[:, 0::2]  # (B, C, Q, G2)
    f_w = f_nbr[:, 1::2]
    phase = f_h * d[..., 0] + f_w * d[..., 1]
    return torch.cat([torch.cos(math.pi * phase), torch.sin(math.pi * phase)], dim=1)


def lfeb(delta: torch.Tensor, f_nbr: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Aggregate the frequency encoding with the CSLAB weights -> (B, 2C, Q)."""
    enc = lfeb_encode(delta, f_nbr)
    if weights.shape != (enc.shape[0], enc.shape[2], enc.shape[3]):
        raise ValueError(
            f"weights {tuple(weights.shape)} do not match encoding {tuple(enc.shape)}"
        )
    return torch.einsum("bqg,bcqg->bcq", weights, enc)


class FuseHead(nn.Module):
    """fuse(a, b) = W(a * b) + bias, a learned per-position linear map on 2C channels."""

    def __init__(self, channels2: int):
        super().__init__()
        self.channels2 = channels2
        self.proj = nn.Conv2d(channels2, channels2, 1)

    def forward(self, attn_out: torch.Tensor, freq_out: torch.Tensor) -> torch.Tensor:
        if attn_out.shape != freq_out.shape:
            raise ValueError(f"shapes differ: {tuple(attn_out.shape)} vs {tuple(freq_out.shape)}")
        if attn_out.shape[1] != self.channels2:
            raise ValueError(f"expected {self.channels2} channels, got {attn_out.shape[1]}")
        return self.proj(attn_out * freq_out)
