"""The assembled pipeline: pair of images in, tamper probability map out.

forward() wiring (stage names appear in error messages):
    extract   shared FCN on both images
    encode    branch encoders -> Z1, Z2 (exposed for the MMD penalty)
    concat    Z3 = [Z1; Z2] along channels (2C)
    project   q/k/v/f fields from Z3
    coords    HR query grid + local neighborhood plan over the feature grid
    cslab     local attention aggregate + weights
    lfeb      frequency encoding aggregated with the same weights
    fuse      elementwise product -> learned linear 2C -> 2C
    split     per-branch HR embeddings (C each)
    decode    per-pixel residual MLPs (branch 1 and 2)
    reconstruct  bilinear upsample of each input + its residual
    diff      |hr1 - hr2| -> linear -> softmax -> (B, 2, hr_h, hr_w)
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .encoder import BranchEncoder, FeatureExtractor, concat_embeddings
from .maskgen import DiffHead, ResidualDecoder, split_embeddings, upsample_add
from .superres import (
    Cslab,
    FuseHead,
    LocalGrid,
    QkvfProjector,
    ScaleSpec,
    gather_center,
    gather_neighbors,
    lfeb,
    make_hr_coords,
    plan_local_grid,
)

KNOWN_VERSIONS = ("mmm-v1",)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64           # C: per-branch embedding width
    stride: int = 4              # FCN downsampling factor (power of two)
    grid: tuple[int, int] = (3, 3)  # CSLAB local neighborhood (odd extents)
    decoder_hidden: int = 64
    mmd_kernel: str = "linear"
    tie_encoders: bool = False
    version: str = "mmm-v1"      # gates the decoder architecture below

    def __post_init__(self):
        if self.version not in KNOWN_VERSIONS:
            raise ValueError(f"unknown model version {self.version!r}, known: {KNOWN_VERSIONS}")
        if self.channels < 2:
            raise ValueError(f"channels must be >= 2, got {self.channels}")
        if self.mmd_kernel not in ("linear", "rbf"):
            raise ValueError(f"mmd_kernel must be 'linear' or 'rbf', got {self.mmd_kernel!r}")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError(f"stride must be a power of two >= 1, got {self.stride}")
        LocalGrid(*self.grid)  # validates odd extents


class MmmOutput(NamedTuple):
    prob: torch.Tensor  # (B, 2, hr_h, hr_w), channel 1 = P(tampered)
    z1: torch.Tensor    # (B, C, h_f, w_f) branch-1 embedding (for the MMD term)
    z2: torch.Tensor
    hr1: torch.Tensor   # (B, 3, hr_h, hr_w) reconstructions
    hr2: torch.Tensor


@contextmanager
def _stage(name: str):
    try:
        yield
    except (ValueError, RuntimeError) as e:
        raise RuntimeError(f"stage '{name}': {e}") from e


class MmmModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.channels
        self.extractor = FeatureExtractor(c, self.config.stride)
        self.enc1 = BranchEncoder(c)
        self.enc2 = self.enc1 if self.config.tie_encoders else BranchEncoder(c)
        self.proj = QkvfProjector(2 * c)
        self.cslab = Cslab(2 * c)
        self.fuse = FuseHead(2 * c)
        self.dec1 = ResidualDecoder(c, self.config.decoder_hidden)
        self.dec2 = ResidualDecoder(c, self.config.decoder_hidden)
        self.diff = DiffHead()
        self.local_grid = LocalGrid(*self.config.grid)

    def encode_pair(self, original: torch.Tensor, tampered: torch.Tensor):
        """(Z1, Z2): branch embeddings of the two images."""
        with _stage("extract"):
            f1 = self.extractor(original)
            f2 = self.extractor(tampered)
        with _stage("encode"):
            return self.enc1(f1), self.enc2(f2)

    def forward(self, original: torch.Tensor, tampered: torch.Tensor,
                scale: ScaleSpec) -> MmmOutput:
        if original.shape != tampered.shape:
            raise ValueError(
                f"pair shapes differ: {tuple(original.shape)} vs {tuple(tampered.shape)}"
            )
        if original.ndim != 4 or original.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(original.shape)}")
        if (original.shape[-2], original.shape[-1]) != tuple(scale.lr_size):
            raise ValueError(
                f"scale.lr_size {scale.lr_size} does not match image dims "
                f"{tuple(original.shape[-2:])}"
            )
        z1, z2 = self.encode_pair(original, tampered)
        with _stage("concat"):
            z3 = concat_embeddings(z1, z2)
        with _stage("project"):
            bundle = self.proj(z3)
        with _stage("coords"):
            hr_h, hr_w = scale.hr_size
            coords = make_hr_coords(scale.lr_size, scale).reshape(-1, 2)
            feat_size = (z3.shape[-2], z3.shape[-1])
            plan = plan_local_grid(feat_size, coords, self.local_grid)
            delta = torch.from_numpy(plan.delta)
        with _stage("cslab"):
            q_c = gather_center(bundle.q, plan)
            k_n = gather_neighbors(bundle.k, plan)
            v_n = gather_neighbors(bundle.v, plan)
            attn, weights = self.cslab(q_c, k_n, v_n, delta)
        with _stage("lfeb"):
            f_n = gather_neighbors(bundle.f, plan)
            freq = lfeb(delta, f_n, weights)
        with _stage("fuse"):
            b = z3.shape[0]
            attn = attn.reshape(b, -1, hr_h, hr_w)
            freq = freq.reshape(b, -1, hr_h, hr_w)
            fused = self.fuse(attn, freq)
        with _stage("split"):
            z1_new, z2_new = split_embeddings(fused)
        with _stage("decode"):
            res1 = self.dec1(z1_new, scale.cell)
            res2 = self.dec2(z2_new, scale.cell)
        with _stage("reconstruct"):
            hr1 = upsample_add(original, res1, scale)
            hr2 = upsample_add(tampered, res2, scale)
        with _stage("diff"):
            prob = self.diff(hr1, hr2)
        return MmmOutput(prob=prob, z1=z1, z2=z2, hr1=hr1, hr2=hr2)
