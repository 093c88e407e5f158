"""Mask generation: per-branch decoding, reconstruction, difference head,
thresholding.

The fused HR embedding (2C channels) splits back into per-branch halves
(first C channels belong to branch 1 / original). Each branch decoder is a
per-pixel MLP over [embedding ; cell] that emits an RGB *residual* in
normalized [0,1] image space; reconstruction adds it to the bilinear upsample
of the corresponding input image. The difference head maps the per-pixel
absolute difference of the two reconstructions through a learned linear
R^3 -> R^2 and a softmax into a tamper probability map; channel 1 is
P(tampered). Swapping the two reconstructions leaves the map unchanged
(|a-b| is symmetric).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .superres import ScaleSpec, axis_coords, nearest_index

WHITE = 255
DEFAULT_THRESHOLD = 0.5


def split_embeddings(z3: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of concat_embeddings: halve the channel axis; errors on odd counts."""
    if z3.ndim < 3:
        raise ValueError(f"expected (..., 2C, H, W), got {tuple(z3.shape)}")
    c2 = z3.shape[-3]
    if c2 % 2:
        raise ValueError(f"cannot split odd channel count {c2}")
    return z3[..., : c2 // 2, :, :], z3[..., c2 // 2 :, :, :]


class ResidualDecoder(nn.Module):
    """Per-pixel MLP (1x1 convs) from [embedding ; cell] to an RGB residual.

    The final layer is zero-initialized so an untrained model reconstructs the
    plain bilinear upsample; training grows the residual from there.
    """

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.Conv2d(channels + 2, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, 3, 1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, z: torch.Tensor, cell: tuple[float, float]) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W), got {tuple(z.shape)}")
        ch, cw = cell
        if not (0.0 < ch <= 2.0 and 0.0 < cw <= 2.0):
            raise ValueError(f"cell sizes must be in (0, 2], got {cell}")
        b, _, h, w = z.shape
        cell_map = z.new_empty((b, 2, h, w))
        cell_map[:, 0] = ch
        cell_map[:, 1] = cw
        return self.net(torch.cat([z, cell_map], dim=1))


def upsample_add(image: torch.Tensor, residual: torch.Tensor, scale: ScaleSpec) -> torch.Tensor:
    """Bilinear-upsample a [0,1] image to scale.hr_size and add the residual."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
    if (image.shape[-2], image.shape[-1]) != tuple(scale.lr_size):
        raise ValueError(
            f"image dims {tuple(image.shape[-2:])} do not match scale.lr_size {scale.lr_size}"
        )
    hr = scale.hr_size
    if (residual.shape[-2], residual.shape[-1]) != hr or residual.shape[1] != 3:
        raise ValueError(
            f"residual dims {tuple(residual.shape)} do not match hr_size {hr}"
        )
    if hr == tuple(scale.lr_size):
        up = image
    else:
        up = F.interpolate(image, size=hr, mode="bilinear", align_corners=False)
    return up + residual


class DiffHead(nn.Module):
    """Learned linear map R^3 -> R^2 on |hr1 - hr2| followed by softmax.

    The absolute difference is measured in 8-bit counts (x255) so the head's
    weights live on the same numeric scale as pixel differences; a [0,1]-scale
    input would make the head's gradients ~255x smaller than its useful weight
    range and stall training. Initialized as a soft threshold on the summed
    channel difference (~76 counts total), i.e. the classical subtraction
    baseline in differentiable form; training refines it.
    """

    DIFF_SCALE = 255.0

    def __init__(self):
        super().__init__()
        self.head = nn.Conv2d(3, 2, 1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
            self.head.weight[1, :, 0, 0] = 10.0 / self.DIFF_SCALE
            self.head.bias[1] = -3.0

    def forward(self, hr1: torch.Tensor, hr2: torch.Tensor) -> torch.Tensor:
        if hr1.shape != hr2.shape:
            raise ValueError(f"shapes differ: {tuple(hr1.shape)} vs {tuple(hr2.shape)}")
        if hr1.ndim != 4 or hr1.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(hr1.shape)}")
        d = torch.abs(hr1 - hr2) * self.DIFF_SCALE
        return self.head(d).softmax(dim=1)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def prob_to_mask(prob: torch.Tensor | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """(2, H, W) probability map -> {0,255} uint8 mask; white iff P(tampered) >= threshold."""
    if isinstance(prob, torch.Tensor):
        prob = prob.detach().cpu().numpy()
    prob = np.asarray(prob)
    if prob.ndim != 3 or prob.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) probability map, got {prob.shape}")
    return np.where(prob[1] >= threshold, WHITE, 0).astype(np.uint8)


def nearest_resize_mask(mask: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a {0,255} mask using the containment rule
    on pixel-center coordinates (the same convention as the LR index map)."""
    h, w = mask.shape
    oh, ow = out_size
    iy = nearest_index(axis_coords(oh), h)
    ix = nearest_index(axis_coords(ow), w)
    return mask[iy][:, ix]


def predict_mask(pair, model, r: tuple[float, float] = (1.0, 1.0),
                 threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Run the full pipeline on one pair and return a {0,255} mask at the
    pair's native resolution.

    The probability map is generated at scale r over the (stride-padded) image
    grid, cropped to floor(r * native), thresholded at `threshold`, and — when
    r != (1,1) — resampled back to native size with nearest neighbor.
    """
    from .encoder import pad_to_stride  # local import: avoid cycle at module load

    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    h, w = pair.size
    device = next(model.parameters()).device
    orig = image_to_tensor(pair.original)[None].to(device)
    tamp = image_to_tensor(pair.tampered)[None].to(device)
    model.eval()
    with torch.no_grad():
        orig_p, _ = pad_to_stride(orig, model.config.stride)
        tamp_p, _ = pad_to_stride(tamp, model.config.stride)
        scale = ScaleSpec(r, (orig_p.shape[-2], orig_p.shape[-1]))
        out = model(orig_p, tamp_p, scale)
        prob = out.prob[0]
    crop_h = int(np.floor(r[0] * h))
    crop_w = int(np.floor(r[1] * w))
    mask = prob_to_mask(prob[:, :crop_h, :crop_w], threshold)
    if mask.shape != (h, w):
        mask = nearest_resize_mask(mask, (h, w))
    return mask
