"""Training: pixel cross-entropy + MMD alignment, SGD with linear lr decay,
per-epoch validation, best-F1 checkpointing.

Default schedule follows the reference protocol: lr 0.01 decayed linearly to
zero over 100 epochs, momentum 0.9, 100 epochs max. Each batch samples one
scale factor r ~ U[r_min, r_max] shared by both axes; ground-truth masks are
nearest-upsampled to the HR grid for the loss. The loss is
    total = CE(P, M) + lambda_mmd * MMD(Z1, Z2)
with the MMD term *structurally absent* at lambda_mmd == 0 (the value is still
logged each epoch under no_grad so runs with and without the penalty can be
compared). The epoch log is JSONL: {"epoch", "ce", "mmd", "val_f1", "lr"}.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import embedding_mmd
from .evaluation import MetricsReport, evaluate_pairs
from .ingestion import DatasetManifest, load_mask, load_pair
from .maskgen import DEFAULT_THRESHOLD, image_to_tensor, predict_mask
from .model import MmmModel, ModelConfig
from .superres import ScaleSpec, axis_coords, nearest_index

LOG_EPS = 1e-12
CHECKPOINT_VERSION = "mmm-v1"


def apply_determinism_env() -> bool:
    """Honor MASKFORGE_DETERMINISTIC=1: single-threaded, reproducible numerics."""
    if os.environ.get("MASKFORGE_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        return True
    return False


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 100
    lr_decay_iters: int = 100   # epochs to reach lr = 0 (linear)
    batch_size: int = 4
    lambda_mmd: float = 0.01
    seed: int = 0
    r_min: float = 1.0          # per-batch scale sampling range
    r_max: float = 2.0
    threshold: float = DEFAULT_THRESHOLD  # validation binarization
    grad_clip: float = 1.0      # global grad-norm clip; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr_decay_iters < 1:
            raise ValueError(f"lr_decay_iters must be >= 1, got {self.lr_decay_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_mmd < 0:
            raise ValueError(f"lambda_mmd must be >= 0, got {self.lambda_mmd}")
        if not 1.0 <= self.r_min <= self.r_max:
            raise ValueError(f"need 1 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")


def cross_entropy(prob: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over all pixels of -log P(true class); log clamped at 1e-12.

    prob is (B, 2, H, W) softmax output; mask is (B, H, W) with values {0, 1}.
    """
    if prob.ndim != 4 or prob.shape[1] != 2:
        raise ValueError(f"prob must be (B, 2, H, W), got {tuple(prob.shape)}")
    if mask.shape != (prob.shape[0], prob.shape[2], prob.shape[3]):
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match prob {tuple(prob.shape)}"
        )
    m = mask.long()
    if ((m != 0) & (m != 1)).any():
        raise ValueError("mask values must be 0 or 1")
    logp = torch.log(prob.clamp(min=LOG_EPS))
    picked = logp.gather(1, m.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def total_loss(prob: torch.Tensor, mask: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor,
               lambda_mmd: float, kernel: str = "linear") -> torch.Tensor:
    """CE + lambda * MMD(Z1, Z2); exactly CE (and independent of Z1/Z2) at lambda == 0."""
    if lambda_mmd < 0:
        raise ValueError(f"lambda_mmd must be >= 0, got {lambda_mmd}")
    ce = cross_entropy(prob, mask)
    if lambda_mmd == 0:
        return ce
    return ce + lambda_mmd * embedding_mmd(z1, z2, kernel=kernel)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    model_state: dict
    epoch: int
    best_val_f1: float

    def header(self) -> dict:
        return {
            "C": self.model_config.channels,
            "stride": self.model_config.stride,
            "kernel": self.model_config.mmd_kernel,
            "lambda_mmd": self.train_config.lambda_mmd,
            "version": self.model_config.version,
        }

    def build_model(self) -> MmmModel:
        model = MmmModel(self.model_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "header": self.header(),
                "model_config": asdict(self.model_config),
                "train_config": asdict(self.train_config),
                "model_state": self.model_state,
                "epoch": self.epoch,
                "best_val_f1": self.best_val_f1,
            },
            Path(path),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        doc = torch.load(path, map_location="cpu", weights_only=True)
        for key in ("header", "model_config", "train_config", "model_state", "epoch",
                    "best_val_f1"):
            if key not in doc:
                raise ValueError(f"checkpoint {path} missing field {key!r}")
        mc_doc = dict(doc["model_config"])
        mc_doc["grid"] = tuple(mc_doc["grid"])
        mc = ModelConfig(**mc_doc)
        tc = TrainConfig(**doc["train_config"])
        header = doc["header"]
        if header.get("version") != mc.version or header.get("C") != mc.channels:
            raise ValueError(f"checkpoint {path}: header does not match model config")
        return cls(mc, tc, doc["model_state"], int(doc["epoch"]), float(doc["best_val_f1"]))


def save_checkpoint(path: str | Path, model: MmmModel, train_config: TrainConfig,
                    epoch: int, best_val_f1: float) -> None:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    Checkpoint(model.config, train_config, state, epoch, best_val_f1).save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# data plumbing


def _load_training_item(record) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pair = load_pair(record)
    if not record.mask_path:
        raise ValueError(f"{record.pair_id}: training requires a ground-truth mask")
    mask = load_mask(record.mask_path)
    if mask.shape != pair.size:
        raise ValueError(f"{record.pair_id}: mask {mask.shape} vs image {pair.size}")
    return (image_to_tensor(pair.original), image_to_tensor(pair.tampered),
            torch.from_numpy((mask == 255).astype(np.int64)))


def upsample_mask_nearest(mask: torch.Tensor, scale: ScaleSpec) -> torch.Tensor:
    """(B, H, W) {0,1} mask -> (B, hr_h, hr_w) via the containment rule."""
    h, w = scale.lr_size
    if mask.shape[-2:] != (h, w):
        raise ValueError(f"mask dims {tuple(mask.shape[-2:])} vs lr_size {scale.lr_size}")
    hr_h, hr_w = scale.hr_size
    if (hr_h, hr_w) == (h, w):
        return mask
    iy = torch.from_numpy(nearest_index(axis_coords(hr_h), h))
    ix = torch.from_numpy(nearest_index(axis_coords(hr_w), w))
    return mask[..., iy, :][..., :, ix]


# ---------------------------------------------------------------------------
# loops


def validate(model: MmmModel, manifest: DatasetManifest, split: str = "val",
             threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Predict every pair of a split at r=(1,1) and micro-average against GT."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    items = []
    for rec in records:
        if not rec.mask_path:
            raise ValueError(f"{rec.pair_id}: cannot validate without a ground-truth mask")
        pair = load_pair(rec)
        pred = predict_mask(pair, model, r=(1.0, 1.0), threshold=threshold)
        items.append((rec.pair_id, pred, load_mask(rec.mask_path)))
    return evaluate_pairs(items)


def train(config: TrainConfig, manifest: DatasetManifest,
          model_config: ModelConfig | None = None,
          log_path: str | Path | None = None) -> Checkpoint:
    """Train on the manifest's train split, validate per epoch on val, return
    the best-validation-F1 checkpoint."""
    apply_determinism_env()
    train_recs = manifest.split("train")
    val_recs = manifest.split("val")
    if not train_recs:
        raise ValueError("manifest has no train split")
    if not val_recs:
        raise ValueError("manifest has no val split")
    mc = model_config or ModelConfig()
    torch.manual_seed(config.seed)
    model = MmmModel(mc)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                          momentum=config.momentum)
    items = [_load_training_item(r) for r in train_recs]
    by_size: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, (o, _, _) in enumerate(items):
        by_size[(o.shape[-2], o.shape[-1])].append(i)
    rng = np.random.default_rng(config.seed)
    log_f = open(log_path, "w") if log_path else None
    best_f1 = -1.0
    best_state: dict | None = None
    best_epoch = -1
    try:
        for epoch in range(config.max_epochs):
            lr = config.learning_rate * max(0.0, 1.0 - epoch / config.lr_decay_iters)
            for group in opt.param_groups:
                group["lr"] = lr
            batches: list[list[int]] = []
            for size_key in sorted(by_size):
                idxs = [by_size[size_key][j] for j in rng.permutation(len(by_size[size_key]))]
                batches += [idxs[i:i + config.batch_size]
                            for i in range(0, len(idxs), config.batch_size)]
            batches = [batches[j] for j in rng.permutation(len(batches))]
            model.train()
            ce_sum = mmd_sum = 0.0
            for b_idx, batch in enumerate(batches):
                orig = torch.stack([items[i][0] for i in batch])
                tamp = torch.stack([items[i][1] for i in batch])
                mask = torch.stack([items[i][2] for i in batch])
                r = float(rng.uniform(config.r_min, config.r_max))
                scale = ScaleSpec((r, r), (orig.shape[-2], orig.shape[-1]))
                out = model(orig, tamp, scale)
                mask_hr = upsample_mask_nearest(mask, scale)
                ce = cross_entropy(out.prob, mask_hr)
                if config.lambda_mmd > 0:
                    mmd_val = embedding_mmd(out.z1, out.z2, kernel=mc.mmd_kernel)
                    loss = ce + config.lambda_mmd * mmd_val
                else:
                    with torch.no_grad():
                        mmd_val = embedding_mmd(out.z1, out.z2, kernel=mc.mmd_kernel)
                    loss = ce
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} batch {b_idx}: "
                        f"ce={ce.detach().item():.6g} mmd={mmd_val.detach().item():.6g} "
                        f"lr={lr:.6g}"
                    )
                opt.zero_grad()
                loss.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                ce_sum += ce.item()
                mmd_sum += mmd_val.item()
            n = max(len(batches), 1)
            val_report = validate(model, manifest, split="val", threshold=config.threshold)
            row = {
                "epoch": epoch,
                "ce": ce_sum / n,
                "mmd": mmd_sum / n,
                "val_f1": val_report.f1,
                "lr": lr,
            }
            if log_f:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
            if val_report.f1 > best_f1:
                best_f1 = val_report.f1
                best_epoch = epoch
                best_state = {k: v.detach().cpu().clone()
                              for k, v in model.state_dict().items()}
    finally:
        if log_f:
            log_f.close()
    assert best_state is not None
    return Checkpoint(mc, config, best_state, best_epoch, best_f1)
