"""Dataset ingestion: pair scanning, decoding, synthesis, degradation, manifests.

A dataset is a flat directory of image pairs following the suffix layout
    <id>_orig.<ext>   <id>_tamp.<ext>   [<id>_mask.png]
with ext in {png, jpg, jpeg}. Ground-truth masks are 8-bit single-channel PNGs
whose values are exactly {0, 255} (white = tampered). The manifest is JSONL,
one record per line:

    {"pair_id": ..., "original_path": ..., "tampered_path": ..., "mask_path": ...,
     "width": ..., "height": ..., "split": "train"|"val"|"test"}

All synthesis is deterministic in the seed: running the generator twice with the
same arguments produces byte-identical files.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")
IMAGE_EXTS = ("png", "jpg", "jpeg")
OPS = ("paste_rect", "paste_ellipse", "copy_move", "inpaint_blur")
WHITE = 255


# ---------------------------------------------------------------------------
# records / manifest


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    original_path: str
    tampered_path: str
    mask_path: str | None
    width: int
    height: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"{self.pair_id}: split must be one of {SPLITS}, got {self.split!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.pair_id}: non-positive dimensions {self.width}x{self.height}")
        if self.split in ("train", "val") and not self.mask_path:
            raise ValueError(f"{self.pair_id}: split {self.split!r} requires a ground-truth mask")


@dataclass
class DatasetManifest:
    records: list[PairRecord]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.pair_id in seen:
                raise ValueError(f"duplicate pair_id {r.pair_id!r} in manifest")
            seen.add(r.pair_id)

    def split(self, name: str) -> list[PairRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str | Path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=False) for r in self.records]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: bad JSON ({e})") from e
            try:
                rec = PairRecord(**doc)
            except TypeError as e:
                raise ValueError(f"{path}:{lineno}: bad record ({e})") from e
            records.append(rec)
        manifest = cls(records)
        if check_files:
            for r in manifest.records:
                for p in (r.original_path, r.tampered_path, r.mask_path):
                    if p and not Path(p).is_file():
                        raise FileNotFoundError(f"{r.pair_id}: referenced file missing: {p}")
        return manifest


@dataclass(frozen=True)
class ImagePair:
    pair_id: str
    original: np.ndarray  # (H, W, 3) uint8
    tampered: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        for name, img in (("original", self.original), ("tampered", self.tampered)):
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
                raise ValueError(f"{self.pair_id}/{name}: expected (H, W, 3) uint8, got "
                                 f"{img.dtype} {img.shape}")
        if self.original.shape != self.tampered.shape:
            raise ValueError(f"{self.pair_id}: original {self.original.shape} vs "
                             f"tampered {self.tampered.shape}")

    @property
    def size(self) -> tuple[int, int]:
        """(H, W)"""
        return self.original.shape[0], self.original.shape[1]


# ---------------------------------------------------------------------------
# decoding


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image to (H, W, 3) uint8 RGB.

    Grayscale is replicated to 3 channels. 16-bit grayscale is reduced to 8-bit
    by high-byte truncation (value >> 8), not by rescaling.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise ValueError(f"cannot decode image {path}: {e}") from e
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.int64)
        if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
            raise ValueError(f"{path}: integer image out of 16-bit range")
        arr = (arr >> 8).astype(np.uint8)
        return np.repeat(arr[:, :, None], 3, axis=2)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
        return np.repeat(arr[:, :, None], 3, axis=2)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def load_mask(path: str | Path) -> np.ndarray:
    """Decode a ground-truth mask to (H, W) uint8 with values in {0, 255}."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise ValueError(f"cannot decode mask {path}: {e}") from e
    if img.mode != "L":
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.uint8)
    vals = np.unique(arr)
    if not np.isin(vals, (0, WHITE)).all():
        raise ValueError(f"mask {path}: values must be exactly {{0, 255}}, got {vals[:8]}")
    return arr


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.dtype != np.uint8 or mask.ndim != 2:
        raise ValueError(f"mask must be (H, W) uint8, got {mask.dtype} {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, WHITE)).all():
        raise ValueError(f"mask values must be exactly {{0, 255}}, got {vals[:8]}")
    Image.fromarray(mask, mode="L").save(Path(path), format="PNG")


def save_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3) uint8, got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="RGB").save(Path(path), format="PNG")


def load_pair(record: PairRecord) -> ImagePair:
    """Decode both images of a record, enforcing the manifest's dimensions."""
    orig = load_image(record.original_path)
    tamp = load_image(record.tampered_path)
    for name, arr, path in (("original", orig, record.original_path),
                            ("tampered", tamp, record.tampered_path)):
        h, w = arr.shape[:2]
        if (w, h) != (record.width, record.height):
            raise ValueError(
                f"{record.pair_id}/{name}: {path} is {w}x{h}, manifest says "
                f"{record.width}x{record.height}"
            )
    return ImagePair(record.pair_id, orig, tamp)


# ---------------------------------------------------------------------------
# degradation


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur in float space (per channel for 3-d input).

    Same kernel law as the uint8 `degrade` path; exposed separately so the blur
    can be checked against a dense-convolution oracle without quantization noise.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"blur_sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return arr.copy()
    if arr.ndim == 2:
        return ndimage.gaussian_filter(arr, sigma=sigma, mode="reflect")
    if arr.ndim == 3:
        return ndimage.gaussian_filter(arr, sigma=(sigma, sigma, 0), mode="reflect")
    raise ValueError(f"expected 2-d or 3-d array, got shape {arr.shape}")


def degrade(image: np.ndarray, jpeg_quality: int = 100, blur_sigma: float = 0.0) -> np.ndarray:
    """Blur then JPEG-round-trip an RGB image; deterministic, dims preserved.

    jpeg_quality must be an integer in [10, 100]. quality == 100 skips the JPEG
    round-trip entirely (libjpeg still quantizes at q=100, which would break the
    exact-identity contract for (100, 0)); qualities in [10, 99] go through a
    real encode/decode cycle.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.dtype} {image.shape}")
    if not isinstance(jpeg_quality, (int, np.integer)) or not 10 <= jpeg_quality <= 100:
        raise ValueError(f"jpeg_quality must be an int in [10, 100], got {jpeg_quality!r}")
    if blur_sigma < 0:
        raise ValueError(f"blur_sigma must be >= 0, got {blur_sigma}")
    out = image
    if blur_sigma > 0:
        out = np.clip(np.rint(gaussian_blur(out, blur_sigma)), 0, 255).astype(np.uint8)
    if jpeg_quality < 100:
        buf = io.BytesIO()
        Image.fromarray(out, mode="RGB").save(buf, format="JPEG", quality=int(jpeg_quality))
        buf.seek(0)
        jpg = Image.open(buf)
        jpg.load()
        out = np.asarray(jpg.convert("RGB"), dtype=np.uint8)
    else:
        out = out.copy() if out is image else out
    if out.shape != image.shape:
        raise RuntimeError(f"degrade changed dims: {image.shape} -> {out.shape}")
    return out


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class TamperSpec:
    """One synthetic manipulation: an op, its region, and the degradation applied
    to the tampered image afterwards.

    region is (x, y, w, h) in pixels, x = column of the left edge, y = row of the
    top edge. The ground-truth mask covers the semantically altered region only,
    never the global degradation.
    """

    op: str
    region: tuple[int, int, int, int]
    jpeg_quality: int = 100
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}, expected one of {OPS}")
        x, y, w, h = self.region
        if w < 2 or h < 2:
            raise ValueError(f"region too small: {self.region}")
        if x < 0 or y < 0:
            raise ValueError(f"negative region origin: {self.region}")
        if not isinstance(self.jpeg_quality, (int, np.integer)) or not 10 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be an int in [10, 100], got {self.jpeg_quality!r}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


def _textured_field(rng: np.random.Generator, size: tuple[int, int],
                    texture: float) -> np.ndarray:
    """Coarse bilinear color field plus fine grain; uint8 (H, W, 3)."""
    h, w = size
    coarse = rng.uniform(30.0, 225.0, size=(8, 8, 3))
    img = Image.fromarray(np.rint(coarse).astype(np.uint8), mode="RGB")
    base = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64)
    grain = rng.uniform(-texture, texture, size=(h, w, 3))
    return np.clip(np.rint(base + grain), 0, 255).astype(np.uint8)


def _ellipse_mask(h: int, w: int) -> np.ndarray:
    """Boolean inscribed-ellipse mask for an h x w rectangle."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = h / 2.0, w / 2.0
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_pair(seed: int, size: tuple[int, int], spec: TamperSpec,
               texture: float = 18.0, pair_id: str = "synth") -> tuple[ImagePair, np.ndarray]:
    """Generate a deterministic (original, tampered, mask) triple.

    size is (H, W). The original is a textured random field; the tampered copy
    applies spec.op inside spec.region and then the degradation. The mask marks
    the altered region only. Raises if the resulting white fraction falls outside
    [0.01, 0.70].
    """
    h, w = size
    x0, y0, rw, rh = spec.region
    if x0 + rw > w or y0 + rh > h:
        raise ValueError(f"region {spec.region} exceeds image size {size}")
    rng = np.random.default_rng(seed)
    original = _textured_field(rng, size, texture)
    tampered = original.copy()
    mask = np.zeros((h, w), dtype=np.uint8)

    if spec.op == "paste_rect":
        patch = _textured_field(rng, (rh, rw), texture)
        tampered[y0:y0 + rh, x0:x0 + rw] = patch
        mask[y0:y0 + rh, x0:x0 + rw] = WHITE
    elif spec.op == "paste_ellipse":
        patch = _textured_field(rng, (rh, rw), texture)
        ell = _ellipse_mask(rh, rw)
        sub = tampered[y0:y0 + rh, x0:x0 + rw]
        sub[ell] = patch[ell]
        mask[y0:y0 + rh, x0:x0 + rw][ell] = WHITE
    elif spec.op == "copy_move":
        src = None
        for _ in range(20):
            sx = int(rng.integers(0, w - rw + 1))
            sy = int(rng.integers(0, h - rh + 1))
            disjoint = sx + rw <= x0 or x0 + rw <= sx or sy + rh <= y0 or y0 + rh <= sy
            src = (sx, sy)
            if disjoint:
                break
        sx, sy = src
        tampered[y0:y0 + rh, x0:x0 + rw] = original[sy:sy + rh, sx:sx + rw]
        mask[y0:y0 + rh, x0:x0 + rw] = WHITE
    elif spec.op == "inpaint_blur":
        sigma = max(4.0, min(rw, rh) / 3.0)
        blurred = np.clip(np.rint(gaussian_blur(original, sigma)), 0, 255).astype(np.uint8)
        tampered[y0:y0 + rh, x0:x0 + rw] = blurred[y0:y0 + rh, x0:x0 + rw]
        mask[y0:y0 + rh, x0:x0 + rw] = WHITE

    tampered = degrade(tampered, spec.jpeg_quality, spec.blur_sigma)
    frac = int(np.count_nonzero(mask)) / mask.size
    if not 0.01 <= frac <= 0.70:
        raise ValueError(f"mask fraction {frac:.4f} outside [0.01, 0.70] for region {spec.region}")
    return ImagePair(pair_id, original, tampered), mask


def synth_dataset(out_dir: str | Path, counts: dict[str, int], size: tuple[int, int],
                  seed: int = 0, jpeg_quality: int = 100, blur_sigma: float = 0.0,
                  texture: float = 18.0) -> DatasetManifest:
    """Write a deterministic synthetic dataset and its manifest.jsonl to out_dir.

    counts maps split name -> number of pairs. Ops cycle through OPS; regions are
    sampled per pair from a seeded generator with area fraction in [0.04, 0.25],
    which keeps every mask inside the validity band by construction.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"synthetic images must be at least 16x16, got {size}")
    for name in counts:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
    records = []
    index = 0
    for split in SPLITS:
        for _ in range(counts.get(split, 0)):
            pid = f"pair{index:04d}"
            rng = np.random.default_rng([seed, index, 7])
            area = rng.uniform(0.04, 0.25)
            aspect = rng.uniform(0.6, 1.6)
            rh = int(round(math.sqrt(area * h * w * aspect)))
            rw = int(round(math.sqrt(area * h * w / aspect)))
            rh = min(max(rh, 4), h - 2)
            rw = min(max(rw, 4), w - 2)
            x0 = int(rng.integers(0, w - rw + 1))
            y0 = int(rng.integers(0, h - rh + 1))
            spec = TamperSpec(op=OPS[index % len(OPS)], region=(x0, y0, rw, rh),
                              jpeg_quality=jpeg_quality, blur_sigma=blur_sigma)
            pair, mask = synth_pair(seed * 100003 + index, size, spec,
                                    texture=texture, pair_id=pid)
            orig_path = out_dir / f"{pid}_orig.png"
            tamp_path = out_dir / f"{pid}_tamp.png"
            mask_path = out_dir / f"{pid}_mask.png"
            save_image(orig_path, pair.original)
            save_image(tamp_path, pair.tampered)
            save_mask(mask_path, mask)
            records.append(PairRecord(pid, str(orig_path), str(tamp_path), str(mask_path),
                                      width=w, height=h, split=split))
            index += 1
    manifest = DatasetManifest(records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# directory scanning


@dataclass(frozen=True)
class SkippedPair:
    pair_id: str
    reason: str


def _scan_suffix_layout(root: Path):
    """Yield (pair_id, orig_path, tamp_path, mask_path|None) candidates."""
    origs = sorted(p for ext in IMAGE_EXTS for p in root.glob(f"*_orig.{ext}"))
    for orig in origs:
        pid = orig.name[: -len("_orig" + orig.suffix)]
        tamp = None
        for ext in IMAGE_EXTS:
            cand = root / f"{pid}_tamp.{ext}"
            if cand.is_file():
                tamp = cand
                break
        mask = root / f"{pid}_mask.png"
        yield pid, orig, tamp, (mask if mask.is_file() else None)


LAYOUTS = {"suffix": _scan_suffix_layout}


def _probe_size(path: Path) -> tuple[int, int]:
    """(width, height) without decoding pixel data; raises on unreadable files."""
    with Image.open(path) as img:
        return img.size


def scan_pairs(root_dir: str | Path, layout: str = "suffix",
               split: str = "test") -> tuple[DatasetManifest, list[SkippedPair]]:
    """Scan a directory into a manifest; unequal or unreadable pairs are skipped
    and returned in the skip report. Zero surviving pairs is an error."""
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}, expected one of {sorted(LAYOUTS)}")
    records: list[PairRecord] = []
    skipped: list[SkippedPair] = []
    for pid, orig, tamp, mask in LAYOUTS[layout](root):
        if tamp is None:
            skipped.append(SkippedPair(pid, "missing_tampered"))
            continue
        try:
            ow, oh = _probe_size(orig)
            tw, th = _probe_size(tamp)
        except Exception as e:
            skipped.append(SkippedPair(pid, f"unreadable: {e}"))
            continue
        if (ow, oh) != (tw, th):
            skipped.append(SkippedPair(pid, f"size_mismatch: {ow}x{oh} vs {tw}x{th}"))
            continue
        if mask is not None:
            try:
                mw, mh = _probe_size(mask)
            except Exception as e:
                skipped.append(SkippedPair(pid, f"unreadable: {e}"))
                continue
            if (mw, mh) != (ow, oh):
                skipped.append(SkippedPair(pid, f"mask_size_mismatch: {mw}x{mh} vs {ow}x{oh}"))
                continue
        if split in ("train", "val") and mask is None:
            skipped.append(SkippedPair(pid, "missing_mask"))
            continue
        records.append(PairRecord(pid, str(orig), str(tamp),
                                  str(mask) if mask else None,
                                  width=ow, height=oh, split=split))
    if not records:
        summary = "; ".join(f"{s.pair_id}: {s.reason}" for s in skipped[:10]) or "no candidates"
        raise ValueError(f"no usable pairs under {root} ({summary})")
    return DatasetManifest(records), skipped
