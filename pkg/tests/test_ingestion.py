"""Unit tests for ingestion: synthesis, degradation, decoding, scanning, manifests."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.signal import convolve2d

from maskforge.ingestion import (
    DatasetManifest,
    ImagePair,
    PairRecord,
    TamperSpec,
    degrade,
    gaussian_blur,
    load_image,
    load_mask,
    load_pair,
    save_image,
    save_mask,
    scan_pairs,
    synth_dataset,
    synth_pair,
)

WHITE = 255


# ---------------------------------------------------------------------------
# synthesis


def test_synth_pair_deterministic():
    spec = TamperSpec(op="copy_move", region=(5, 7, 12, 9), jpeg_quality=40)
    a_pair, a_mask = synth_pair(123, (48, 40), spec)
    b_pair, b_mask = synth_pair(123, (48, 40), spec)
    np.testing.assert_array_equal(a_pair.original, b_pair.original)
    np.testing.assert_array_equal(a_pair.tampered, b_pair.tampered)
    np.testing.assert_array_equal(a_mask, b_mask)
    c_pair, _ = synth_pair(124, (48, 40), spec)
    assert not np.array_equal(a_pair.original, c_pair.original)


def test_synth_paste_rect_mask_geometry():
    spec = TamperSpec(op="paste_rect", region=(10, 10, 20, 20))
    _, mask = synth_pair(0, (64, 64), spec)
    assert mask.shape == (64, 64)
    assert int((mask == WHITE).sum()) == 400
    assert mask[10:30, 10:30].min() == WHITE
    mask_copy = mask.copy()
    mask_copy[10:30, 10:30] = 0
    assert not mask_copy.any()


def test_synth_ellipse_inside_rect():
    spec = TamperSpec(op="paste_ellipse", region=(4, 6, 20, 14))
    _, mask = synth_pair(1, (40, 40), spec)
    white = int((mask == WHITE).sum())
    # inscribed ellipse area ~ pi/4 of the rect, never more than the rect
    assert 0.5 * 20 * 14 < white <= 20 * 14
    outside = mask.copy()
    outside[6:20, 4:24] = 0
    assert not outside.any()


def test_synth_ops_change_only_region_before_degradation():
    for op in ("paste_rect", "paste_ellipse", "copy_move", "inpaint_blur"):
        spec = TamperSpec(op=op, region=(8, 8, 16, 12))  # no degradation
        pair, mask = synth_pair(5, (48, 48), spec)
        changed = (pair.original != pair.tampered).any(axis=2)
        # every changed pixel lies inside the mask
        assert not (changed & (mask == 0)).any(), op
        # and the op actually changed something
        assert changed.any(), op


def test_synth_mask_fraction_bounds_enforced():
    with pytest.raises(ValueError, match="fraction"):
        synth_pair(0, (64, 64), TamperSpec(op="paste_rect", region=(0, 0, 60, 60)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_synth_dataset_fraction_by_construction(seed):
    # regions sampled by synth_dataset always give a valid mask fraction
    with tempfile.TemporaryDirectory() as d:
        man = synth_dataset(d, {"test": 2}, (32, 32), seed=seed)
        for rec in man.records:
            mask = load_mask(rec.mask_path)
            frac = (mask == WHITE).sum() / mask.size
            assert 0.01 <= frac <= 0.70


def test_synth_dataset_layout_and_manifest(tmp_path):
    man = synth_dataset(tmp_path, {"train": 2, "val": 1, "test": 1}, (32, 32), seed=3)
    assert len(man) == 4
    assert [r.split for r in man.records] == ["train", "train", "val", "test"]
    for rec in man.records:
        assert Path(rec.original_path).is_file()
        assert Path(rec.tampered_path).is_file()
        assert Path(rec.mask_path).is_file()
        assert (rec.width, rec.height) == (32, 32)
    again = DatasetManifest.load(tmp_path / "manifest.jsonl")
    assert again.records == man.records


def test_synth_dataset_byte_identical_across_runs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    synth_dataset(a, {"test": 3}, (32, 32), seed=9, jpeg_quality=50)
    synth_dataset(b, {"test": 3}, (32, 32), seed=9, jpeg_quality=50)
    files_a = sorted(p.name for p in a.iterdir())
    files_b = sorted(p.name for p in b.iterdir())
    assert files_a == files_b
    for name in files_a:
        if name.endswith(".jsonl"):
            continue  # manifest embeds absolute paths
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# ---------------------------------------------------------------------------
# degradation


def test_degrade_identity_at_q100_sigma0():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)
    out = degrade(img, jpeg_quality=100, blur_sigma=0.0)
    np.testing.assert_array_equal(out, img)
    assert out is not img  # a copy, not an alias


def test_degrade_q30_changes_pixels_deterministically():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    a = degrade(img, jpeg_quality=30)
    b = degrade(img, jpeg_quality=30)
    np.testing.assert_array_equal(a, b)
    assert a.shape == img.shape
    assert float(np.abs(a.astype(int) - img.astype(int)).mean()) > 0.5


def test_degrade_validates():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="jpeg_quality"):
        degrade(img, jpeg_quality=5)
    with pytest.raises(ValueError, match="jpeg_quality"):
        degrade(img, jpeg_quality=101)
    with pytest.raises(ValueError, match="blur_sigma"):
        degrade(img, blur_sigma=-1.0)
    with pytest.raises(ValueError, match="uint8"):
        degrade(img.astype(np.float32))


def scipy_style_kernel(sigma, truncate=4.0):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def test_blur_matches_direct_convolution_oracle():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, (33, 29)).astype(np.float64)
    sigma = 2.0
    got = gaussian_blur(img, sigma)
    k = scipy_style_kernel(sigma)
    kern2d = np.outer(k, k)
    want = convolve2d(img, kern2d, mode="same", boundary="symm")
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_blur_impulse_peak_and_mass():
    img = np.zeros((33, 33), dtype=np.float64)
    img[16, 16] = 255.0
    out = gaussian_blur(img, 2.0)
    # peak attenuated to ~255/(2*pi*sigma^2)
    assert out.max() < 255 * 0.05
    assert out[16, 16] == out.max()
    # kernel support (radius 8) stays interior, so mass is conserved
    assert abs(out.sum() - 255.0) <= 255.0 * 0.01
    assert abs(out.sum() - 255.0) <= 1e-9  # exactly, in fact, up to rounding


def test_degrade_blur_is_quantized_float_blur():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = degrade(img, jpeg_quality=100, blur_sigma=1.5)
    want = np.clip(np.rint(gaussian_blur(img, 1.5)), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(out, want)


# ---------------------------------------------------------------------------
# decoding


def test_load_image_grayscale_replicates(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(8, 8)
    p = tmp_path / "g.png"
    Image.fromarray(arr, mode="L").save(p)
    out = load_image(p)
    assert out.shape == (8, 8, 3)
    for c in range(3):
        np.testing.assert_array_equal(out[:, :, c], arr)


def test_load_image_16bit_truncates_high_byte(tmp_path):
    arr = np.arange(256, dtype=np.uint16).reshape(16, 16) * 257  # 0..65535
    p = tmp_path / "deep.png"
    Image.fromarray(arr).save(p)  # uint16 -> 16-bit grayscale PNG
    out = load_image(p)
    want = (arr >> 8).astype(np.uint8)
    for c in range(3):
        np.testing.assert_array_equal(out[:, :, c], want)


def test_load_image_corrupt_names_file(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"not a png at all")
    with pytest.raises(ValueError, match="junk.png"):
        load_image(p)


def test_mask_round_trip_and_strictness(tmp_path):
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[2:5, 3:7] = WHITE
    p = tmp_path / "m.png"
    save_mask(p, mask)
    np.testing.assert_array_equal(load_mask(p), mask)
    # non-binary content is rejected on save and on load
    with pytest.raises(ValueError, match="values"):
        save_mask(tmp_path / "bad.png", np.full((4, 4), 128, dtype=np.uint8))
    gray = tmp_path / "gray.png"
    Image.fromarray(np.full((4, 4), 128, dtype=np.uint8), mode="L").save(gray)
    with pytest.raises(ValueError, match="values"):
        load_mask(gray)


def test_load_pair_checks_dims(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    save_image(tmp_path / "a_orig.png", img)
    save_image(tmp_path / "a_tamp.png", img)
    rec = PairRecord("a", str(tmp_path / "a_orig.png"), str(tmp_path / "a_tamp.png"),
                     None, width=8, height=8, split="test")
    pair = load_pair(rec)
    assert pair.size == (8, 8)
    bad = PairRecord("a", str(tmp_path / "a_orig.png"), str(tmp_path / "a_tamp.png"),
                     None, width=9, height=8, split="test")
    with pytest.raises(ValueError, match="manifest says"):
        load_pair(bad)


# ---------------------------------------------------------------------------
# records / manifests


def test_pair_record_validation():
    with pytest.raises(ValueError, match="split"):
        PairRecord("x", "o", "t", "m", 4, 4, "training")
    with pytest.raises(ValueError, match="mask"):
        PairRecord("x", "o", "t", None, 4, 4, "train")
    with pytest.raises(ValueError, match="dimensions"):
        PairRecord("x", "o", "t", "m", 0, 4, "test")


def test_manifest_duplicate_ids_rejected():
    r = PairRecord("x", "o", "t", None, 4, 4, "test")
    with pytest.raises(ValueError, match="duplicate"):
        DatasetManifest([r, r])


def test_manifest_load_checks_files(tmp_path):
    rec = PairRecord("x", str(tmp_path / "missing.png"), str(tmp_path / "m2.png"),
                     None, 4, 4, "test")
    DatasetManifest([rec]).save(tmp_path / "man.jsonl")
    with pytest.raises(FileNotFoundError, match="missing.png"):
        DatasetManifest.load(tmp_path / "man.jsonl")
    got = DatasetManifest.load(tmp_path / "man.jsonl", check_files=False)
    assert got.records[0].pair_id == "x"


def test_manifest_bad_json_line(tmp_path):
    p = tmp_path / "man.jsonl"
    p.write_text('{"pair_id": "x"\n')
    with pytest.raises(ValueError, match="man.jsonl:1"):
        DatasetManifest.load(p)


def test_image_pair_validation():
    a = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="uint8"):
        ImagePair("x", a.astype(np.float32), a)
    with pytest.raises(ValueError):
        ImagePair("x", a, np.zeros((5, 4, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# scanning


def write_pair(root, pid, size=(8, 8), tamp_size=None, mask=True, ext="png"):
    rng = np.random.default_rng(abs(hash(pid)) % (2**32))
    h, w = size
    save_image(root / f"{pid}_orig.{ext}", rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
    th, tw = tamp_size or size
    save_image(root / f"{pid}_tamp.{ext}", rng.integers(0, 256, (th, tw, 3), dtype=np.uint8))
    if mask:
        m = np.zeros((h, w), dtype=np.uint8)
        m[0, 0] = WHITE
        save_mask(root / f"{pid}_mask.png", m)


def test_scan_pairs_happy_path(tmp_path):
    write_pair(tmp_path, "a")
    write_pair(tmp_path, "b", mask=False)
    man, skipped = scan_pairs(tmp_path, split="test")
    assert [r.pair_id for r in man.records] == ["a", "b"]
    assert man.records[0].mask_path is not None
    assert man.records[1].mask_path is None
    assert skipped == []


def test_scan_pairs_skips_and_reports(tmp_path):
    write_pair(tmp_path, "good")
    write_pair(tmp_path, "uneven", tamp_size=(8, 10))
    save_image(tmp_path / "lonely_orig.png", np.zeros((8, 8, 3), dtype=np.uint8))
    (tmp_path / "broken_orig.png").write_bytes(b"garbage")
    (tmp_path / "broken_tamp.png").write_bytes(b"garbage")
    man, skipped = scan_pairs(tmp_path, split="test")
    assert [r.pair_id for r in man.records] == ["good"]
    reasons = {s.pair_id: s.reason for s in skipped}
    assert "size_mismatch" in reasons["uneven"]
    assert reasons["lonely"] == "missing_tampered"
    assert "unreadable" in reasons["broken"]


def test_scan_pairs_zero_pairs_errors(tmp_path):
    save_image(tmp_path / "only_orig.png", np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="no usable pairs"):
        scan_pairs(tmp_path)
    with pytest.raises(FileNotFoundError):
        scan_pairs(tmp_path / "nowhere")


def test_scan_pairs_train_requires_mask(tmp_path):
    write_pair(tmp_path, "a", mask=False)
    write_pair(tmp_path, "b", mask=True)
    man, skipped = scan_pairs(tmp_path, split="train")
    assert [r.pair_id for r in man.records] == ["b"]
    assert skipped[0].reason == "missing_mask"


@settings(max_examples=12, deadline=None)
@given(st.lists(st.tuples(st.integers(2, 6), st.integers(2, 6), st.booleans()),
                min_size=1, max_size=4))
def test_scan_pairs_never_admits_unequal_dims(sizes):
    with tempfile.TemporaryDirectory() as d:
        root = Path(d)
        for i, (h, w, mismatch) in enumerate(sizes):
            write_pair(root, f"p{i}", size=(h, w),
                       tamp_size=(h + 1, w) if mismatch else None, mask=False)
        try:
            man, skipped = scan_pairs(root, split="test")
        except ValueError:
            assert all(m for (_, _, m) in sizes)
            return
        for rec in man.records:
            a = load_image(rec.original_path)
            b = load_image(rec.tampered_path)
            assert a.shape == b.shape
        assert len(man.records) + len(skipped) == len(sizes)
