import numpy as np
import pytest

from inpaintad.errors import ParameterError, SamplingExhaustedError
from inpaintad.masks import (
    ForegroundMask,
    MaskProposal,
    downsample_mask,
    foreground_mask,
    grid_scale,
    mask_iou,
    multiscale_masks,
    sample_training_mask,
)


# --------------------------------------------------------------------------
# training rectangles
# --------------------------------------------------------------------------

def test_full_foreground_gamma_zero_accepts_first(rng):
    fg = ForegroundMask(np.ones((64, 64), dtype=np.uint8), "all_ones")
    mp = sample_training_mask(fg, 0.0, rng, max_tries=1)
    assert mp.provenance == "training_rect"
    assert 0.0 < mp.coverage <= 1.0


def test_rectangle_equal_to_foreground_has_unit_iou():
    rect = np.zeros((32, 32), dtype=np.uint8)
    rect[8:24, 8:24] = 1
    assert mask_iou(rect, rect) == 1.0


def test_disjoint_rectangle_rejected_iou_zero():
    a = np.zeros((16, 16), dtype=np.uint8)
    b = np.zeros((16, 16), dtype=np.uint8)
    a[:4, :4] = 1
    b[8:, 8:] = 1
    assert mask_iou(a, b) == 0.0


def test_sampling_exhausted_carries_last_iou(rng):
    # tiny foreground corner: a gamma close to 1 is unreachable
    fg_mask = np.zeros((64, 64), dtype=np.uint8)
    fg_mask[0, 0] = 1
    fg = ForegroundMask(fg_mask, "file")
    with pytest.raises(SamplingExhaustedError) as err:
        sample_training_mask(fg, 0.99, rng, max_tries=5)
    assert 0.0 <= err.value.last_iou < 0.99


def test_accepted_masks_respect_iou_filter(rng):
    fg_mask = np.zeros((64, 64), dtype=np.uint8)
    fg_mask[16:48, 16:48] = 1
    fg = ForegroundMask(fg_mask, "file")
    for gamma in (0.0, 0.2):
        for _ in range(50):
            mp = sample_training_mask(fg, gamma, rng, max_tries=500)
            assert mask_iou(mp.mask, fg.mask) > gamma


# --------------------------------------------------------------------------
# multi-scale grids
# --------------------------------------------------------------------------

def test_grid_two_by_two_tiles_8x8():
    masks = multiscale_masks(8, 8, scales=(2,))
    assert len(masks) == 4
    total = sum(m.mask for m in masks)
    assert np.array_equal(total, np.ones((8, 8)))
    assert all(m.mask.sum() == 16 for m in masks)


def test_grid_scale_one_is_full_mask():
    (m,) = multiscale_masks(8, 8, scales=(1,))
    assert np.array_equal(m.mask, np.ones((8, 8)))
    assert grid_scale(m) == 1


def test_grid_full_set_counts_85():
    masks = multiscale_masks(512, 512, scales=(1, 2, 4, 8))
    assert len(masks) == 85


def test_grid_disjoint_and_complete_per_scale():
    masks = multiscale_masks(64, 64, scales=(1, 2, 4, 8))
    for k in (1, 2, 4, 8):
        level = [m.mask for m in masks if grid_scale(m) == k]
        assert len(level) == k * k
        assert np.array_equal(sum(level), np.ones((64, 64)))


def test_grid_rejects_indivisible_dims():
    with pytest.raises(ParameterError):
        multiscale_masks(60, 64, scales=(8,))


# --------------------------------------------------------------------------
# latent downsampling
# --------------------------------------------------------------------------

def test_downsample_all_ones():
    m = MaskProposal(np.ones((16, 16), dtype=np.uint8), "training_rect")
    assert np.array_equal(downsample_mask(m, 2, 2), np.ones((2, 2)))


def test_downsample_single_pixel_dilates():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[3, 11] = 1
    m = MaskProposal(mask, "training_rect")
    ds = downsample_mask(m, 2, 2)
    expected = np.zeros((2, 2))
    expected[0, 1] = 1
    assert np.array_equal(ds, expected)


def test_downsample_zero_iff_zero(rng):
    zero = MaskProposal(np.zeros((16, 16), dtype=np.uint8), "training_rect")
    assert downsample_mask(zero, 4, 4).sum() == 0
    for _ in range(20):
        mask = (rng.uniform(size=(16, 16)) < 0.05).astype(np.uint8)
        if mask.sum() == 0:
            continue
        m = MaskProposal(mask, "training_rect")
        assert downsample_mask(m, 4, 4).sum() > 0


def test_downsample_rejects_nonintegral_blocks():
    m = MaskProposal(np.ones((16, 16), dtype=np.uint8), "training_rect")
    with pytest.raises(ParameterError):
        downsample_mask(m, 3, 4)


# --------------------------------------------------------------------------
# foreground extraction
# --------------------------------------------------------------------------

def test_constant_image_degenerates_to_all_ones(caplog):
    img = np.full((32, 32, 3), 0.5)
    with caplog.at_level("WARNING"):
        fg = foreground_mask(img, "otsu_morph")
    assert np.array_equal(fg.mask, np.ones((32, 32)))
    assert any("constant" in r.message for r in caplog.records)


def test_white_disk_on_black_recovered():
    size = 128
    yy, xx = np.mgrid[0:size, 0:size]
    disk = ((yy - 64) ** 2 + (xx - 64) ** 2 <= 40**2)
    img = np.where(disk[..., None], 0.9, 0.05) * np.ones((size, size, 3))
    fg = foreground_mask(img, "otsu_morph")
    assert mask_iou(fg.mask, disk.astype(np.uint8)) > 0.95


def test_dark_object_on_bright_background_polarity():
    size = 64
    img = np.full((size, size, 3), 0.9)
    img[24:40, 24:40] = 0.1
    fg = foreground_mask(img, "otsu_morph")
    expected = np.zeros((size, size), dtype=np.uint8)
    expected[24:40, 24:40] = 1
    assert mask_iou(fg.mask, expected) > 0.9


def test_all_ones_method_ignores_content(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    fg = foreground_mask(img, "all_ones")
    assert np.array_equal(fg.mask, np.ones((16, 16)))
    assert fg.method == "all_ones"


def test_coverage_equals_mean():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[:5] = 1
    assert MaskProposal(mask, "training_rect").coverage == 0.5
