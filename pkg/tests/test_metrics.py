import math

import numpy as np
import pytest

from freeedit import metrics as mt
from freeedit.errors import ContractError, UndefinedRegionError
from freeedit.flow import FlowField, fb_consistency
from freeedit.videoio import VideoFrames


def brute_ssim_map(a, b):
    """Direct-sum SSIM with an explicit 11x11 Gaussian and reflect ('symmetric') padding."""
    ax = np.arange(-5, 6)
    g1 = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    pa = np.pad(a, 5, mode="symmetric")
    pb = np.pad(b, 5, mode="symmetric")
    H, W = a.shape
    out = np.empty((H, W))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    for y in range(H):
        for x in range(W):
            wa = pa[y:y + 11, x:x + 11]
            wb = pb[y:y + 11, x:x + 11]
            ma, mb = (win * wa).sum(), (win * wb).sum()
            va = (win * wa * wa).sum() - ma * ma
            vb = (win * wb * wb).sum() - mb * mb
            cov = (win * wa * wb).sum() - ma * mb
            out[y, x] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


def test_ssim_matches_brute_force(rng):
    a = rng.random((8, 8))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert np.allclose(mt.ssim_map(a, b), brute_ssim_map(a, b), atol=1e-12)


def test_ssim_identity_and_luma(rng):
    a = rng.random((12, 10, 3))
    assert mt.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    gray_a = a @ np.array([0.299, 0.587, 0.114])
    b = rng.random((12, 10, 3))
    gray_b = b @ np.array([0.299, 0.587, 0.114])
    assert mt.ssim(a, b) == pytest.approx(mt.ssim(gray_a, gray_b), abs=1e-15)


def test_psnr_spot_checks():
    a = np.zeros((4, 4))
    assert mt.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert mt.psnr(a, a + 0.01) == pytest.approx(40.0)
    assert mt.psnr(a, a) == mt.PSNR_CAP
    assert mt.psnr_from_mse(1e-11) == mt.PSNR_CAP
    assert mt.psnr_from_mse(1.0) == 0.0


def test_psnr_half_image_error():
    a = np.zeros((4, 4))
    b = a.copy()
    b[:, :2] = 0.2   # mse = 0.02
    assert mt.psnr(a, b) == pytest.approx(10 * math.log10(50), abs=1e-12)
    assert mt.psnr(a, b) == pytest.approx(16.99, abs=0.01)
    keep = np.zeros((4, 4), bool)
    keep[:, 2:] = True
    assert mt.psnr(a, b, keep) == mt.PSNR_CAP


def test_psnr_half_mask_value():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.2)   # mse 0.04 everywhere -> 13.98 dB on any subset
    keep = np.zeros((4, 4), bool)
    keep[:2] = True
    assert mt.psnr(a, b, keep) == pytest.approx(13.979, abs=1e-3)


def test_full_mask_equals_unmasked_bitwise(rng):
    ref = VideoFrames(rng.random((3, 9, 7, 3)))
    test = VideoFrames(np.clip(ref.frames + rng.normal(0, 0.05, ref.frames.shape), 0, 1))
    none = np.zeros((3, 9, 7), np.uint8)
    assert mt.video_psnr(ref, test, none) == mt.video_psnr(ref, test)
    assert mt.video_ssim(ref, test, none) == mt.video_ssim(ref, test)
    flows = [FlowField.zeros(9, 7)] * 2
    assert mt.warp_error(ref, test, flows, masks=none) == mt.warp_error(ref, test, flows)


def test_masked_metrics_reject_fully_edited_frame(rng):
    v = VideoFrames(rng.random((2, 4, 4, 3)))
    masks = np.zeros((2, 4, 4), np.uint8)
    masks[1] = 1
    with pytest.raises(UndefinedRegionError):
        mt.video_psnr(v, v, masks)
    with pytest.raises(ContractError):
        mt.video_ssim(v, v, np.zeros((3, 4, 4)))


def scene_occlusions(s):
    return [fb_consistency(f, b) for f, b in zip(s.gt_flow, s.gt_bwd_flow)]


def test_warp_error_with_true_flow_is_zero(square_scene):
    s = square_scene
    assert mt.warp_error(s.source, s.source, s.gt_flow, scene_occlusions(s)) <= 1e-4
    # background the square moves onto is occluded and does count without the masks
    assert mt.warp_error(s.source, s.source, s.gt_flow) > 1e-3


def test_warp_error_grows_with_flicker(square_scene, rng):
    s = square_scene
    flick = np.clip(s.source.frames + rng.normal(0, 0.05, s.source.frames.shape), 0, 1)
    assert mt.warp_error(s.source, VideoFrames(flick), s.gt_flow, scene_occlusions(s)) > 1e-3


def test_warp_error_skips_out_of_frame_pixels():
    frames = np.zeros((2, 4, 4, 3))
    frames[1, :, 0] = 1.0
    f = FlowField(np.full((4, 4), -1.0), np.zeros((4, 4)))
    # column 0 leaves the frame; column 1 sees the bright column, 4 of 12 valid pixels
    err = mt.warp_error(VideoFrames(frames), VideoFrames(frames), [f])
    assert err == pytest.approx(1.0 / 3.0, abs=1e-12)
    occ = np.zeros((4, 4), np.uint8)
    occ[:, 1] = 1
    assert mt.warp_error(VideoFrames(frames), VideoFrames(frames), [f], occlusions=[occ]) == 0.0


def test_mask_iou():
    a = np.zeros((1, 2, 3), np.uint8)
    b = a.copy()
    assert mt.mask_iou(a, b) == 1.0
    a[0, 0, 0] = 1
    b[0, 0, :] = 1
    assert mt.mask_iou(a, b) == pytest.approx(1 / 3)
    with pytest.raises(ContractError):
        mt.mask_iou(a, np.zeros((1, 3, 2)))


def test_edit_color_distance(square_scene):
    s = square_scene
    dist_src = mt.edit_color_distance(s.source, s.edited_first, s.gt_edit_masks)
    assert dist_src == pytest.approx(math.sqrt(2), abs=1e-9)
    perfect = s.source.frames.copy()
    perfect[s.gt_edit_masks.astype(bool)] = s.edited_first[s.gt_edit_masks[0].astype(bool)][0]
    assert mt.edit_color_distance(perfect, s.edited_first, s.gt_edit_masks) == pytest.approx(0.0, abs=1e-12)


def test_evaluate_report(square_scene):
    s = square_scene
    rep = mt.evaluate(s.source, s.source, s.gt_flow, masks=s.gt_edit_masks,
                      occlusions=scene_occlusions(s), gt_masks=s.gt_edit_masks)
    assert rep.psnr == mt.PSNR_CAP and rep.psnr_plus == mt.PSNR_CAP
    assert rep.ssim == pytest.approx(1.0) and rep.iou == 1.0
    assert rep.warp_error <= 1e-12
    assert "psnr_plus=99" in rep.lines()
    bare = mt.evaluate(s.source, s.source, s.gt_flow)
    assert bare.iou is None and bare.psnr_plus is None
