"""Warp error, SSIM, PSNR, their non-editing-area variants, and mask IoU."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ContractError, UndefinedRegionError
from .flow import FlowField, LUMA, out_of_bounds, sample_bilinear

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _frames(v):
    return v.frames if hasattr(v, "frames") else np.asarray(v, dtype=np.float64)


def _keep_masks(masks, count, shape):
    """Boolean 'count this pixel' arrays from editing masks (1 = edited)."""
    if masks is None:
        return None
    masks = np.asarray(masks)
    if masks.shape != (count, *shape):
        raise ContractError(f"masks {masks.shape} are not aligned with {count} frames of {shape}")
    keep = masks == 0
    for k in range(count):
        if not keep[k].any():
            raise UndefinedRegionError(f"frame {k} has no non-editing pixels")
    return keep


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def psnr(a, b, keep=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"images differ in shape: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if keep is not None:
        sq = sq[np.asarray(keep, dtype=bool)]
        if sq.size == 0:
            raise UndefinedRegionError("no pixels left to compare")
    # flatten in both branches so a full mask reduces in the same order
    return psnr_from_mse(float(sq.reshape(-1).mean()))


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM on luma with an 11-tap Gaussian window (sigma 1.5, reflect borders)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ LUMA
        b = b @ LUMA
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    def blur(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)

    mu_a, mu_b = blur(a), blur(b)
    ea2, eb2, eab = blur(a * a), blur(b * b), blur(a * b)
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, keep=None) -> float:
    m = ssim_map(a, b).reshape(-1)
    if keep is not None:
        m = m[np.asarray(keep, dtype=bool).reshape(-1)]
        if m.size == 0:
            raise UndefinedRegionError("no pixels left to compare")
    return float(m.mean())


def video_psnr(ref, test, masks=None) -> float:
    """PSNR averaged over frames; with ``masks`` only non-editing pixels count."""
    ref, test = _frames(ref), _frames(test)
    if ref.shape != test.shape:
        raise ContractError(f"videos differ in shape: {ref.shape} vs {test.shape}")
    keep = _keep_masks(masks, len(ref), ref.shape[1:3])
    vals = [psnr(ref[k], test[k], None if keep is None else keep[k]) for k in range(len(ref))]
    return float(np.mean(vals))


def video_ssim(ref, test, masks=None) -> float:
    ref, test = _frames(ref), _frames(test)
    if ref.shape != test.shape:
        raise ContractError(f"videos differ in shape: {ref.shape} vs {test.shape}")
    keep = _keep_masks(masks, len(ref), ref.shape[1:3])
    vals = [ssim(ref[k], test[k], None if keep is None else keep[k]) for k in range(len(ref))]
    return float(np.mean(vals))


def warp_frame(img, f: FlowField) -> np.ndarray:
    """Bring ``img`` (frame k+1) onto the pixel grid of frame k: out(x) = img(x + f(x))."""
    H, W = f.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return sample_bilinear(img, xx + f.fx, yy + f.fy)


def warp_error(source, edited, flows, occlusions=None, masks=None) -> float:
    """Mean over k of the MSE between edited frame k and edited frame k+1 warped back by flow k.

    Pixels whose flow leaves the frame, pixels flagged in ``occlusions[k]``
    and, when ``masks`` is given, editing pixels of frame k are excluded.
    """
    src, ed = _frames(source), _frames(edited)
    if len(src) != len(ed):
        raise ContractError(f"source has {len(src)} frames, edited has {len(ed)}")
    if len(flows) != len(ed) - 1:
        raise ContractError(f"{len(ed)} frames need {len(ed) - 1} flows, got {len(flows)}")
    if occlusions is not None and len(occlusions) != len(flows):
        raise ContractError("one occlusion mask per flow is required")
    keep_edit = _keep_masks(masks, len(ed), ed.shape[1:3])
    errs = []
    for k, f in enumerate(flows):
        valid = ~out_of_bounds(f)
        if occlusions is not None:
            valid &= ~np.asarray(occlusions[k], dtype=bool)
        if keep_edit is not None:
            valid &= keep_edit[k]
        if not valid.any():
            continue
        warped = warp_frame(ed[k + 1], f)
        errs.append(float(((warped - ed[k]) ** 2)[valid].mean()))
    if not errs:
        raise UndefinedRegionError("no valid pixels in any frame pair")
    return float(np.mean(errs))


def mask_iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask sequences differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    vals = []
    for x, y in zip(a, b):
        union = np.logical_or(x, y).sum()
        vals.append(1.0 if union == 0 else np.logical_and(x, y).sum() / union)
    return float(np.mean(vals))


def edit_color_distance(output, edited_first, masks) -> float:
    """Mean over frames 1.. of |mean RGB inside mask k - mean RGB of the edit in the edited first frame|."""
    out = _frames(output)
    masks = np.asarray(masks).astype(bool)
    ref = np.asarray(edited_first)[masks[0]].mean(axis=0)
    dists = [np.linalg.norm(out[k][masks[k]].mean(axis=0) - ref) for k in range(1, len(out)) if masks[k].any()]
    if not dists:
        raise UndefinedRegionError("the edit region vanishes after frame 0")
    return float(np.mean(dists))


@dataclass
class MetricReport:
    warp_error: float
    ssim: float
    psnr: float
    warp_error_plus: float | None = None
    ssim_plus: float | None = None
    psnr_plus: float | None = None
    iou: float | None = None

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def lines(self):
        return [f"{k}={v:.6g}" for k, v in self.as_dict().items() if v is not None]


def evaluate(source, edited, flows, masks=None, occlusions=None, gt_masks=None) -> MetricReport:
    """Whole-frame metrics against the source, plus non-editing variants when ``masks`` is given."""
    rep = MetricReport(
        warp_error=warp_error(source, edited, flows, occlusions),
        ssim=video_ssim(source, edited),
        psnr=video_psnr(source, edited),
    )
    if masks is not None:
        try:
            rep.warp_error_plus = warp_error(source, edited, flows, occlusions, masks)
            rep.ssim_plus = video_ssim(source, edited, masks)
            rep.psnr_plus = video_psnr(source, edited, masks)
        except UndefinedRegionError:
            rep.warp_error_plus = rep.ssim_plus = rep.psnr_plus = None
        if gt_masks is not None:
            rep.iou = mask_iou(masks, gt_masks)
    return rep
