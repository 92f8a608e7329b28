"""Editing masks: first-frame difference, threshold, flow propagation, token weights.

Masks are uint8 arrays holding {0, 1}; a mask sequence is stacked as (F, H, W).
The 255 convention only appears when a mask is exported as PNG.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, GeometryError
from .flow import FlowField

THR_DEFAULT = 35.0


def _check_binary(m, what="mask"):
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ContractError(f"{what} must be binary")
    return m.astype(np.uint8)


def diff_map(src_first, edited_first) -> np.ndarray:
    """Per-pixel edit magnitude on the 8-bit scale: 255 * max_c |edited - src|."""
    a = np.asarray(src_first, dtype=np.float64)
    b = np.asarray(edited_first, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"first frames differ in shape: {a.shape} vs {b.shape}")
    d = np.abs(b - a)
    if d.ndim == 3:
        d = d.max(axis=-1)
    return 255.0 * d


def threshold_mask(d, thr: float = THR_DEFAULT) -> np.ndarray:
    if thr < 0:
        raise ContractError(f"thr must be >= 0, got {thr}")
    return (np.asarray(d) > thr).astype(np.uint8)


def dilate(m, radius: int) -> np.ndarray:
    m = _check_binary(m)
    if radius <= 0:
        return m
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = xx * xx + yy * yy <= radius * radius
    return ndimage.binary_dilation(m.astype(bool), structure=disk).astype(np.uint8)


def warp_mask(m, f: FlowField, occ=None, occ_space: str = "target") -> np.ndarray:
    """Forward-splat a binary mask one frame along ``f``.

    Every source pixel with value 1 marks its rounded target if that target is
    inside the frame; overlapping hits OR together and unreached pixels stay 0.
    ``occ`` flags occluded pixels. With ``occ_space="target"`` flagged targets
    are forced to 0; with ``occ_space="source"`` flagged source pixels are not
    splatted at all (what forward-backward consistency produces).
    """
    m = _check_binary(m)
    if m.shape != f.shape:
        raise GeometryError(f"mask {m.shape} and flow {f.shape} differ in size")
    H, W = m.shape
    src = m.astype(bool)
    if occ is not None:
        occ = np.asarray(occ).astype(bool)
        if occ.shape != m.shape:
            raise GeometryError(f"occlusion {occ.shape} and mask {m.shape} differ in size")
        if occ_space == "source":
            src = src & ~occ
        elif occ_space != "target":
            raise ContractError(f"occ_space must be 'source' or 'target', got {occ_space!r}")
    ys, xs = np.nonzero(src)
    tx = np.floor(xs + f.fx[ys, xs] + 0.5).astype(np.int64)
    ty = np.floor(ys + f.fy[ys, xs] + 0.5).astype(np.int64)
    keep = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    out = np.zeros((H, W), dtype=np.uint8)
    out[ty[keep], tx[keep]] = 1
    if occ is not None and occ_space == "target":
        out[occ] = 0
    return out


def propagate(m0, flows, occs=None, occ_space: str = "target") -> np.ndarray:
    """Autoregressively warp the first-frame mask through the whole video."""
    m0 = _check_binary(m0)
    if occs is not None and len(occs) != len(flows):
        raise ContractError(f"{len(flows)} flows but {len(occs)} occlusion masks")
    masks = [m0]
    for k, f in enumerate(flows):
        masks.append(warp_mask(masks[-1], f, None if occs is None else occs[k], occ_space))
    return np.stack(masks)


def chunk_indices(frames: int, r: int, mode: str = "chunk") -> list[int]:
    """Frame index chosen to represent each latent frame.

    ``chunk`` takes the ceil(r/2)-th frame (1-based) inside each r-frame
    chunk of frames 1..rn; ``literal`` takes frame ceil(r/2)*k.
    """
    if r < 1 or frames < 1 + r or (frames - 1) % r:
        raise ContractError(f"{frames} frames is not 1 + r*n for r={r}")
    n = (frames - 1) // r
    half = math.ceil(r / 2)
    if mode == "chunk":
        return [0] + [(k - 1) * r + half for k in range(1, n + 1)]
    if mode == "literal":
        return [0] + [half * k for k in range(1, n + 1)]
    raise ContractError(f"unknown compression mode {mode!r}")


def compress_temporal(ms, r: int, mode: str = "chunk") -> np.ndarray:
    ms = np.asarray(ms)
    return ms[chunk_indices(len(ms), r, mode)]


def downsample_flatten(cm, geometry, mode: str = "max") -> np.ndarray:
    """Reduce each p x p patch to one token, row-major, giving (1+n, l)."""
    cm = _check_binary(cm)
    g = geometry
    if cm.ndim != 3:
        raise GeometryError(f"expected (1+n, H, W) masks, got {cm.shape}")
    if cm.shape[0] != g.latent_frames:
        raise GeometryError(f"expected {g.latent_frames} latent masks, got {cm.shape[0]}")
    F, H, W = cm.shape
    p = g.p
    if H % p or W % p or (H, W) != (g.H, g.W):
        raise GeometryError(f"{H}x{W} masks do not tile into {p}x{p} patches of a {g.H}x{g.W} geometry")
    patches = cm.reshape(F, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4).reshape(F, -1, p * p)
    if mode == "max":
        tm = patches.max(axis=-1)
    elif mode == "mean":
        tm = (patches.mean(axis=-1) > 0.5).astype(np.uint8)
    else:
        raise ContractError(f"downsample mode must be 'max' or 'mean', got {mode!r}")
    return tm.astype(np.uint8)


def modulation_weights(tm, scale: float = 1.0) -> np.ndarray:
    """Injection weights (1+n, l, 1): 0 on edited tokens, ``scale`` elsewhere."""
    tm = _check_binary(tm, "token mask")
    if not 0.0 <= scale <= 1.0:
        raise ContractError(f"lambda scale must lie in [0, 1], got {scale}")
    lam = (1.0 - tm.astype(np.float64))[..., None]
    if scale != 1.0:
        lam = lam * scale
    return lam


def first_frame_mask(src_first, edited_first, thr=THR_DEFAULT, radius=0):
    return dilate(threshold_mask(diff_map(src_first, edited_first), thr), radius)


def save_mask_png(m, path):
    m = _check_binary(m)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise ContractError(f"{path}: mask PNG must only hold 0 and 255")
    return (arr // 255).astype(np.uint8)


def save_mask_sequence(ms, dir_path):
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(ms):
        save_mask_png(m, dir_path / f"mask_{k:04d}.png")
