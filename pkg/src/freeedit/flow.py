"""Dense optical flow: pyramidal Lucas-Kanade, forward-backward occlusion, FLO1 files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError, GeometryError

FLOW_MAGIC = b"FLO1"
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (in pixels) from one frame to the next."""

    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self):
        fx = np.asarray(self.fx, dtype=np.float64)
        fy = np.asarray(self.fy, dtype=np.float64)
        if fx.ndim != 2 or fx.shape != fy.shape:
            raise GeometryError(f"fx {fx.shape} and fy {fy.shape} must be matching 2-D arrays")
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fy))):
            raise ContractError("flow field must be finite")
        object.__setattr__(self, "fx", fx)
        object.__setattr__(self, "fy", fy)

    @property
    def shape(self):
        return self.fx.shape

    @classmethod
    def zeros(cls, H, W):
        return cls(np.zeros((H, W)), np.zeros((H, W)))

    def endpoint_error(self, other: "FlowField") -> np.ndarray:
        return np.hypot(self.fx - other.fx, self.fy - other.fy)


@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    window: int = 7
    iterations: int = 3
    damping: float = 1e-3

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError("need at least one pyramid level")
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError("window must be a positive odd integer")
        if self.iterations < 0 or self.damping < 0:
            raise ContractError("iterations and damping must be non-negative")


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ LUMA
    return img


def sample_bilinear(img, x, y, mode="nearest"):
    """Sample ``img`` (H, W) or (H, W, C) at float coordinates; edges clamp by default."""
    img = np.asarray(img, dtype=np.float64)
    coords = np.stack([y, x])
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode=mode)
    return np.stack(
        [ndimage.map_coordinates(img[..., ch], coords, order=1, mode=mode) for ch in range(img.shape[-1])],
        axis=-1,
    )


def _downsample(img):
    blurred = ndimage.gaussian_filter(img, sigma=1.0, mode="nearest")
    return blurred[::2, ::2]


def _resize_flow(u, v, shape):
    """Upsample a coarse flow to ``shape``, rescaling displacements."""
    h, w = u.shape
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sy = (yy + 0.5) * h / H - 0.5
    sx = (xx + 0.5) * w / W - 0.5
    coords = np.stack([sy, sx])
    u2 = ndimage.map_coordinates(u, coords, order=1, mode="nearest") * (W / w)
    v2 = ndimage.map_coordinates(v, coords, order=1, mode="nearest") * (H / h)
    return u2, v2


def _lk_level(a, b, u, v, params: FlowParams):
    """Gauss-Newton refinement of (u, v) on one pyramid level.

    Every pixel's window is warped by that pixel's own flow, and the system
    uses the template's gradients, so the normal matrix is fixed per level.
    Window samples whose target leaves the frame contribute nothing.
    """
    H, W = a.shape
    r = params.window // 2
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    gy, gx = np.gradient(a)
    box = params.window
    sxx = ndimage.uniform_filter(gx * gx, box, mode="nearest") + params.damping
    syy = ndimage.uniform_filter(gy * gy, box, mode="nearest") + params.damping
    sxy = ndimage.uniform_filter(gx * gy, box, mode="nearest")
    det = sxx * syy - sxy * sxy
    a_p, gx_p, gy_p = (np.pad(z, r, mode="edge") for z in (a, gx, gy))
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    for _ in range(params.iterations):
        bx = np.zeros_like(a)
        by = np.zeros_like(a)
        for dy, dx in offsets:
            win = (slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
            tx = np.clip(xx + dx, 0, W - 1) + u
            ty = np.clip(yy + dy, 0, H - 1) + v
            it = sample_bilinear(b, tx, ty) - a_p[win]
            it[(tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)] = 0.0
            bx -= gx_p[win] * it
            by -= gy_p[win] * it
        bx /= len(offsets)
        by /= len(offsets)
        du = (syy * bx - sxy * by) / det
        dv = (sxx * by - sxy * bx) / det
        # at most one pixel per iteration on this level
        step = np.maximum(1.0, np.hypot(du, dv))
        u = u + du / step
        v = v + dv / step
    return u, v


def estimate_flow(a, b, params: FlowParams | None = None) -> FlowField:
    """Flow from image ``a`` to image ``b``: ``a(x) ~ b(x + f(x))``."""
    params = params or FlowParams()
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise GeometryError(f"cannot estimate flow between {a.shape} and {b.shape} images")
    pyr_a, pyr_b = [a], [b]
    for _ in range(params.levels - 1):
        if min(pyr_a[-1].shape) < 2 * params.window:
            break
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))
    u = np.zeros(pyr_a[-1].shape)
    v = np.zeros(pyr_a[-1].shape)
    for lvl in range(len(pyr_a) - 1, -1, -1):
        if u.shape != pyr_a[lvl].shape:
            u, v = _resize_flow(u, v, pyr_a[lvl].shape)
        u, v = _lk_level(pyr_a[lvl], pyr_b[lvl], u, v, params)
    return FlowField(u, v)


def estimate_sequence(v, params: FlowParams | None = None) -> list[FlowField]:
    frames = v.frames if hasattr(v, "frames") else np.asarray(v)
    if len(frames) < 2:
        raise ContractError("flow sequence needs at least 2 frames")
    return [estimate_flow(frames[k], frames[k + 1], params) for k in range(len(frames) - 1)]


def estimate_backward_sequence(v, params: FlowParams | None = None) -> list[FlowField]:
    """Entry k maps frame k+1 back to frame k."""
    frames = v.frames if hasattr(v, "frames") else np.asarray(v)
    if len(frames) < 2:
        raise ContractError("flow sequence needs at least 2 frames")
    return [estimate_flow(frames[k + 1], frames[k], params) for k in range(len(frames) - 1)]


def out_of_bounds(f: FlowField) -> np.ndarray:
    H, W = f.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tx = xx + f.fx
    ty = yy + f.fy
    return (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)


def fb_consistency(fwd: FlowField, bwd: FlowField, tau: float = 1.0) -> np.ndarray:
    """Occlusion mask in the source frame of ``fwd`` (1 = occluded).

    A pixel is occluded when its forward target leaves the frame or when the
    backward flow at the target does not bring it back within ``tau`` pixels.
    """
    if fwd.shape != bwd.shape:
        raise GeometryError(f"forward {fwd.shape} and backward {bwd.shape} flows differ in size")
    if not tau > 0:
        raise ContractError("tau must be positive")
    H, W = fwd.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tx = xx + fwd.fx
    ty = yy + fwd.fy
    oob = out_of_bounds(fwd)
    bx = sample_bilinear(bwd.fx, tx, ty)
    by = sample_bilinear(bwd.fy, tx, ty)
    residual = np.hypot(fwd.fx + bx, fwd.fy + by)
    return (oob | (residual > tau)).astype(np.uint8)


def write_flow(f: FlowField, path):
    if not (np.all(np.isfinite(f.fx)) and np.all(np.isfinite(f.fy))):
        raise ContractError("refusing to write a non-finite flow field")
    H, W = f.shape
    payload = np.empty((H, W, 2), dtype="<f4")
    payload[..., 0] = f.fx
    payload[..., 1] = f.fy
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", W, H))
        fh.write(payload.tobytes(order="C"))


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    W, H = struct.unpack_from("<II", data, 4)
    need = 12 + 8 * W * H
    if len(data) < need:
        raise FormatError(f"{path}: payload too short for {W}x{H} flow")
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(H, W, 2)
    return FlowField(arr[..., 0].astype(np.float64), arr[..., 1].astype(np.float64))


def write_flow_sequence(flows, dir_path, prefix="flow"):
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(flows):
        write_flow(f, dir_path / f"{prefix}_{k:04d}.flo")


def read_flow_sequence(dir_path, prefix="flow") -> list[FlowField]:
    dir_path = Path(dir_path)
    flows = []
    k = 0
    while (dir_path / f"{prefix}_{k:04d}.flo").exists():
        flows.append(read_flow(dir_path / f"{prefix}_{k:04d}.flo"))
        k += 1
    if not flows:
        raise FormatError(f"no {prefix}_NNNN.flo files in {dir_path}")
    return flows
