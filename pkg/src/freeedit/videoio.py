"""Frame/tensor persistence and the synthetic moving-shapes scene generator.

Frames live in memory as float64 arrays in [0, 1] with layout (F, H, W, 3).
On disk a video is a directory of 8-bit RGB PNGs named ``frame_%04d.png``.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, FormatError, GapError, GeometryError
from .flow import FlowField

FRAME_PATTERN = "frame_{:04d}.png"
_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")

TENSOR_MAGIC = b"FTC1"


@dataclass(frozen=True)
class Geometry:
    """Pixel and token geometry of one video.

    A video of ``1 + r*n`` frames becomes ``1 + n`` latent frames, each
    holding ``l = (H/p) * (W/p)`` tokens of ``c`` channels.
    """

    H: int = 16
    W: int = 16
    r: int = 2
    n: int = 4
    p: int = 4
    c: int = 128

    def __post_init__(self):
        if self.r < 1 or self.n < 1:
            raise GeometryError(f"need r >= 1 and n >= 1, got r={self.r}, n={self.n}")
        if self.p < 1 or self.H % self.p or self.W % self.p:
            raise GeometryError(f"patch {self.p} must divide {self.H}x{self.W}")

    @property
    def l(self) -> int:
        return (self.H // self.p) * (self.W // self.p)

    @property
    def frames(self) -> int:
        return 1 + self.r * self.n

    @property
    def latent_frames(self) -> int:
        return 1 + self.n

    @property
    def patch_dim(self) -> int:
        """Pixel values feeding one token: r frames of a p x p RGB patch."""
        return self.r * self.p * self.p * 3

    @classmethod
    def for_frames(cls, count, H, W, r, p=4, c=128):
        if r < 1 or (count - 1) % r or count < 1 + r:
            raise GeometryError(f"{count} frames is not 1 + r*n for r={r}")
        return cls(H=H, W=W, r=r, n=(count - 1) // r, p=p, c=c)


@dataclass(frozen=True)
class VideoFrames:
    frames: np.ndarray
    geometry: Geometry | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise GeometryError(f"frames must be (F, H, W, 3), got {arr.shape}")
        if arr.shape[0] == 0:
            raise ContractError("video has no frames")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("frame values must lie in [0, 1]")
        g = self.geometry
        if g is not None:
            if arr.shape[0] != g.frames:
                raise GeometryError(f"expected {g.frames} frames for r={g.r}, n={g.n}, got {arr.shape[0]}")
            if arr.shape[1:3] != (g.H, g.W):
                raise GeometryError(f"expected {g.H}x{g.W} frames, got {arr.shape[1]}x{arr.shape[2]}")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, k):
        return self.frames[k]

    @property
    def shape(self):
        return self.frames.shape

    def with_geometry(self, g: Geometry) -> "VideoFrames":
        return VideoFrames(self.frames, g)


# --------------------------------------------------------------------------
# frame directories


def load_frames(dir_path, geometry: Geometry | None = None) -> VideoFrames:
    """Decode ``frame_%04d.png`` files of ``dir_path`` in index order."""
    dir_path = Path(dir_path)
    indexed = {}
    for name in os.listdir(dir_path):
        m = _FRAME_RE.match(name)
        if m:
            indexed[int(m.group(1))] = dir_path / name
    if not indexed:
        raise FormatError(f"no frame_NNNN.png files in {dir_path}")
    count = max(indexed) + 1
    missing = sorted(set(range(count)) - set(indexed))
    if missing:
        raise GapError(f"frame sequence in {dir_path} is missing index {missing[0]:04d}")
    frames = []
    for k in range(count):
        with Image.open(indexed[k]) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise GeometryError(f"mixed frame dimensions in {dir_path}: {sorted(shapes)}")
    return VideoFrames(np.stack(frames).astype(np.float64) / 255.0, geometry)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_frames(v: VideoFrames, dir_path) -> list[Path]:
    if not isinstance(v, VideoFrames) or len(v) == 0:
        raise ContractError("save_frames needs a non-empty VideoFrames")
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(v.frames):
        path = dir_path / FRAME_PATTERN.format(k)
        Image.fromarray(to_uint8(frame), mode="RGB").save(path)
        paths.append(path)
    return paths


def save_image(img, path):
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# --------------------------------------------------------------------------
# FTC1 tensor container


def write_tensor(t, path):
    """Write a rank <= 4 float32 tensor as FTC1 (magic, u32 rank, u32 dims, payload)."""
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    arr = np.array(t, dtype="<f4", order="C")
    if arr.ndim > 4:
        raise ContractError(f"tensor rank {arr.ndim} exceeds 4")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 4)
    if rank > 4:
        raise FormatError(f"{path}: rank {rank} exceeds 4")
    if len(data) < 8 + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - offset < 4 * count:
        raise FormatError(f"{path}: payload holds {(len(data) - offset) // 4} floats, header needs {count}")
    if len(data) - offset > 4 * count:
        raise FormatError(f"{path}: {len(data) - offset - 4 * count} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float32)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneConfig:
    """Scripted moving-rectangles scene.

    Shapes are drawn in index order, so a later shape covers an earlier one.
    Unset sizes, positions, velocities and colors are drawn from the seed.
    Every displacement is an integer number of pixels per frame.
    """

    height: int = 16
    width: int = 16
    frames: int = 9
    shapes: int = 2
    sizes: list | None = None          # [(h, w), ...]
    positions: list | None = None      # top-left (x, y) in frame 0
    velocities: list | None = None     # (vx, vy) pixels per frame
    colors: list | None = None         # base RGB in [0, 1]
    edit_shape: int = 0
    edit_mode: str = "recolor"         # recolor | remove
    edit_color: tuple | None = None    # None: a seeded color far from the source one
    edit_strength_min: float = 1.0     # recolor ramps from this fraction to 1 across the shape
    edit_noise: float = 0.0            # gaussian noise added to the whole edited first frame
    texture: float = 0.12
    background: float = 0.25           # amplitude of the static background pattern
    max_speed: int = 1
    min_size: int = 4
    max_size: int = 6

    def validate(self):
        if self.height < 1 or self.width < 1 or self.frames < 2:
            raise ConfigError("scene needs a positive canvas and at least 2 frames")
        if self.shapes < 1:
            raise ConfigError("scene needs at least one shape")
        if not 0 <= self.edit_shape < self.shapes:
            raise ConfigError(f"edit_shape {self.edit_shape} out of range for {self.shapes} shapes")
        if self.edit_mode not in ("recolor", "remove"):
            raise ConfigError(f"unknown edit_mode {self.edit_mode!r}")
        for name in ("sizes", "positions", "velocities", "colors"):
            vals = getattr(self, name)
            if vals is not None and len(vals) != self.shapes:
                raise ConfigError(f"{name} lists {len(vals)} entries for {self.shapes} shapes")
        if self.velocities is not None:
            for vx, vy in self.velocities:
                if int(vx) != vx or int(vy) != vy:
                    raise ConfigError("velocities must be whole pixels per frame")


def _parse_list(value, arity):
    out = []
    for item in value.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = [float(x) for x in item.split(",")]
        if len(parts) != arity:
            raise ConfigError(f"expected {arity} comma-separated numbers, got {item!r}")
        out.append(tuple(parts))
    return out


_SCALARS = {
    "height": int, "width": int, "frames": int, "shapes": int, "edit_shape": int,
    "edit_mode": str, "edit_strength_min": float, "edit_noise": float,
    "texture": float, "background": float, "max_speed": int,
    "min_size": int, "max_size": int,
}
_LISTS = {"sizes": 2, "positions": 2, "velocities": 2, "colors": 3}


def parse_scene_config(text: str) -> SceneConfig:
    """Parse flat ``key=value`` lines; tuples are ``a,b;c,d``."""
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _SCALARS:
                kwargs[key] = _SCALARS[key](value)
            elif key in _LISTS:
                items = _parse_list(value, _LISTS[key])
                if key in ("sizes", "positions", "velocities"):
                    items = [tuple(int(round(x)) for x in it) for it in items]
                kwargs[key] = items
            elif key == "edit_color":
                (kwargs[key],) = _parse_list(value, 3)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    cfg = SceneConfig(**kwargs)
    cfg.validate()
    return cfg


def format_scene_config(cfg: SceneConfig) -> str:
    lines = []
    for key in _SCALARS:
        lines.append(f"{key}={getattr(cfg, key)}")
    for key in _LISTS:
        vals = getattr(cfg, key)
        if vals is not None:
            lines.append(f"{key}=" + ";".join(",".join(repr(float(x)) if key == "colors" else str(x) for x in v) for v in vals))
    if cfg.edit_color is not None:
        lines.append("edit_color=" + ",".join(repr(float(x)) for x in cfg.edit_color))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SyntheticScene:
    source: VideoFrames
    edited_first: np.ndarray
    gt_flow: list            # FlowField k: frame k -> k+1
    gt_bwd_flow: list        # FlowField k: frame k+1 -> k
    gt_edit_masks: np.ndarray  # (F, H, W) uint8, visible support of the edited shape
    seed: int
    config: SceneConfig = field(repr=False, default=None)
    layers: np.ndarray = field(repr=False, default=None)  # (F, H, W) int, -1 background

    def gt_occlusions(self) -> list:
        """Exact occlusion masks for ``gt_flow``: a pixel is flagged when its
        target leaves the canvas or shows a different layer in the next frame."""
        out = []
        for k, f in enumerate(self.gt_flow):
            H, W = f.fx.shape
            yy, xx = np.mgrid[0:H, 0:W]
            tx = xx + np.rint(f.fx).astype(int)
            ty = yy + np.rint(f.fy).astype(int)
            inside = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
            nxt = np.full((H, W), -2)
            nxt[inside] = self.layers[k + 1][ty[inside], tx[inside]]
            out.append((~inside | (nxt != self.layers[k])).astype(np.uint8))
        return out


def _smooth_pattern(rng, h, w, amplitude):
    """Static low-frequency RGB pattern in [-amplitude, amplitude]."""
    from scipy.ndimage import gaussian_filter

    noise = rng.standard_normal((h, w, 3))
    noise = gaussian_filter(noise, sigma=(1.0, 1.0, 0), mode="wrap")
    noise /= max(np.abs(noise).max(), 1e-12)
    return amplitude * noise


def _resolve(cfg: SceneConfig, rng):
    H, W, F = cfg.height, cfg.width, cfg.frames
    sizes = cfg.sizes or [
        (int(rng.integers(cfg.min_size, cfg.max_size + 1)), int(rng.integers(cfg.min_size, cfg.max_size + 1)))
        for _ in range(cfg.shapes)
    ]
    if cfg.velocities is not None:
        vels = [(int(vx), int(vy)) for vx, vy in cfg.velocities]
    else:
        vels = []
        for _ in range(cfg.shapes):
            v = (0, 0)
            while v == (0, 0):
                v = tuple(int(x) for x in rng.integers(-cfg.max_speed, cfg.max_speed + 1, size=2))
            vels.append(v)
    if cfg.positions is not None:
        pos = [(int(x), int(y)) for x, y in cfg.positions]
    else:
        pos = []
        for (h, w), (vx, vy) in zip(sizes, vels):
            span_x = (F - 1) * vx
            span_y = (F - 1) * vy
            lo_x, hi_x = max(0, -span_x), W - w - max(0, span_x)
            lo_y, hi_y = max(0, -span_y), H - h - max(0, span_y)
            if hi_x < lo_x or hi_y < lo_y:
                raise ConfigError(f"shape {h}x{w} moving {vx},{vy} cannot stay on a {H}x{W} canvas")
            pos.append((int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1))))
    colors = cfg.colors or [tuple(rng.uniform(0.25, 0.95, size=3)) for _ in range(cfg.shapes)]
    for (h, w), (x0, y0), (vx, vy) in zip(sizes, pos, vels):
        for k in (0, F - 1):
            x, y = x0 + k * vx, y0 + k * vy
            if x < 0 or y < 0 or x + w > W or y + h > H:
                raise ConfigError(f"shape at ({x0},{y0}) size {h}x{w} leaves the {H}x{W} canvas by frame {k}")
    return sizes, pos, vels, colors


def _far_color(rng, color):
    """A seeded color whose largest channel difference from ``color`` is big."""
    color = np.asarray(color)
    for _ in range(100):
        cand = rng.uniform(0.1, 0.95, size=3)
        if np.abs(cand - color).max() > 0.5:
            return cand
    return 1.0 - color


def gen_moving_shapes(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Render a scripted scene with exact ground-truth flow and edit masks."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W, F = cfg.height, cfg.width, cfg.frames
    sizes, pos, vels, colors = _resolve(cfg, rng)

    background = np.clip(0.5 + _smooth_pattern(rng, H, W, cfg.background), 0.0, 1.0)
    textures = [_smooth_pattern(rng, h, w, cfg.texture) for h, w in sizes]

    frames = np.empty((F, H, W, 3))
    layers = np.full((F, H, W), -1, dtype=np.int64)
    for k in range(F):
        img = background.copy()
        for s, ((h, w), (x0, y0), (vx, vy)) in enumerate(zip(sizes, pos, vels)):
            x, y = x0 + k * vx, y0 + k * vy
            img[y:y + h, x:x + w] = np.clip(np.asarray(colors[s]) + textures[s], 0.0, 1.0)
            layers[k, y:y + h, x:x + w] = s
        frames[k] = img

    fwd, bwd = [], []
    for k in range(F - 1):
        fx = np.zeros((H, W))
        fy = np.zeros((H, W))
        bx = np.zeros((H, W))
        by = np.zeros((H, W))
        for s, (vx, vy) in enumerate(vels):
            fx[layers[k] == s] = vx
            fy[layers[k] == s] = vy
            bx[layers[k + 1] == s] = -vx
            by[layers[k + 1] == s] = -vy
        fwd.append(FlowField(fx, fy))
        bwd.append(FlowField(bx, by))

    e = cfg.edit_shape
    masks = (layers == e).astype(np.uint8)
    edited = frames[0].copy()
    support = masks[0].astype(bool)
    if cfg.edit_mode == "recolor":
        target = np.asarray(cfg.edit_color) if cfg.edit_color is not None else _far_color(rng, colors[e])
        h, w = sizes[e]
        x0, y0 = pos[e]
        ramp = np.linspace(cfg.edit_strength_min, 1.0, w)
        recolored = np.clip(np.asarray(colors[e]) + ramp[None, :, None] * (target - np.asarray(colors[e])) + textures[e], 0.0, 1.0)
        patch = edited[y0:y0 + h, x0:x0 + w]
        vis = support[y0:y0 + h, x0:x0 + w]
        patch[vis] = recolored[vis]
    else:
        edited[support] = background[support]
    if cfg.edit_noise > 0:
        edited = np.clip(edited + rng.normal(0.0, cfg.edit_noise, size=edited.shape), 0.0, 1.0)

    source = VideoFrames(frames)
    return SyntheticScene(
        source=source,
        edited_first=edited,
        gt_flow=fwd,
        gt_bwd_flow=bwd,
        gt_edit_masks=masks,
        seed=seed,
        config=cfg,
        layers=layers,
    )
