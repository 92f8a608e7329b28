"""Toy first-frame-conditioned rectified-flow video transformer.

The tokenizer is a fixed linear map with orthonormal columns, so decoding is
its transpose and the round trip is exact. Latent frame 0 always holds the
clean encoding of the conditioning frame; the other ``n`` latent frames each
pack ``r`` consecutive raw frames.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError, GeometryError, TrainingError
from .videoio import Geometry, VideoFrames, read_tensor, write_tensor

# --------------------------------------------------------------------------
# tokenizer


@functools.lru_cache(maxsize=16)
def _encoder_matrix(g: Geometry, seed: int = 1234) -> torch.Tensor:
    """(c, D) matrix with orthonormal columns; D = r * p * p * 3 pixel values."""
    D = g.patch_dim
    if D > g.c:
        raise GeometryError(
            f"token width c={g.c} is smaller than the {D} pixel values per token (r*p*p*3); "
            "the tokenizer would not be invertible"
        )
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(g.c, D, generator=gen, dtype=torch.float64)
    q, _ = torch.linalg.qr(a)
    return q


def _chunks(frames: np.ndarray, g: Geometry) -> np.ndarray:
    """(F, H, W, 3) -> (1+n, r, H, W, 3); chunk 0 repeats frame 0 r times."""
    first = np.repeat(frames[:1], g.r, axis=0)[None]
    rest = frames[1:].reshape(g.n, g.r, g.H, g.W, 3)
    return np.concatenate([first, rest], axis=0)


def _check_video(v, g: Geometry) -> np.ndarray:
    frames = v.frames if isinstance(v, VideoFrames) else np.asarray(v, dtype=np.float64)
    if frames.shape != (g.frames, g.H, g.W, 3):
        raise GeometryError(f"video {frames.shape} does not match geometry {(g.frames, g.H, g.W, 3)}")
    return frames


def patchify(v, g: Geometry, dtype=torch.float32) -> torch.Tensor:
    """Encode a video into latent tokens of shape (1+n, l, c)."""
    frames = _check_video(v, g)
    x = _chunks(frames, g)
    hp, wp, p = g.H // g.p, g.W // g.p, g.p
    x = x.reshape(g.latent_frames, g.r, hp, p, wp, p, 3).transpose(0, 2, 4, 1, 3, 5, 6)
    x = torch.from_numpy(np.ascontiguousarray(x.reshape(g.latent_frames, g.l, g.patch_dim)))
    return (x @ _encoder_matrix(g).T).to(dtype)


def patchify_frame(img, g: Geometry, dtype=torch.float32) -> torch.Tensor:
    """Clean conditioning tokens (l, c) for a single first frame."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (g.H, g.W, 3):
        raise GeometryError(f"frame {img.shape} does not match geometry {(g.H, g.W, 3)}")
    video = np.broadcast_to(img, (g.frames, g.H, g.W, 3))
    return patchify(video, g, dtype)[0]


def unpatchify_array(z, g: Geometry) -> np.ndarray:
    """Exact left inverse of :func:`patchify`, unclipped, as (F, H, W, 3)."""
    z = torch.as_tensor(z)
    if tuple(z.shape) != (g.latent_frames, g.l, g.c):
        raise GeometryError(f"tokens {tuple(z.shape)} do not match geometry {(g.latent_frames, g.l, g.c)}")
    x = (z.to(torch.float64) @ _encoder_matrix(g)).numpy()
    hp, wp, p = g.H // g.p, g.W // g.p, g.p
    x = x.reshape(g.latent_frames, hp, wp, g.r, p, p, 3).transpose(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(g.latent_frames, g.r, g.H, g.W, 3)
    first = x[0].mean(axis=0, keepdims=True)
    rest = x[1:].reshape(g.r * g.n, g.H, g.W, 3)
    return np.concatenate([first, rest], axis=0)


def unpatchify(z, g: Geometry) -> VideoFrames:
    return VideoFrames(np.clip(unpatchify_array(z, g), 0.0, 1.0), g)


def rf_forward(z0, z1, t):
    """Straight-line corruption: (1 - t) * z0 + t * z1."""
    return (1 - t) * z0 + t * z1


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    geometry: Geometry = field(default_factory=Geometry)
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.geometry.c % self.heads:
            raise ContractError(f"c={self.geometry.c} is not divisible by {self.heads} heads")
        if self.blocks < 1:
            raise ContractError("need at least one block")

    @property
    def head_dim(self) -> int:
        return self.geometry.c // self.heads


def attention(q, k, v, return_weights=False):
    """softmax(q k^T / sqrt(d)) v over every token of the clip at once."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"attention shapes disagree: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    d = q.shape[-1]
    if d <= 0:
        raise ContractError("head dimension must be positive")
    logits = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(d))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of t in [0, 1] (scaled by 1000 like DDPM timesteps)."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Block(nn.Module):
    def __init__(self, c, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(c)
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.o = nn.Linear(c, c)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = nn.Sequential(nn.Linear(c, mlp_ratio * c), nn.GELU(), nn.Linear(mlp_ratio * c, c))

    def _split(self, x):
        B, T, c = x.shape
        return x.reshape(B, T, self.heads, c // self.heads).permute(0, 2, 1, 3).contiguous()

    def forward(self, x, index, hooks=None, record=None):
        h = self.norm1(x)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        if hooks is not None:
            q, k = hooks.apply(index, q, k)
        if record is not None:
            out, w = attention(q, k, v, return_weights=True)
            record.append({"q": q, "k": k, "weights": w})
        else:
            out = attention(q, k, v)
        B, _, T, d = out.shape
        x = x + self.o(out.permute(0, 2, 1, 3).reshape(B, T, self.heads * d))
        return x + self.mlp(self.norm2(x))


class ToyRF(nn.Module):
    """Velocity network v(z_t, t | first frame) over (1+n) x l tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.geometry
        c = g.c
        gen = torch.Generator().manual_seed(cfg.seed)
        self.in_proj = nn.Linear(c, c)
        self.pos = nn.Parameter(0.02 * torch.randn(g.latent_frames * g.l, c, generator=gen))
        self.time_mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        self.blocks = nn.ModuleList([Block(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks)])
        self.norm_out = nn.LayerNorm(c)
        self.head = nn.Linear(c, c)
        self._init_weights(gen)

    def _init_weights(self, gen):
        for name, p in self.named_parameters():
            if name == "pos":
                continue
            if p.ndim == 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                with torch.no_grad():
                    p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
            elif "norm" in name and name.endswith("weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)

    @property
    def geometry(self) -> Geometry:
        return self.cfg.geometry

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward_velocity(self, z, cond, t, hooks=None, record=None):
        """Velocity for tokens ``z`` (.., 1+n, l, c) at time ``t``.

        Latent frame 0 is replaced by ``cond`` before the transformer runs.
        """
        g = self.geometry
        unbatched = z.dim() == 3
        if unbatched:
            z = z[None]
        if tuple(z.shape[1:]) != (g.latent_frames, g.l, g.c):
            raise GeometryError(f"tokens {tuple(z.shape[1:])} do not match geometry {(g.latent_frames, g.l, g.c)}")
        B = z.shape[0]
        cond = torch.as_tensor(cond, dtype=z.dtype)
        if cond.dim() == 2:
            cond = cond[None].expand(B, -1, -1)
        z = torch.cat([cond[:, None], z[:, 1:]], dim=1)
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(B)
        temb = self.time_mlp(timestep_embedding(t, g.c).to(z.dtype))
        x = self.in_proj(z.reshape(B, -1, g.c)) + self.pos[None] + temb[:, None]
        for b, block in enumerate(self.blocks):
            x = block(x, b, hooks, record)
        v = self.head(self.norm_out(x)).reshape(B, g.latent_frames, g.l, g.c)
        return v[0] if unbatched else v


# --------------------------------------------------------------------------
# training


def rf_loss(model: ToyRF, z0, cond, z1, t):
    """Mean squared velocity error over latent frames 1..n (frame 0 is the condition)."""
    tt = torch.as_tensor(t, dtype=z0.dtype).reshape(-1, 1, 1, 1)
    zt = rf_forward(z0, z1, tt)
    v = model.forward_velocity(zt, cond, t)
    return ((z1 - z0)[:, 1:] - v[:, 1:]).pow(2).mean()


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 16
    lr: float = 0.05
    optimizer: str = "sgd"       # sgd (momentum-free) | adam
    cond_dropout: float = 0.1
    precision: str = "f32"       # f32 | f64
    flip_augment: bool = True
    log_every: int = 0


@dataclass
class TrainResult:
    model: ToyRF
    losses: list
    seed: int

    @property
    def loss_final(self) -> float:
        tail = self.losses[-min(len(self.losses), 20):]
        return float(np.mean(tail))


def _dtype(precision):
    return {"f32": torch.float32, "f64": torch.float64}[precision]


def encode_dataset(scenes, g: Geometry, flip_augment=False, dtype=torch.float32) -> torch.Tensor:
    videos = [s.source.frames if hasattr(s, "source") else s.frames for s in scenes]
    if flip_augment:
        videos = videos + [v[:, :, ::-1] for v in videos] + [v[:, ::-1] for v in videos]
    return torch.stack([patchify(np.ascontiguousarray(v), g, dtype) for v in videos])


def train_toy(scenes, hp: TrainConfig | None = None, seed: int = 0, model_cfg: ModelConfig | None = None,
              log=None) -> TrainResult:
    """Fit the velocity field on clean token clips of ``scenes``."""
    hp = hp or TrainConfig()
    g = model_cfg.geometry if model_cfg else Geometry(
        H=scenes[0].source.frames.shape[1], W=scenes[0].source.frames.shape[2])
    model_cfg = model_cfg or ModelConfig(geometry=g, seed=seed)
    dtype = _dtype(hp.precision)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = ToyRF(model_cfg).to(dtype)
    data = encode_dataset(scenes, model_cfg.geometry, hp.flip_augment, dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    if hp.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=hp.lr)
    elif hp.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=hp.lr)
    else:
        raise ContractError(f"unknown optimizer {hp.optimizer!r}")
    losses = []
    for step in range(hp.steps):
        idx = torch.randint(0, data.shape[0], (hp.batch,), generator=gen)
        z0 = data[idx]
        z1 = torch.randn(z0.shape, generator=gen, dtype=dtype)
        t = torch.rand(hp.batch, generator=gen, dtype=torch.float64)
        keep = (torch.rand(hp.batch, generator=gen) >= hp.cond_dropout).to(dtype)
        cond = z0[:, 0] * keep[:, None, None]
        loss = rf_loss(model, z0, cond, z1, t)
        if not torch.isfinite(loss):
            raise TrainingError(f"loss became {loss.item()} at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log and hp.log_every and (step % hp.log_every == 0 or step == hp.steps - 1):
            log(f"step {step} loss {np.mean(losses[-hp.log_every:]):.4f}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TrainResult(model=model, losses=losses, seed=seed)


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: ToyRF, dir_path, **extra):
    """One FTC1 file per parameter plus ``manifest.txt`` (key=value)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    g = cfg.geometry
    manifest = {
        "blocks": cfg.blocks, "heads": cfg.heads, "dim": g.c, "patch": g.p, "r": g.r, "n": g.n,
        "height": g.H, "width": g.W, "mlp_ratio": cfg.mlp_ratio, "seed": cfg.seed,
    }
    manifest.update(extra)
    for name, p in model.state_dict().items():
        write_tensor(p, dir_path / f"{name}.ftc")
    (dir_path / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_manifest(dir_path) -> dict:
    out = {}
    for line in (Path(dir_path) / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_model(dir_path, dtype=torch.float32) -> ToyRF:
    m = read_manifest(dir_path)
    g = Geometry(H=int(m["height"]), W=int(m["width"]), r=int(m["r"]), n=int(m["n"]),
                 p=int(m["patch"]), c=int(m["dim"]))
    cfg = ModelConfig(geometry=g, blocks=int(m["blocks"]), heads=int(m["heads"]),
                      mlp_ratio=int(m.get("mlp_ratio", 4)), seed=int(m.get("seed", 0)))
    model = ToyRF(cfg)
    state = {name: torch.from_numpy(read_tensor(Path(dir_path) / f"{name}.ftc")) for name in model.state_dict()}
    model.load_state_dict(state)
    model = model.to(dtype)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
