"""Euler sampling, ODE inversion and first-frame classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, NumericalError
from .videoio import read_tensor, write_tensor


@dataclass(frozen=True)
class Schedule:
    """Knots t_0 = 0 < t_1 < ... < t_N = 1, uniformly spaced."""

    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ContractError(f"schedule needs N >= 1 steps, got {self.N}")

    def t(self, i: int) -> float:
        return i / self.N

    @property
    def timesteps(self) -> list[float]:
        """Knots in sampling order, from 1.0 down to 0.0."""
        return [self.t(i) for i in range(self.N, -1, -1)]


def make_schedule(N: int) -> Schedule:
    return Schedule(N)


@dataclass
class GuidanceConfig:
    cfg_scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.cfg_scale) or self.cfg_scale < 0:
            raise ContractError(f"cfg scale must be finite and >= 0, got {self.cfg_scale}")


@dataclass
class Trajectory:
    """Visited states as (t, tokens); optionally spilled to FTC1 files."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    spill_dir: Path | None = None

    def append(self, t, z):
        self.times.append(t)
        if self.spill_dir is None:
            self.states.append(z)
            return
        path = Path(self.spill_dir) / f"state_{len(self.times) - 1:04d}.ftc"
        write_tensor(z, path)
        self.states = [z]

    def __len__(self):
        return len(self.times)

    def state(self, j):
        if self.spill_dir is None:
            return self.states[j]
        j = j % len(self.times)
        return torch.from_numpy(read_tensor(Path(self.spill_dir) / f"state_{j:04d}.ftc"))

    @property
    def final(self):
        return self.states[-1]


def guided_velocity(model, z, cond, t, guidance: GuidanceConfig, hooks=None):
    """v_u + s (v_c - v_u); the unconditional pass sees zero condition tokens and no hooks."""
    v_cond = model.forward_velocity(z, cond, t, hooks)
    s = guidance.cfg_scale
    if s == 1.0:
        return v_cond
    v_uncond = model.forward_velocity(z, torch.zeros_like(cond), t, None)
    return v_uncond + s * (v_cond - v_uncond)


def _clamp(z, cond):
    z = z.clone()
    z[0] = cond
    return z


def _check(z, step):
    if not torch.all(torch.isfinite(z)):
        raise NumericalError(f"non-finite latent state at schedule step {step}", step=step)


def sample_steps(model, z1, cond, sch: Schedule, guidance: GuidanceConfig | None = None, hooks=None):
    """Generator form of :func:`sample`: yields (step_left, t, state), starting with the initial state."""
    guidance = guidance or GuidanceConfig()
    z = _clamp(z1, cond)
    _check(z, sch.N)
    yield sch.N, sch.t(sch.N), z
    for i in range(sch.N, 0, -1):
        if hooks is not None:
            hooks.step = i
        with torch.no_grad():
            v = guided_velocity(model, z, cond, sch.t(i), guidance, hooks)
            z = _clamp(z + (sch.t(i - 1) - sch.t(i)) * v, cond)
        _check(z, i - 1)
        yield i, sch.t(i - 1), z


def sample(model, z1, cond, sch: Schedule, guidance: GuidanceConfig | None = None, hooks=None,
           spill_dir=None) -> Trajectory:
    """Euler steps z_{i-1} = z_i + (t_{i-1} - t_i) v(z_i, t_i) from t = 1 down to t = 0."""
    traj = Trajectory(spill_dir=spill_dir)
    for _, t, z in sample_steps(model, z1, cond, sch, guidance, hooks):
        traj.append(t, z)
    return traj


def invert(model, z0, cond, sch: Schedule, guidance: GuidanceConfig | None = None, hooks=None,
           method: str = "euler", spill_dir=None) -> Trajectory:
    """Integrate the velocity ODE from t = 0 up to t = 1.

    ``euler``: z_i = z_{i-1} + (t_i - t_{i-1}) v(z_{i-1}, t_{i-1}).
    ``fixedpoint:<m>``: starting from the Euler estimate, iterate
    z_i <- z_{i-1} + (t_i - t_{i-1}) v(z_i, t_i) m times, which is the exact
    inverse of one sampler step once converged.
    """
    guidance = guidance or GuidanceConfig(1.0)
    refine = 0
    if method.startswith("fixedpoint"):
        try:
            refine = int(method.split(":", 1)[1]) if ":" in method else 3
        except ValueError:
            raise ContractError(f"bad inversion method {method!r}") from None
        if refine < 1:
            raise ContractError("fixed-point inversion needs at least one iteration")
    elif method != "euler":
        raise ContractError(f"unknown inversion method {method!r}")
    z = _clamp(z0, cond)
    _check(z, 0)
    traj = Trajectory(spill_dir=spill_dir)
    traj.append(sch.t(0), z)
    with torch.no_grad():
        for i in range(1, sch.N + 1):
            dt = sch.t(i) - sch.t(i - 1)
            if hooks is not None:
                hooks.step = i - 1
            v = guided_velocity(model, z, cond, sch.t(i - 1), guidance, hooks)
            z_next = _clamp(z + dt * v, cond)
            for _ in range(refine):
                v = guided_velocity(model, z_next, cond, sch.t(i), guidance, None)
                z_next = _clamp(z + dt * v, cond)
            z = z_next
            _check(z, i)
            traj.append(sch.t(i), z)
    return traj
