import numpy as np
import pytest
import torch

from freeedit.errors import ContractError, NumericalError
from freeedit.rfnet import ModelConfig, ToyRF
from freeedit.sampler import GuidanceConfig, Schedule, guided_velocity, invert, make_schedule, sample
from freeedit.videoio import Geometry

G = Geometry(H=8, W=8, p=4, r=2, n=2, c=96)


class ConstantField:
    def __init__(self, k):
        self.k = k

    def forward_velocity(self, z, cond, t, hooks=None):
        return torch.full_like(z, self.k) if not torch.is_tensor(self.k) else self.k.clone()


class LinearField:
    def forward_velocity(self, z, cond, t, hooks=None):
        return z.clone()


class CondField:
    """v = 2 with a non-zero condition, 1 with the null condition."""

    def forward_velocity(self, z, cond, t, hooks=None):
        return torch.full_like(z, 2.0 if cond.abs().sum() > 0 else 1.0)


class BlowUp:
    def forward_velocity(self, z, cond, t, hooks=None):
        return torch.full_like(z, float("inf") if t < 0.5 else 0.0)


def tokens(seed, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(G.latent_frames, G.l, G.c, generator=gen, dtype=dtype)


def test_schedule():
    s = make_schedule(50)
    ts = s.timesteps
    assert len(ts) == 51 and ts[0] == 1.0 and ts[-1] == 0.0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert np.allclose(np.diff(ts), -1 / 50)
    assert Schedule(1).timesteps == [1.0, 0.0]
    with pytest.raises(ContractError):
        make_schedule(0)


def test_guidance_formula():
    z = torch.zeros(2, 2)
    cond = torch.ones(2)
    assert torch.all(guided_velocity(CondField(), z, cond, 0.5, GuidanceConfig(3.0)) == 4.0)
    assert torch.all(guided_velocity(CondField(), z, cond, 0.5, GuidanceConfig(0.0)) == 1.0)
    with pytest.raises(ContractError):
        GuidanceConfig(-1.0)
    with pytest.raises(ContractError):
        GuidanceConfig(float("nan"))


def test_scale_one_is_the_conditional_pass():
    torch.manual_seed(0)
    m = ToyRF(ModelConfig(geometry=G, blocks=1, seed=0))
    z, cond = tokens(0, torch.float32), tokens(1, torch.float32)[0]
    with torch.no_grad():
        assert torch.equal(guided_velocity(m, z, cond, 0.3, GuidanceConfig(1.0)), m.forward_velocity(z, cond, 0.3))


def test_constant_field_telescopes():
    k = 0.375
    z1 = tokens(0)
    cond = z1[0].clone()
    traj = sample(ConstantField(k), z1, cond, Schedule(64))
    assert len(traj) == 65 and traj.times[0] == 1.0 and traj.times[-1] == 0.0
    assert torch.allclose(traj.final[1:], z1[1:] - k, atol=1e-12)
    one = sample(ConstantField(k), z1, cond, Schedule(1)).final
    assert torch.equal(one[1:], z1[1:] - k)


def test_constant_field_round_trip_is_exact_on_dyadic_values():
    gen = torch.Generator().manual_seed(3)
    z0 = torch.randint(-512, 512, (G.latent_frames, G.l, G.c), generator=gen).to(torch.float64) / 256
    k = torch.randint(-64, 64, z0.shape, generator=gen).to(torch.float64) / 8
    cond = z0[0].clone()
    sch = Schedule(64)
    z1 = invert(ConstantField(k), z0, cond, sch).final
    assert torch.equal(z1[1:], z0[1:] + k[1:])
    assert torch.equal(sample(ConstantField(k), z1, cond, sch).final, z0)


def test_constant_field_round_trip_at_fifty_steps():
    z0 = tokens(4)
    k = tokens(5)
    sch = Schedule(50)
    back = sample(ConstantField(k), invert(ConstantField(k), z0, z0[0], sch).final, z0[0], sch).final
    assert (back - z0).abs().max().item() <= 1e-12


@pytest.mark.parametrize("N", [1, 7, 50])
def test_linear_field_round_trip_factor(N):
    z0 = tokens(6)
    sch = Schedule(N)
    z1 = invert(LinearField(), z0, z0[0], sch).final
    back = sample(LinearField(), z1, z0[0], sch).final
    expected = (1 - 1 / N ** 2) ** N
    ratio = back[1:] / z0[1:]
    assert (ratio - expected).abs().max().item() <= 1e-9
    assert torch.equal(back[0], z0[0])


def test_fixed_point_inversion_tightens_the_round_trip():
    z0 = tokens(7)
    sch = Schedule(10)
    plain = sample(LinearField(), invert(LinearField(), z0, z0[0], sch).final, z0[0], sch).final
    fixed = sample(LinearField(), invert(LinearField(), z0, z0[0], sch, method="fixedpoint:40").final,
                   z0[0], sch).final
    assert (fixed - z0).norm() < 1e-6 * (plain - z0).norm() + 1e-9
    with pytest.raises(ContractError):
        invert(LinearField(), z0, z0[0], sch, method="midpoint")
    with pytest.raises(ContractError):
        invert(LinearField(), z0, z0[0], sch, method="fixedpoint:0")


def test_frame_zero_is_clamped_at_every_state():
    torch.manual_seed(0)
    m = ToyRF(ModelConfig(geometry=G, blocks=1, seed=1))
    z1 = tokens(8, torch.float32)
    cond = tokens(9, torch.float32)[0]
    for traj in (sample(m, z1, cond, Schedule(5), GuidanceConfig(3.0)),
                 invert(m, z1, cond, Schedule(5))):
        assert all(torch.equal(s[0], cond) for s in traj.states)


def test_sampling_is_deterministic():
    torch.manual_seed(0)
    m = ToyRF(ModelConfig(geometry=G, blocks=2, seed=2))
    z1 = tokens(10, torch.float32)
    a = sample(m, z1, z1[0], Schedule(6), GuidanceConfig(3.0))
    b = sample(m, z1, z1[0], Schedule(6), GuidanceConfig(3.0))
    assert all(torch.equal(x, y) for x, y in zip(a.states, b.states))


def test_non_finite_state_reports_step():
    z1 = tokens(11)
    with pytest.raises(NumericalError) as exc:
        sample(BlowUp(), z1, z1[0], Schedule(4))
    assert exc.value.step == 0   # the step from t=0.25 to t=0 produces the bad state


def test_spilled_trajectory(tmp_path):
    z1 = tokens(12, torch.float32)
    traj = sample(ConstantField(0.5), z1, z1[0], Schedule(4), spill_dir=tmp_path)
    assert len(traj) == 5 and len(traj.states) == 1
    assert len(list(tmp_path.glob("state_*.ftc"))) == 5
    assert torch.equal(traj.state(0), z1) and torch.equal(traj.state(-1), traj.final)
