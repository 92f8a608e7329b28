import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

from freeedit.errors import ContractError, GeometryError
from freeedit.pipeline import (EditJob, StageError, ablate_thr, edit_video, format_report, format_table,
                               resolve_flows, self_reconstruct)
from freeedit.rfnet import ModelConfig, ToyRF, patchify
from freeedit.videoio import Geometry, SceneConfig, gen_moving_shapes

G = Geometry(H=16, W=16, p=4, r=2, n=2, c=96)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ToyRF(ModelConfig(geometry=G, blocks=2, heads=4, seed=5)).eval()


@pytest.fixture(scope="module")
def scene():
    cfg = SceneConfig(height=16, width=16, frames=5, shapes=1, sizes=[(6, 6)], positions=[(3, 4)],
                      velocities=[(1, 1)])
    return gen_moving_shapes(cfg, seed=8)


def job(scene, **kw):
    kw.setdefault("steps", 6)
    return EditJob.from_scene(scene, **kw)


class ConstantModel:
    """State-independent velocity: the round trip telescopes back to the source."""

    def __init__(self, g):
        self.geometry = g
        self.dtype = torch.float64
        self.blocks = [None]
        self.k = torch.linspace(-1, 1, g.latent_frames * g.l * g.c, dtype=torch.float64).reshape(
            g.latent_frames, g.l, g.c)

    def forward_velocity(self, z, cond, t, hooks=None):
        if hooks is not None:
            q = torch.zeros(1, 1, z.shape[0] * z.shape[1], 4, dtype=z.dtype)
            hooks.apply(0, q, q)
        return self.k.clone()


def test_job_validation(scene):
    with pytest.raises(ContractError):
        job(scene, thr=-1)
    with pytest.raises(GeometryError):
        EditJob(source=scene.source, edited_first=np.zeros((8, 8, 3)))
    with pytest.raises(ContractError):
        job(scene, injection="soft")
    with pytest.raises(ContractError):
        job(scene, force_lambda=2.0)


def test_unchanged_first_frame_makes_ree_equal_vanilla(scene, model):
    same = np.array(scene.source[0])
    ree = edit_video(job(scene, edited_first=same, injection="ree"), model)
    van = edit_video(job(scene, edited_first=same, injection="vanilla"), model)
    assert np.all(ree.lam == 1.0)
    assert torch.equal(ree.z_edit, van.z_edit)


def test_forced_endpoints_are_bitwise(scene, model):
    one = edit_video(job(scene, force_lambda=1.0), model)
    van = edit_video(job(scene, injection="vanilla"), model)
    assert torch.equal(one.z_edit, van.z_edit)
    zero = edit_video(job(scene, force_lambda=0.0), model)
    none = edit_video(job(scene, injection="none"), model)
    assert torch.equal(zero.z_edit, none.z_edit)


def test_result_contents(scene, model):
    res = edit_video(job(scene), model)
    assert res.edited.frames.shape == scene.source.frames.shape
    assert res.masks.shape == (5, 16, 16) and res.lam.shape == (3, 16, 1)
    assert res.report["iou"] == 1.0
    assert res.report["audited_keys"] == 5
    assert {"time_flow", "time_mask", "time_invert", "time_sample", "time_metrics"} <= set(res.report)
    assert len(res.cache) == 2 * 6 and res.cache.locked
    # the edited first frame is decoded from the clean condition tokens
    assert np.abs(res.edited.frames[0] - np.clip(scene.edited_first, 0, 1)).max() <= 1e-5
    text = format_report(res.report)
    assert "warp_error=" in text and "psnr_plus=" in text


def test_runs_are_deterministic(scene, model):
    a = edit_video(job(scene), model)
    b = edit_video(job(scene), model)
    assert torch.equal(a.z_edit, b.z_edit) and torch.equal(a.z1, b.z1)
    assert np.array_equal(a.edited.frames, b.edited.frames)


def test_streaming_matches_sequential(scene, model):
    a = edit_video(job(scene), model)
    b = edit_video(job(scene, streaming=True), model)
    assert torch.equal(a.z_edit, b.z_edit)
    assert len(b.cache) == 0


def test_full_frame_mask_warns_for_vanilla(scene, model):
    edited = 1.0 - scene.source[0]
    with pytest.warns(UserWarning):
        edit_video(job(scene, edited_first=edited, injection="vanilla", thr=0), model)


def test_stage_errors_are_tagged(scene, model):
    with pytest.raises(StageError) as exc:
        edit_video(job(scene, flow="file:/nonexistent"), model)
    assert exc.value.stage == "flow"


def test_geometry_must_match_model(model):
    other = gen_moving_shapes(SceneConfig(height=16, width=16, frames=9, shapes=1), 0)
    with pytest.raises(GeometryError):
        edit_video(job(other), model)


def test_constant_model_recovers_the_source(scene):
    cm = ConstantModel(G)
    res = self_reconstruct(job(scene, steps=8), cm)
    z0 = patchify(scene.source, G, torch.float64)
    assert (res.z_edit - z0).abs().max().item() <= 1e-12
    assert res.report["recon_psnr"] >= 90


def test_lk_flow_path_runs(scene, model):
    res = edit_video(job(scene, flow="lk"), model)
    assert res.report["iou"] >= 0.6
    assert len(res.flows) == 4 and len(res.occlusions) == 4


def test_ablation_rows(scene, model):
    rows, masks = ablate_thr(job(scene), model, (5, 35, 65))
    assert [r["thr"] for r in rows] == [5.0, 35.0, 65.0]
    assert set(masks) == {5.0, 35.0, 65.0}
    assert "psnr_outside_gt" in rows[0]
    assert format_table(rows).splitlines()[0].startswith("thr\t")


def test_gt_flow_uses_exact_scene_occlusions():
    # one-pixel steps leave a cycle residual of exactly 1 px, which the fb rule lets through
    cfg = SceneConfig(height=16, width=16, frames=5, shapes=2, sizes=[(4, 4), (6, 4)],
                      positions=[(1, 5), (7, 4)], velocities=[(1, 0), (0, 0)], edit_shape=0)
    s = gen_moving_shapes(cfg, 0)
    j = EditJob.from_scene(s)
    fwd, occ = resolve_flows(j)
    assert all(np.array_equal(a, b) for a, b in zip(occ, s.gt_occlusions()))
    fb = resolve_flows(replace(j, gt_occlusions=None))[1]
    assert sum(int(o.sum()) for o in occ) > sum(int(o.sum()) for o in fb)
