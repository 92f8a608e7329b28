import numpy as np
import pytest

from freeedit.cli import atomic_dir, build_parser, main
from freeedit.flow import read_flow_sequence
from freeedit.maskprop import load_mask_png
from freeedit.videoio import load_frames, read_tensor


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "3", "gen-data", "--out", str(root / "data"), "--count", "2", "--shapes", "1"]) == 0
    assert main(["train", "--scenes", str(root / "data"), "--out", str(root / "model"),
                 "--steps", "4", "--batch", "2", "--blocks", "1", "--log-every", "0"]) == 0
    return root


def scene(root):
    return root / "data" / "scene_0000"


def test_gen_data_layout(workspace):
    d = scene(workspace)
    assert len(load_frames(d / "frames")) == 9
    assert (d / "edited_first.png").exists() and (d / "scene.txt").exists()
    assert len(read_flow_sequence(d / "gt_flow", "flow")) == 8
    assert len(read_flow_sequence(d / "gt_flow", "bwd")) == 8
    assert load_mask_png(d / "gt_masks" / "mask_0000.png").any()
    assert (d / "gt_flow" / "occ_0007.png").exists()


def test_train_writes_manifest(workspace):
    text = (workspace / "model" / "manifest.txt").read_text()
    assert "blocks=1" in text and "loss_final=" in text and "seed=0" in text


def test_edit_defaults():
    args = build_parser().parse_args(["edit", "--source", "s", "--edited-frame", "e.png", "--model", "m",
                                      "--out", "o"])
    assert (args.thr, args.steps, args.cfg_edit, args.cfg_invert, args.injection) == (35.0, 50, 3.0, 1.0, "ree")
    assert args.downsample == "max" and args.flow == "lk"


def test_edit_eval_round(workspace, capsys):
    d = scene(workspace)
    out = workspace / "edit"
    code = main(["edit", "--source", str(d), "--edited-frame", str(d / "edited_first.png"),
                 "--model", str(workspace / "model"), "--flow", "gt", "--steps", "3", "--out", str(out)])
    assert code == 0
    assert len(load_frames(out / "frames")) == 9
    assert read_tensor(out / "lambda.ftc").shape == (5, 16, 1)
    report = (out / "report.txt").read_text()
    for key in ("warp_error", "ssim", "psnr", "warp_error_plus", "ssim_plus", "psnr_plus", "iou", "time_sample"):
        assert f"\n{key}=" in report
    assert main(["eval", "--source", str(d), "--edited", str(out), "--flow", "gt"]) == 0
    text = (out / "eval.txt").read_text()
    for key in ("warp_error", "ssim", "psnr", "warp_error_plus", "ssim_plus", "psnr_plus", "iou"):
        assert f"\n{key}=" in text
    assert "psnr=" in capsys.readouterr().out


def test_negative_thr_is_a_validation_error(workspace, capsys):
    d = scene(workspace)
    code = main(["edit", "--source", str(d), "--edited-frame", str(d / "edited_first.png"),
                 "--model", str(workspace / "model"), "--thr", "-1", "--out", str(workspace / "bad")])
    assert code == 1
    err = capsys.readouterr().err
    assert "thr" in err and ">= 0" in err and "Traceback" not in err
    assert not (workspace / "bad").exists()


def test_unknown_flag_and_missing_command(capsys):
    assert main(["edit", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["--threads", "0", "flow", "--source", "x", "--out", "y"]) == 1


def test_runtime_failure_exit_code(workspace, capsys):
    d = scene(workspace)
    code = main(["edit", "--source", str(d), "--edited-frame", str(d / "edited_first.png"),
                 "--model", str(workspace / "nope"), "--out", str(workspace / "bad2")])
    assert code == 2
    assert "Traceback" not in capsys.readouterr().err


def test_missing_frames_is_invalid_input(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["flow", "--source", str(tmp_path / "empty"), "--out", str(tmp_path / "f")]) == 1


def test_propagate_mask_and_flow(workspace):
    d = scene(workspace)
    out = workspace / "prop"
    assert main(["propagate-mask", "--source", str(d), "--edited-frame", str(d / "edited_first.png"),
                 "--flow", "gt", "--out", str(out)]) == 0
    assert "iou=1" in (out / "report.txt").read_text()
    assert read_tensor(out / "token_mask.ftc").shape == (5, 16)
    fl = workspace / "flow"
    assert main(["flow", "--source", str(d / "frames"), "--out", str(fl), "--iterations", "2"]) == 0
    assert len(read_flow_sequence(fl, "flow")) == 8
    assert (fl / "occlusion" / "mask_0007.png").exists()


def test_ablate_table(workspace, capsys):
    d = scene(workspace)
    out = workspace / "ablate"
    assert main(["ablate", "--source", str(d), "--edited-frame", str(d / "edited_first.png"),
                 "--model", str(workspace / "model"), "--flow", "gt", "--steps", "2",
                 "--thr-list", "5,35,65", "--out", str(out)]) == 0
    lines = (out / "table.tsv").read_text().splitlines()
    assert lines[0].startswith("thr\t") and len(lines) == 4
    assert (out / "masks_thr35" / "mask_0000.png").exists()


def test_atomic_dir_leaves_nothing_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with atomic_dir(tmp_path / "out") as tmp:
            (tmp / "partial").write_text("x")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "old.txt").write_text("old")
    with atomic_dir(tmp_path / "out") as tmp:
        (tmp / "new.txt").write_text("new")
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["new.txt"]
    assert np.array_equal(sorted(p.name for p in tmp_path.iterdir()), ["out"])
