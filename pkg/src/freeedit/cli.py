"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
Every output directory or file is assembled under a temporary name next to
its destination and renamed into place once complete.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import maskprop
from .errors import (ConfigError, ContractError, FormatError, FreeEditError, GeometryError,
                     UndefinedRegionError)
from .flow import (FlowParams, estimate_backward_sequence, estimate_sequence, fb_consistency,
                   read_flow_sequence, write_flow_sequence)
from .metrics import evaluate, mask_iou
from .pipeline import EditJob, StageError, ablate_thr, edit_video, format_report, format_table
from .rfnet import ModelConfig, TrainConfig, load_model, save_model, train_toy
from .videoio import (Geometry, SceneConfig, VideoFrames, format_scene_config, gen_moving_shapes,
                      load_frames, load_image, parse_scene_config, save_frames, save_image, write_tensor)

log = logging.getLogger("freeedit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ContractError, ConfigError, GeometryError, FormatError, UndefinedRegionError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# atomic outputs


@contextmanager
def atomic_dir(dest):
    """Yield a scratch directory that replaces ``dest`` only if the block succeeds."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if dest.exists():
        old = dest.with_name(f".{dest.name}.old-{os.getpid()}")
        os.replace(dest, old)
    os.replace(tmp, dest)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True) if old.is_dir() else old.unlink()


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# input helpers


def _scene_dir(source: Path) -> Path:
    """A scene directory holds ``frames/``; ``--source`` may name either."""
    return source if (source / "frames").is_dir() else source.parent


def _frames_dir(source: Path) -> Path:
    return source / "frames" if (source / "frames").is_dir() else source


def _load_gt_masks(scene: Path):
    d = scene / "gt_masks"
    if not d.is_dir():
        return None
    files = sorted(d.glob("mask_*.png"))
    return np.stack([maskprop.load_mask_png(f) for f in files]) if files else None


def _flows_for(args, source: VideoFrames, scene: Path):
    """(fwd, bwd) from --flow lk | gt | file:<dir>; bwd may be None."""
    if args.flow == "lk":
        params = FlowParams()
        return estimate_sequence(source, params), estimate_backward_sequence(source, params)
    if args.flow == "gt":
        d = scene / "gt_flow"
        if not d.is_dir():
            raise ContractError(f"--flow gt needs ground-truth flow in {d}")
        return read_flow_sequence(d, "flow"), read_flow_sequence(d, "bwd")
    if args.flow.startswith("file:"):
        d = Path(args.flow[5:])
        fwd = read_flow_sequence(d, "flow")
        try:
            bwd = read_flow_sequence(d, "bwd")
        except FormatError:
            bwd = None
        return fwd, bwd
    raise ContractError(f"--flow must be lk, gt or file:<dir>, got {args.flow!r}")


def _occlusions_for(args, scene: Path, fwd, bwd):
    """Stored scene occlusions for --flow gt when present, else forward-backward checks."""
    d = scene / "gt_flow"
    files = sorted(d.glob("occ_*.png")) if args.flow == "gt" else []
    if files and len(files) == len(fwd):
        return [maskprop.load_mask_png(f) for f in files]
    return [fb_consistency(f, b, args.tau) for f, b in zip(fwd, bwd)] if bwd else None


def _check_thr(thr):
    if thr < 0:
        raise ContractError(f"--thr must be >= 0 (the difference threshold is a magnitude), got {thr}")


def _job_from_args(args, source, edited, scene):
    fwd, bwd = _flows_for(args, source, scene)
    return EditJob(
        source=source, edited_first=edited, flow="gt", thr=args.thr, steps=args.steps,
        cfg_edit=args.cfg_edit, cfg_invert=args.cfg_invert, cfg_recon=args.cfg_recon,
        injection=args.injection, lambda_scale=args.lambda_scale, force_lambda=args.force_lambda,
        downsample=args.downsample, compress=args.compress, dilate=args.dilate,
        inversion=args.inversion, tau=args.tau, gt_flow=fwd, gt_bwd_flow=bwd,
        gt_occlusions=_occlusions_for(args, scene, fwd, bwd) if args.flow == "gt" else None,
        gt_masks=_load_gt_masks(scene), streaming=args.streaming, seed=args.seed,
    )


def _dtype(args):
    return torch.float64 if args.precision == "f64" else torch.float32


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = parse_scene_config(Path(args.config).read_text()) if args.config else SceneConfig()
    overrides = {k: getattr(args, k) for k in ("height", "width", "frames", "shapes") if getattr(args, k) is not None}
    if args.edit_noise is not None:
        overrides["edit_noise"] = args.edit_noise
    if overrides:
        cfg = SceneConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    if args.count < 1:
        raise ContractError("--count must be >= 1")
    with atomic_dir(args.out) as tmp:
        for j in range(args.count):
            seed = args.seed + j
            scene = gen_moving_shapes(cfg, seed)
            d = tmp / f"scene_{j:04d}"
            save_frames(scene.source, d / "frames")
            save_image(scene.edited_first, d / "edited_first.png")
            write_flow_sequence(scene.gt_flow, d / "gt_flow", "flow")
            write_flow_sequence(scene.gt_bwd_flow, d / "gt_flow", "bwd")
            maskprop.save_mask_sequence(scene.gt_edit_masks, d / "gt_masks")
            for k, o in enumerate(scene.gt_occlusions()):
                maskprop.save_mask_png(o, d / "gt_flow" / f"occ_{k:04d}.png")
            (d / "scene.txt").write_text(f"seed={seed}\n" + format_scene_config(cfg))
    log.info("wrote %d scenes to %s", args.count, args.out)
    return EXIT_OK


def _scene_dirs(root: Path):
    dirs = sorted(p for p in root.iterdir() if (p / "frames").is_dir())
    if not dirs and (root / "frames").is_dir():
        dirs = [root]
    if not dirs:
        raise FormatError(f"no scene directories with frames/ under {root}")
    return dirs


def cmd_train(args):
    videos = [load_frames(d / "frames") for d in _scene_dirs(Path(args.scenes))]
    F, H, W, _ = videos[0].frames.shape
    if any(v.frames.shape != videos[0].frames.shape for v in videos):
        raise GeometryError("training videos must share one shape")
    g = Geometry.for_frames(F, H, W, r=args.r, p=args.patch, c=args.dim)
    hp = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, optimizer=args.optimizer,
                     cond_dropout=args.cond_dropout, precision=args.precision, log_every=args.log_every)
    mcfg = ModelConfig(geometry=g, blocks=args.blocks, heads=args.heads, seed=args.seed)
    res = train_toy(videos, hp, seed=args.seed, model_cfg=mcfg, log=log.info)
    with atomic_dir(args.out) as tmp:
        save_model(res.model, tmp, loss_final=f"{res.loss_final:.6g}", steps=args.steps,
                   lr=args.lr, optimizer=args.optimizer, train_seed=args.seed)
        (tmp / "losses.txt").write_text("".join(f"{x:.6g}\n" for x in res.losses))
    log.info("final loss %.4f; model in %s", res.loss_final, args.out)
    return EXIT_OK


def cmd_edit(args):
    _check_thr(args.thr)
    source_dir = Path(args.source)
    scene = _scene_dir(source_dir)
    source = load_frames(_frames_dir(source_dir))
    edited = load_image(args.edited_frame)
    model = load_model(args.model, _dtype(args))
    job = _job_from_args(args, source, edited, scene)
    res = edit_video(job, model)
    with atomic_dir(args.out) as tmp:
        save_frames(res.edited, tmp / "frames")
        maskprop.save_mask_sequence(res.masks, tmp / "masks")
        write_tensor(res.lam, tmp / "lambda.ftc")
        write_tensor(res.token_mask.astype(np.float32), tmp / "token_mask.ftc")
        if args.save_reconstruction:
            save_frames(res.reconstruction, tmp / "reconstruction")
        (tmp / "report.txt").write_text(format_report(res.report))
    log.info("edited video in %s", args.out)
    return EXIT_OK


def cmd_propagate_mask(args):
    _check_thr(args.thr)
    source_dir = Path(args.source)
    source = load_frames(_frames_dir(source_dir))
    edited = load_image(args.edited_frame)
    fwd, bwd = _flows_for(args, source, _scene_dir(source_dir))
    occ = _occlusions_for(args, _scene_dir(source_dir), fwd, bwd)
    m0 = maskprop.first_frame_mask(source[0], edited, args.thr, args.dilate)
    masks = maskprop.propagate(m0, fwd, occ, occ_space="source")
    F, H, W, _ = source.frames.shape
    g = Geometry.for_frames(F, H, W, r=args.r, p=args.patch, c=args.dim)
    tm = maskprop.downsample_flatten(maskprop.compress_temporal(masks, g.r, args.compress), g, args.downsample)
    lam = maskprop.modulation_weights(tm, args.lambda_scale)
    with atomic_dir(args.out) as tmp:
        maskprop.save_mask_sequence(masks, tmp / "masks")
        write_tensor(tm.astype(np.float32), tmp / "token_mask.ftc")
        write_tensor(lam, tmp / "lambda.ftc")
        lines = [f"mask_area={masks.mean():.6g}", f"edited_tokens={int(tm.sum())}"]
        gt = _load_gt_masks(_scene_dir(source_dir))
        if gt is not None and gt.shape == masks.shape:
            lines.append(f"iou={mask_iou(masks, gt):.6g}")
        (tmp / "report.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(args):
    source_dir = Path(args.source)
    source = load_frames(_frames_dir(source_dir))
    edited_dir = Path(args.edited)
    edited = load_frames(_frames_dir(edited_dir))
    fwd, bwd = _flows_for(args, source, _scene_dir(source_dir))
    occ = _occlusions_for(args, _scene_dir(source_dir), fwd, bwd)
    masks_dir = Path(args.masks) if args.masks else edited_dir / "masks"
    masks = None
    if masks_dir.is_dir():
        masks = np.stack([maskprop.load_mask_png(f) for f in sorted(masks_dir.glob("mask_*.png"))])
    rep = evaluate(source, edited, fwd, masks=masks, occlusions=occ,
                   gt_masks=_load_gt_masks(_scene_dir(source_dir)))
    text = "# warp_error excludes occluded and out-of-frame pixels\n"
    text += "".join(f"{k}={'none' if v is None else f'{v:.6g}'}\n" for k, v in rep.as_dict().items())
    out = Path(args.out) if args.out else edited_dir / "eval.txt"
    atomic_write_text(out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flow(args):
    source = load_frames(_frames_dir(Path(args.source)))
    params = FlowParams(levels=args.levels, window=args.window, iterations=args.iterations, damping=args.damping)
    fwd = estimate_sequence(source, params)
    bwd = estimate_backward_sequence(source, params)
    with atomic_dir(args.out) as tmp:
        write_flow_sequence(fwd, tmp, "flow")
        write_flow_sequence(bwd, tmp, "bwd")
        occ = np.stack([fb_consistency(f, b, args.tau) for f, b in zip(fwd, bwd)])
        maskprop.save_mask_sequence(occ, tmp / "occlusion")
    return EXIT_OK


def cmd_ablate(args):
    for thr in args.thr_list:
        _check_thr(thr)
    source_dir = Path(args.source)
    scene = _scene_dir(source_dir)
    source = load_frames(_frames_dir(source_dir))
    edited = load_image(args.edited_frame)
    model = load_model(args.model, _dtype(args))
    args.thr = args.thr_list[0]
    job = _job_from_args(args, source, edited, scene)
    rows, masks = ablate_thr(job, model, args.thr_list)
    table = format_table(rows)
    with atomic_dir(args.out) as tmp:
        (tmp / "table.tsv").write_text(table)
        for thr, ms in masks.items():
            maskprop.save_mask_sequence(ms, tmp / f"masks_thr{thr:g}")
    sys.stdout.write(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _add_flow_args(p):
    p.add_argument("--flow", default="lk", help="lk | gt | file:<dir> (default lk)")
    p.add_argument("--tau", type=float, default=1.0, help="forward-backward tolerance in pixels")


def _add_mask_args(p):
    p.add_argument("--thr", type=float, default=maskprop.THR_DEFAULT, help="difference threshold on the 0-255 scale")
    p.add_argument("--dilate", type=int, default=0, help="disk radius applied to the first-frame mask")
    p.add_argument("--downsample", choices=("max", "mean"), default="max")
    p.add_argument("--compress", choices=("chunk", "literal"), default="chunk")
    p.add_argument("--lambda-scale", type=_unit, default=1.0, help="value given to non-edited tokens")


def _add_edit_args(p):
    p.add_argument("--source", required=True, help="scene directory or frame directory")
    p.add_argument("--edited-frame", required=True, help="PNG of the edited first frame")
    p.add_argument("--model", required=True, help="checkpoint directory")
    _add_mask_args(p)
    _add_flow_args(p)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-edit", type=float, default=3.0)
    p.add_argument("--cfg-invert", type=float, default=1.0)
    p.add_argument("--cfg-recon", type=float, default=None, help="defaults to --cfg-edit")
    p.add_argument("--injection", choices=("none", "vanilla", "ree"), default="ree")
    p.add_argument("--force-lambda", type=_unit, default=None, help="constant lambda for every token")
    p.add_argument("--inversion", default="euler", help="euler | fixedpoint:<m>")
    p.add_argument("--streaming", action="store_true", help="interleave the two branches step by step")
    p.add_argument("--out", required=True)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)
    common.add_argument("--debug", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="freeedit", description="Editing-aware attention injection on a toy rectified-flow video model.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic moving-shape scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--config", help="key=value scene configuration file")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--shapes", type=int)
    p.add_argument("--edit-noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="fit the toy velocity model")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", parents=[common], help="propagate an edited first frame through a video")
    _add_edit_args(p)
    p.add_argument("--save-reconstruction", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("propagate-mask", parents=[common], help="first-frame mask, flow propagation and lambda")
    p.add_argument("--source", required=True)
    p.add_argument("--edited-frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--dim", type=int, default=128)
    _add_mask_args(p)
    _add_flow_args(p)
    p.set_defaults(func=cmd_propagate_mask)

    p = sub.add_parser("eval", parents=[common], help="warp error, SSIM, PSNR and masked variants")
    p.add_argument("--source", required=True)
    p.add_argument("--edited", required=True, help="edit output directory or frame directory")
    p.add_argument("--masks", help="mask directory (default <edited>/masks)")
    p.add_argument("--out", help="report path (default <edited>/eval.txt)")
    _add_flow_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flow", parents=[common], help="estimate forward/backward flow and occlusion")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--damping", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("ablate", parents=[common], help="run the edit at several thresholds")
    _add_edit_args(p)
    p.add_argument("--thr-list", type=_float_list, default=[5.0, 35.0, 65.0])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    for name, default in (("seed", 0), ("threads", 1), ("precision", "f32"), ("debug", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("freeedit: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    torch.set_num_threads(args.threads)
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except StageError as exc:
        code = EXIT_INVALID if isinstance(exc.cause, VALIDATION_ERRORS) else EXIT_RUNTIME
        _report(args, exc, f"stage {exc.stage} failed: {exc.cause}")
        return code
    except VALIDATION_ERRORS as exc:
        _report(args, exc, f"invalid input: {exc}")
        return EXIT_INVALID
    except (FreeEditError, OSError, RuntimeError) as exc:
        _report(args, exc, f"{args.command} failed: {exc}")
        return EXIT_RUNTIME


def _report(args, exc, message):
    print(f"freeedit: {message}", file=sys.stderr)
    if args.debug:
        traceback.print_exception(exc, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
