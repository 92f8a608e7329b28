"""Edit recolor scenes with each injection policy and print the metrics side by side.

Usage: python demos/compare_injection.py [checkpoint_dir] [seed ...]
"""
import sys
from pathlib import Path

import torch

from freeedit.metrics import edit_color_distance, video_psnr, warp_error
from freeedit.pipeline import EditJob, edit_video
from freeedit.rfnet import load_model
from freeedit.videoio import SceneConfig, gen_moving_shapes

DEFAULT_MODEL = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "toy_model"


def main(argv):
    torch.set_num_threads(1)
    model = load_model(argv[0] if argv else DEFAULT_MODEL)
    seeds = [int(s) for s in argv[1:]] or [1000, 1001, 1002]
    print("seed  policy   psnr+    color   warp")
    for seed in seeds:
        scene = gen_moving_shapes(SceneConfig(), seed)
        occ = scene.gt_occlusions()
        for policy in ("ree", "vanilla", "none"):
            res = edit_video(EditJob.from_scene(scene, injection=policy), model)
            print(f"{seed}  {policy:8s} {video_psnr(scene.source, res.edited, scene.gt_edit_masks):6.2f}  "
                  f"{edit_color_distance(res.edited, scene.edited_first, scene.gt_edit_masks):.4f}  "
                  f"{warp_error(scene.source, res.edited, scene.gt_flow, occ):.5f}")


if __name__ == "__main__":
    main(sys.argv[1:])
