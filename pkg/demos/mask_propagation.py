"""Propagate a first-frame edit mask through a scene with an occluder and print it."""
import numpy as np

from freeedit import maskprop as mp
from freeedit.metrics import mask_iou
from freeedit.videoio import Geometry, SceneConfig, gen_moving_shapes


def show(m):
    return "\n".join("".join("#" if v else "." for v in row) for row in m)


def main():
    # shape 0 slides right under a static shape drawn above it
    cfg = SceneConfig(height=12, width=24, frames=9, shapes=2, sizes=[(4, 4), (8, 6)],
                      positions=[(1, 4), (12, 2)], velocities=[(2, 0), (0, 0)], edit_shape=0)
    scene = gen_moving_shapes(cfg, seed=1)
    m0 = mp.first_frame_mask(scene.source[0], scene.edited_first)
    # scene occlusions flag pixels of frame k whose next position is hidden
    ms = mp.propagate(m0, scene.gt_flow, scene.gt_occlusions(), occ_space="source")
    # once hidden, mask pixels stay off: the part that re-emerges is not recovered
    for k in (0, 4, 8):
        print(f"frame {k}  area={int(ms[k].sum())}  iou={mask_iou(ms[k], scene.gt_edit_masks[k]):.3f}")
        print(show(ms[k]), end="\n\n")
    tokens = mp.downsample_flatten(mp.compress_temporal(ms, 2), _geometry())
    lam = mp.modulation_weights(tokens)
    print("tokens with lambda=0 per latent frame:", (lam[..., 0] == 0).sum(axis=1).tolist())


def _geometry():
    return Geometry(H=12, W=24, p=4, r=2, n=4, c=96)


if __name__ == "__main__":
    np.set_printoptions(linewidth=120)
    main()
