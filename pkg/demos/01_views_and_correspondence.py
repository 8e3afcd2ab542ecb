"""Two augmented views of one scene and how their patches line up.

Run: python3 demos/01_views_and_correspondence.py [OUT_DIR]

Writes the scene and both views as PPM files and prints the shared region
in every frame, the matching patch cells (mirrored when exactly one view is
flipped) and how close matched cell centers land in the original image.
"""
import sys
from pathlib import Path

import numpy as np

from dupr.geometry import AugmentConfig, Box, patch_correspondence
from dupr.scenes import encode_ppm, synthetic_scenes
from dupr.trainer import make_view_pair


def fmt(box: Box, nd=1):
    return "(" + ", ".join(f"{v:.{nd}f}" for v in box.as_tuple()) + ")"


out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_views")
out.mkdir(parents=True, exist_ok=True)

scene = synthetic_scenes(1, seed=4)[0]
print(f"scene: {scene.size[0]}x{scene.size[1]}, objects {scene.labels}")
for box in scene.gt_boxes:
    print("  gt box", fmt(box))

# photometric jitter changes pixels only, never coordinates
pair = make_view_pair(scene.image, np.random.default_rng(5), AugmentConfig())
for name, t in (("view1", pair.t1), ("view2", pair.t2)):
    print(f"{name}: crop {fmt(t.crop)} -> {t.out_size}, flipped={t.hflip}")

shared = pair.t1.box_to_original(pair.box1)
print("shared region, original frame:", fmt(shared, 2))
print("  in view1:", fmt(pair.box1, 2))
print("  in view2:", fmt(pair.box2, 2))

S = 4
corr = patch_correspondence(pair.t1, pair.t2, S)
print(f"\n{S}x{S} grid correspondence (mirrored={corr.mirrored}):")
for i in range(S):
    print("  " + "  ".join(f"{(i, j)}->{corr.map(i, j)}" for j in range(S)))


def cell_center(box: Box, t, i, j):
    x = box.x_min + (j + 0.5) * box.width / S
    y = box.y_min + (i + 0.5) * box.height / S
    return np.array(t.view_to_original(x, y), dtype=float)


gap = max(np.abs(cell_center(pair.box1, pair.t1, i, j)
                 - cell_center(pair.box2, pair.t2, *corr.map(i, j))).max()
          for i in range(S) for j in range(S))
print(f"largest distance between matched cell centers in the original image: {gap:.2e} px")

(out / "scene.ppm").write_bytes(encode_ppm(scene.image))
(out / "view1.ppm").write_bytes(encode_ppm(pair.view1))
(out / "view2.ppm").write_bytes(encode_ppm(pair.view2))
print(f"\nwrote scene.ppm, view1.ppm, view2.ppm to {out}/")
