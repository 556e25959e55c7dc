#!/usr/bin/env python3
"""From a prediction grid to nine Gaussian primitives.

Each solved voxel's 81 predicted points split into 9 contiguous subgrids.
A subgrid's points are weighted by inverse posterior variance: confident
points dominate the position (weighted mean) and the shape (weighted
covariance, whose diagonal square roots become the axis scales). The
rotation starts as the identity quaternion; color is grabbed from the
camera image at the projected center.
"""

import numpy as np

from voxsplat import Camera, PipelineConfig
from voxsplat.gpr import densify_frame
from voxsplat.scene import (CheckerColor, LidarSpec, Plane, SceneSpec,
                            ground_truth_image, simulate_scan)
from voxsplat.splat_init import (init_covariance, init_gaussians_for_voxel,
                                 init_position, partition_subgrids, sh0_to_rgb)
from voxsplat.voxel_map import VoxelMap

config = PipelineConfig(sensor_var=1e-4)
plane = Plane(normal=(0, 0, 1.0), offset=0.1, color=CheckerColor(0.15))
camera = Camera.looking_at(eye=(0, 0, 1.6), target=(0, 0, 0.1), up=(0, 1, 0),
                           fx=70, fy=70, cx=31.5, cy=31.5, width=64, height=64)
lidar = LidarSpec(rays_per_frame=3000, pattern="line-scan", rows=12,
                  noise_sigma=0.008, fov_az=2 * np.arctan(0.45 / 1.5),
                  fov_el=2 * np.arctan(0.35 / 1.5))
spec = SceneSpec(surfaces=[plane], cameras=[camera], lidar=lidar, seed=21)
image = ground_truth_image(spec, camera)

vmap = VoxelMap.from_config(config)
predictions = densify_frame(vmap.store_frame(simulate_scan(spec, 0)), vmap, config)
pred = predictions[len(predictions) // 2]
print(f"voxel {tuple(pred.key)}: {len(pred)} predicted points")

subgrids = partition_subgrids(pred, config.n_s, config.n_r, config.weight_floor)
print(f"partitioned into {len(subgrids)} subgrids of {len(subgrids[0].points)}\n")

g = subgrids[4]  # the central subgrid
p = init_position(g)
phi, scale, quat = init_covariance(g, p, config.scale_floor)
print("central subgrid:")
print(f"  weight range      {g.weights.min():.1f} .. {g.weights.max():.1f}")
print(f"  weighted position {np.array2string(p, precision=4)}")
print(f"  covariance diag   {np.array2string(np.diag(phi), precision=8)}")
print(f"  axis scales       {np.array2string(scale, precision=5)}  (sqrt, floored)")
print(f"  rotation          {quat}  (identity)\n")

prims = init_gaussians_for_voxel(pred, camera, image, config)
print(f"{'#':<3}{'position':<28}{'max scale':>10}{'opacity':>9}{'rgb':>22}")
for i, prim in enumerate(prims):
    rgb = np.clip(sh0_to_rgb(prim.color), 0, 1)
    print(f"{i:<3}{np.array2string(prim.position, precision=3):<28}"
          f"{prim.scale.max():>10.4f}{prim.opacity:>9.2f}"
          f"{np.array2string(rgb, precision=2):>22}")
print("\nevery primitive remembers its source voxel:",
      set(p.source_key for p in prims))
