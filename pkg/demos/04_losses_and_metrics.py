#!/usr/bin/env python3
"""The pieces of the training objective, measured on a synthetic scene.

The total objective mixes a photometric L1 term, an SSIM term, a depth
consistency term between camera pairs (render depth in one view, warp it
rigidly into the other, compare) and a structure term pulling the splat
surfaces toward the latest scanned points.
"""

import numpy as np

from voxsplat import Camera, PipelineConfig
from voxsplat.losses import (FrameCamera, delta_depth_loss, l1_photometric,
                             psnr, ssim, structure_similarity_loss, total_loss)
from voxsplat.pipeline import MappingPipeline, FrameSample
from voxsplat.renderer import render
from voxsplat.scene import (CheckerColor, LidarSpec, Plane, SceneSpec,
                            ground_truth_image, simulate_scan)

config = PipelineConfig(sensor_var=1e-4)
plane = Plane(normal=(0, 0, 1.0), offset=0.1, color=CheckerColor(0.18))
cams = [Camera.looking_at(eye=(0.06 * i, 0, 1.6), target=(0.06 * i, 0, 0.1),
                          up=(0, 1, 0), fx=70, fy=70, cx=31.5, cy=31.5,
                          width=64, height=64) for i in range(2)]
lidar = LidarSpec(rays_per_frame=3000, pattern="line-scan", rows=12,
                  noise_sigma=0.006, fov_az=2 * np.arctan(0.45 / 1.5),
                  fov_el=2 * np.arctan(0.35 / 1.5))
spec = SceneSpec(surfaces=[plane], cameras=cams, lidar=lidar, seed=13)

pipe = MappingPipeline(config)
frames = []
for i, cam in enumerate(cams):
    sample = FrameSample(float(i), simulate_scan(spec, i),
                         ground_truth_image(spec, cam), cam)
    pipe.ingest_frame(sample)
    frames.append(sample)
print(f"map holds {len(pipe.gmap)} primitives from "
      f"{sum(1 for c in pipe.vmap.cells.values() if c.solved)} voxels")

# a few descent steps push opacities up so the silhouettes clear the
# information threshold and the depth term has pixels to compare
for _ in range(6):
    pipe.optimize_once(frames, frames[-1].points.positions)
print("ran 6 optimizer steps to warm the map up\n")

rendered = [FrameCamera(f.camera, f.image,
                        render(pipe.gmap, f.camera, config.near_plane))
            for f in frames]
img = np.clip(rendered[0].buffers.color, 0, 1)

print("image terms against the observed frame 0:")
print(f"  L1    {l1_photometric(rendered[0].buffers.color, frames[0].image):.4f}")
print(f"  SSIM  {ssim(img, frames[0].image):.4f}")
print(f"  PSNR  {psnr(img, frames[0].image):.2f} dB\n")

ld_pair = delta_depth_loss(rendered[0], rendered[1], config.silhouette_threshold)
ld_self = delta_depth_loss(rendered[0], rendered[0], config.silhouette_threshold)
print("depth consistency:")
print(f"  frame 0 onto itself  {ld_self:.6f}  (identity warp)")
print(f"  frame 0 onto frame 1 {ld_pair:.6f}\n")

pts = frames[1].points.positions
lp = structure_similarity_loss(pts, pipe.gmap.positions, pipe.gmap.scales)
lp_hinge = structure_similarity_loss(pts, pipe.gmap.positions,
                                     pipe.gmap.scales, hinge=True)
print("structure term on the latest scan:")
print(f"  signed {lp:+.5f}   hinge {lp_hinge:.5f}\n")

bd = total_loss(rendered, pts, pipe.gmap, config.lambda_ssim,
                config.lambda_d, config.lambda_p, config.silhouette_threshold)
print("combined objective:")
print(f"  l1 {bd.l1:.4f} | ssim {bd.ssim_term:.4f} | l_d {bd.l_d:.5f} "
      f"| l_p {bd.l_p:+.5f}")
print(f"  total {bd.total:.5f}")
