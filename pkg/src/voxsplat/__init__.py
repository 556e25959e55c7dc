"""Voxel-hashed GPR densification and Gaussian-splat mapping at desk scale."""

from .camera import Camera
from .config import PipelineConfig
from .gpr import (AxisSelection, GprBatchResult, GprProblem, GprResult,
                  densify_frame, gpr_solve, gpr_solve_batch, kernel_matrix,
                  make_mesh_grid, select_value_axis)
from .losses import (FrameCamera, LossBreakdown, delta_depth_loss,
                     l1_photometric, psnr, ssim, structure_similarity_loss,
                     total_loss)
from .renderer import RenderBuffers, SplatProjection, project_gaussian, render
from .splat_init import (GaussianMap, GaussianPrimitive, Subgrid,
                         init_color, init_covariance, init_gaussians_for_voxel,
                         init_position, partition_subgrids)
from .voxel_map import (ColoredPoint, FrameUpdateSet, PointCloud, VoxelCell,
                        VoxelKey, VoxelMap, VoxelPrediction, VoxelState,
                        classify_voxel, update_voxel_variances, voxel_key)

__version__ = "0.1.0"

__all__ = [
    "Camera", "PipelineConfig",
    "AxisSelection", "GprBatchResult", "GprProblem", "GprResult",
    "densify_frame", "gpr_solve", "gpr_solve_batch", "kernel_matrix",
    "make_mesh_grid", "select_value_axis",
    "FrameCamera", "LossBreakdown", "delta_depth_loss", "l1_photometric",
    "psnr", "ssim", "structure_similarity_loss", "total_loss",
    "RenderBuffers", "SplatProjection", "project_gaussian", "render",
    "GaussianMap", "GaussianPrimitive", "Subgrid", "init_color",
    "init_covariance", "init_gaussians_for_voxel", "init_position",
    "partition_subgrids",
    "ColoredPoint", "FrameUpdateSet", "PointCloud", "VoxelCell", "VoxelKey",
    "VoxelMap", "VoxelPrediction", "VoxelState", "classify_voxel",
    "update_voxel_variances", "voxel_key",
]
