"""The iterative mapping loop.

Per frame: accumulate points into the voxel map, solve the touched voxels,
expand the splat map with newly solved voxels, push the camera into the
sliding window, then run a few optimizer steps on a selection of current and
historical frames. Everything is deterministic under a fixed seed and
single-worker solve order.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .config import PipelineConfig
from .errors import VoxsplatError
from .gpr import densify_frame
from .losses import LossBreakdown, psnr, ssim
from .optimize import optimize_step
from .renderer import render
from .splat_init import GaussianMap, init_gaussians_for_voxel
from .voxel_map import PointCloud, VoxelKey, VoxelMap, VoxelState

log = logging.getLogger(__name__)


@dataclass
class FrameSample:
    """One input frame: world-frame colored points, the observed image, the pose."""

    timestamp: float
    points: PointCloud
    image: np.ndarray
    camera: Camera

    def __post_init__(self):
        H, W = self.camera.height, self.camera.width
        if self.image.shape != (H, W, 3):
            raise VoxsplatError("frame image does not match camera dimensions")


@dataclass
class CameraQueues:
    """Recent-camera window plus the overflow history."""

    window: int
    current: list[FrameSample] = field(default_factory=list)
    history: list[FrameSample] = field(default_factory=list)

    def push(self, frame: FrameSample) -> None:
        self.current.append(frame)
        while len(self.current) > self.window:
            self.history.append(self.current.pop(0))


def select_training_frames(queues: CameraQueues, k_curr: int, k_hist: int,
                           rng) -> list[FrameSample]:
    """The k_curr most recent frames plus k_hist uniform draws from history.

    History draws are without replacement (fewer when the history is small)
    and deterministic under a seeded generator. Ordered chronologically:
    history picks first, then the current frames.
    """
    current = queues.current[-k_curr:] if k_curr > 0 else []
    hist: list[FrameSample] = []
    if k_hist > 0 and queues.history:
        count = min(k_hist, len(queues.history))
        idx = sorted(rng.choice(len(queues.history), size=count, replace=False))
        hist = [queues.history[int(i)] for i in idx]
    return hist + current


@dataclass
class IngestReport:
    frame_index: int
    points_stored: int
    voxels_touched: int
    voxels_solved: int
    newly_active: int
    newly_converged: int
    primitives_added: int
    duration_s: float
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"frame": self.frame_index, "points": self.points_stored,
                "touched": self.voxels_touched, "solved": self.voxels_solved,
                "newly_active": self.newly_active,
                "newly_converged": self.newly_converged,
                "primitives_added": self.primitives_added,
                "ingest_s": round(self.duration_s, 6), "errors": self.errors}


@dataclass
class FrameReport:
    ingest: IngestReport
    loss: LossBreakdown | None
    psnr: float
    ssim: float
    optimize_s: float

    def to_dict(self) -> dict:
        out = self.ingest.to_dict()
        out.update({"psnr": round(self.psnr, 4), "ssim": round(self.ssim, 6),
                    "optimize_s": round(self.optimize_s, 6)})
        if self.loss is not None:
            out.update({"loss_total": self.loss.total, "loss_l1": self.loss.l1,
                        "loss_ssim": self.loss.ssim_term, "loss_ld": self.loss.l_d,
                        "loss_lp": self.loss.l_p})
        return out


@dataclass
class RunResult:
    gmap: GaussianMap
    vmap: VoxelMap
    reports: list[FrameReport]
    metrics: dict


class MappingPipeline:
    """Stateful per-frame mapping orchestrator."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.vmap = VoxelMap.from_config(config)
        self.gmap = GaussianMap()
        self.queues = CameraQueues(window=config.window)
        self.rng = np.random.default_rng(config.seed)
        self.pending_expansion: list[VoxelKey] = []
        self.frame_index = -1

    # -- ingestion ----------------------------------------------------------

    def ingest_frame(self, frame: FrameSample) -> IngestReport:
        """Store, densify, expand. Per-voxel failures never abort the frame."""
        t0 = time.perf_counter()
        self.frame_index += 1
        errors: list[str] = []
        update = self.vmap.store_frame(frame.points)
        first_solve_candidates = {
            key for key in update
            if self.vmap.cells[key].state == VoxelState.READY}
        before = len(self.vmap.transitions)
        try:
            predictions = densify_frame(update, self.vmap, self.config)
        except VoxsplatError as exc:  # densify skips per-voxel errors itself
            predictions = []
            errors.append(str(exc))
        newly_solved = [p.key for p in predictions
                        if p.key in first_solve_candidates]
        self.pending_expansion.extend(newly_solved)

        primitives_added = 0
        if self.pending_expansion and (len(self.pending_expansion)
                                       >= self.config.expansion_threshold):
            for key in self.pending_expansion:
                cell = self.vmap.cells[key]
                try:
                    prims = init_gaussians_for_voxel(cell.last_prediction,
                                                     frame.camera, frame.image,
                                                     self.config)
                except VoxsplatError as exc:
                    errors.append(f"voxel {key}: {exc}")
                    continue
                self.gmap.extend(prims)
                primitives_added += len(prims)
            self.pending_expansion.clear()

        self.queues.push(frame)
        new_transitions = self.vmap.transitions[before:]
        return IngestReport(
            frame_index=self.frame_index,
            points_stored=len(frame.points),
            voxels_touched=len(update),
            voxels_solved=len(predictions),
            newly_active=sum(1 for t in new_transitions
                             if t.new == VoxelState.ACTIVE),
            newly_converged=sum(1 for t in new_transitions
                                if t.new == VoxelState.CONVERGED),
            primitives_added=primitives_added,
            duration_s=time.perf_counter() - t0,
            errors=errors)

    # -- optimization -------------------------------------------------------

    def select_training_frames(self) -> list[FrameSample]:
        return select_training_frames(self.queues, self.config.k_curr,
                                      self.config.k_hist, self.rng)

    def optimize_once(self, frames: list[FrameSample],
                      points: np.ndarray | None) -> LossBreakdown:
        return optimize_step(self.gmap, frames, points, self.config)

    def process_frame(self, frame: FrameSample) -> FrameReport:
        ingest = self.ingest_frame(frame)
        loss = None
        t0 = time.perf_counter()
        if len(self.gmap):
            for _ in range(self.config.iterations):
                frames = self.select_training_frames()
                try:
                    loss = self.optimize_once(frames, frame.points.positions)
                except VoxsplatError as exc:
                    ingest.errors.append(str(exc))
                    log.warning("frame %d: optimization error: %s",
                                self.frame_index, exc)
                    break
        optimize_s = time.perf_counter() - t0
        buffers = render(self.gmap, frame.camera, self.config.near_plane)
        rendered = np.clip(buffers.color, 0.0, 1.0)
        return FrameReport(ingest=ingest, loss=loss,
                           psnr=psnr(rendered, frame.image),
                           ssim=ssim(rendered, frame.image),
                           optimize_s=optimize_s)


def run(stream, config: PipelineConfig) -> RunResult:
    """Run the full loop over a frame stream; frame errors never abort the run."""
    pipeline = MappingPipeline(config)
    reports: list[FrameReport] = []
    for frame in stream:
        reports.append(pipeline.process_frame(frame))
    metrics = {
        "frames": len(reports),
        "primitives": len(pipeline.gmap),
        "voxels": len(pipeline.vmap),
        "converged_voxels": sum(
            1 for c in pipeline.vmap.cells.values()
            if c.state == VoxelState.CONVERGED),
        "mean_psnr": float(np.mean([r.psnr for r in reports])) if reports else 0.0,
        "final_psnr": reports[-1].psnr if reports else 0.0,
        "mean_ssim": float(np.mean([r.ssim for r in reports])) if reports else 0.0,
        "final_ssim": reports[-1].ssim if reports else 0.0,
    }
    return RunResult(gmap=pipeline.gmap, vmap=pipeline.vmap, reports=reports,
                     metrics=metrics)
