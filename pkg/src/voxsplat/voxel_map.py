"""Spatial hash map of voxels with point accumulation and a four-state lifecycle.

Cells move along ``UNREADY -> READY -> ACTIVE -> CONVERGED`` and never back.
A cell becomes READY once it has accumulated ``tau`` scanned points, ACTIVE
once its regression has been solved, and CONVERGED once the mean posterior
variance of its prediction drops to ``eta``. Converged cells keep
accumulating points but are never handed to the solver again.

After each solve the prediction grid is folded back into the cell as
pseudo-observations whose noise entries carry the per-point posterior
variance, while newly scanned raw points keep the sensor variance. The
training set of the next solve is the union of both, which is what makes the
refinement iteration contract (variances never increase on static scenes)
hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ContractViolationError, InputDomainError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Point containers
# ---------------------------------------------------------------------------

@dataclass
class ColoredPoint:
    """A single LiDAR return: world position, RGB in [0, 1], noise variance m^2."""

    position: np.ndarray
    color: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise InputDomainError("point position must be finite")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InputDomainError("color components must lie in [0, 1]")
        if self.noise_var < 0:
            raise InputDomainError("noise_var must be nonnegative")


@dataclass
class PointCloud:
    """Struct-of-arrays batch of colored points."""

    positions: np.ndarray  # (n, 3) float64
    colors: np.ndarray     # (n, 3) in [0, 1]
    noise_var: np.ndarray  # (n,) m^2

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(-1)
        n = len(self.positions)
        if len(self.colors) != n or len(self.noise_var) != n:
            raise InputDomainError("positions, colors and noise_var must agree in length")
        if n and not np.all(np.isfinite(self.positions)):
            raise InputDomainError("point positions must be finite")
        if n and (self.colors.min() < 0 or self.colors.max() > 1):
            raise InputDomainError("color components must lie in [0, 1]")
        if n and self.noise_var.min() < 0:
            raise InputDomainError("noise variances must be nonnegative")

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty(0))

    @classmethod
    def from_points(cls, points: Iterable[ColoredPoint]) -> "PointCloud":
        pts = list(points)
        if not pts:
            return cls.empty()
        return cls(np.stack([p.position for p in pts]),
                   np.stack([p.color for p in pts]),
                   np.array([p.noise_var for p in pts]))

    @staticmethod
    def concat(*clouds: "PointCloud") -> "PointCloud":
        clouds = [c for c in clouds if c is not None and len(c)]
        if not clouds:
            return PointCloud.empty()
        return PointCloud(np.concatenate([c.positions for c in clouds]),
                          np.concatenate([c.colors for c in clouds]),
                          np.concatenate([c.noise_var for c in clouds]))

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index], self.noise_var[index])

    def point(self, i: int) -> ColoredPoint:
        return ColoredPoint(self.positions[i], self.colors[i], float(self.noise_var[i]))

    def __len__(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# Voxel keys and states
# ---------------------------------------------------------------------------

class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int


class VoxelState(IntEnum):
    UNREADY = 0
    READY = 1
    ACTIVE = 2
    CONVERGED = 3


def voxel_key(position, voxel_size: float) -> VoxelKey:
    """Lattice cell of a position: componentwise floor(p / voxel_size)."""
    if voxel_size <= 0:
        raise InputDomainError("voxel_size must be positive")
    p = np.asarray(position, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InputDomainError("cannot hash a non-finite position")
    idx = np.floor(p / voxel_size).astype(np.int64)
    return VoxelKey(int(idx[0]), int(idx[1]), int(idx[2]))


def voxel_keys(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Vectorized :func:`voxel_key`, returns an (n, 3) int64 array."""
    if voxel_size <= 0:
        raise InputDomainError("voxel_size must be positive")
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(pts) and not np.all(np.isfinite(pts)):
        raise InputDomainError("cannot hash non-finite positions")
    return np.floor(pts / voxel_size).astype(np.int64)


def voxel_bounds(key: VoxelKey, voxel_size: float) -> np.ndarray:
    """Axis-aligned bounds of a voxel, shape (2, 3) rows (lo, hi)."""
    lo = np.array(key, dtype=float) * voxel_size
    return np.stack([lo, lo + voxel_size])


# ---------------------------------------------------------------------------
# Cells, predictions, frame bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class VoxelPrediction:
    """Output of one voxel solve: a grid of predicted colored points with variances."""

    key: VoxelKey
    positions: np.ndarray  # (m, 3)
    colors: np.ndarray     # (m, 3)
    variances: np.ndarray  # (m,) posterior variance per point, clipped at 0

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def mean_variance(self) -> float:
        return float(self.variances.mean())


@dataclass
class VoxelCell:
    key: VoxelKey
    raw: PointCloud = field(default_factory=PointCloud.empty)
    pseudo: PointCloud | None = None
    state: VoxelState = VoxelState.UNREADY
    value_axis: int | None = None
    last_prediction: VoxelPrediction | None = None

    @property
    def solved(self) -> bool:
        return self.last_prediction is not None

    @property
    def point_count(self) -> int:
        return len(self.raw)

    @property
    def mean_posterior_variance(self) -> float | None:
        if self.last_prediction is None:
            return None
        return self.last_prediction.mean_variance

    def training_cloud(self) -> PointCloud:
        """Raw scanned points stacked with the previous prediction, if any."""
        if self.pseudo is None:
            return self.raw
        return PointCloud.concat(self.raw, self.pseudo)


@dataclass
class FrameUpdateSet:
    """Voxel keys touched by one frame, in first-touch order, no duplicates."""

    keys: list[VoxelKey]

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        return iter(self.keys)


@dataclass
class StateTransition:
    frame: int
    key: VoxelKey
    old: VoxelState
    new: VoxelState


# ---------------------------------------------------------------------------
# Pure lifecycle functions
# ---------------------------------------------------------------------------

def classify_voxel(cell: VoxelCell, tau: int, eta: float) -> VoxelState:
    """State implied by a cell's contents; pure function.

    Unsolved cells are UNREADY below the point threshold and READY at or
    above it. Solved cells are ACTIVE while the mean posterior variance
    exceeds ``eta`` and CONVERGED once it does not.
    """
    if not cell.solved:
        return VoxelState.READY if cell.point_count >= tau else VoxelState.UNREADY
    return (VoxelState.CONVERGED
            if cell.mean_posterior_variance <= eta
            else VoxelState.ACTIVE)


def update_voxel_variances(cell: VoxelCell, prediction: VoxelPrediction,
                           tau: int, eta: float) -> VoxelCell:
    """Fold a solve result back into its cell.

    The prediction grid replaces the cell's pseudo-observations, carrying the
    per-point posterior variance as the observation noise of the next solve;
    raw points are untouched and keep the sensor variance. The cell is then
    reclassified (ACTIVE or CONVERGED).
    """
    if prediction.key != cell.key:
        raise ContractViolationError(
            f"prediction for voxel {prediction.key} applied to cell {cell.key}")
    if cell.state not in (VoxelState.READY, VoxelState.ACTIVE):
        raise ContractViolationError(
            f"cell {cell.key} in state {cell.state.name} cannot accept a solve")
    cell.pseudo = PointCloud(prediction.positions, prediction.colors,
                             np.clip(prediction.variances, 0.0, None))
    cell.last_prediction = prediction
    cell.state = classify_voxel(cell, tau, eta)
    return cell


# ---------------------------------------------------------------------------
# The map
# ---------------------------------------------------------------------------

class VoxelMap:
    """Hash map from lattice keys to cells, with an auditable event log.

    Single writer: one orchestrator mutates the map per frame. Reads during
    rendering observe consistent cells because mutation happens only inside
    :meth:`store_frame` and :meth:`apply_prediction`.
    """

    def __init__(self, voxel_size: float, sensor_var: float, tau: int, eta: float):
        if voxel_size <= 0:
            raise InputDomainError("voxel_size must be positive")
        if sensor_var < 0:
            raise InputDomainError("sensor_var must be nonnegative")
        self.voxel_size = float(voxel_size)
        self.sensor_var = float(sensor_var)
        self.tau = int(tau)
        self.eta = float(eta)
        self.cells: dict[VoxelKey, VoxelCell] = {}
        self.transitions: list[StateTransition] = []
        self.solve_log: list[tuple[int, VoxelKey]] = []
        self.frame_index = -1

    @classmethod
    def from_config(cls, config) -> "VoxelMap":
        return cls(config.voxel_size, config.sensor_var, config.tau, config.eta)

    # -- accessors ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, key: VoxelKey) -> bool:
        return key in self.cells

    def cell(self, key: VoxelKey) -> VoxelCell:
        return self.cells[key]

    def cells_in_state(self, state: VoxelState) -> list[VoxelCell]:
        return [c for c in self.cells.values() if c.state == state]

    def all_raw_points(self) -> PointCloud:
        return PointCloud.concat(*(c.raw for c in self.cells.values()))

    # -- mutation ----------------------------------------------------------

    def store_frame(self, cloud: PointCloud) -> FrameUpdateSet:
        """Append one frame of scanned points to their cells.

        Every point is stored with the configured sensor variance. Returns
        the keys touched this frame in first-touch order. Converged cells
        still accumulate points; the solver skips them by state.
        """
        self.frame_index += 1
        if len(cloud) == 0:
            return FrameUpdateSet([])
        keys = voxel_keys(cloud.positions, self.voxel_size)
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True,
                                         return_inverse=True)
        order = np.argsort(first, kind="stable")
        touched: list[VoxelKey] = []
        for rank in order:
            key = VoxelKey(int(uniq[rank, 0]), int(uniq[rank, 1]), int(uniq[rank, 2]))
            mask = inverse == rank
            sub = PointCloud(cloud.positions[mask], cloud.colors[mask],
                             np.full(int(mask.sum()), self.sensor_var))
            cell = self.cells.get(key)
            if cell is None:
                cell = VoxelCell(key=key, raw=sub)
                self.cells[key] = cell
            else:
                cell.raw = PointCloud.concat(cell.raw, sub)
            if cell.state == VoxelState.UNREADY and cell.point_count >= self.tau:
                self._log_transition(cell, VoxelState.READY)
            touched.append(key)
        return FrameUpdateSet(touched)

    def apply_prediction(self, prediction: VoxelPrediction) -> VoxelCell:
        """Fold a solve back into its cell, logging state transitions."""
        cell = self.cells[prediction.key]
        before = cell.state
        update_voxel_variances(cell, prediction, self.tau, self.eta)
        self.solve_log.append((self.frame_index, cell.key))
        # A first solve that already converges still passes through ACTIVE,
        # so the event log stays a prefix of the legal chain.
        for state in range(int(before) + 1, int(cell.state) + 1):
            self.transitions.append(StateTransition(
                self.frame_index, cell.key, VoxelState(state - 1), VoxelState(state)))
        return cell

    def _log_transition(self, cell: VoxelCell, new: VoxelState) -> None:
        self.transitions.append(StateTransition(self.frame_index, cell.key,
                                                cell.state, new))
        cell.state = new

    # -- audits ------------------------------------------------------------

    def audit_transitions(self) -> list[str]:
        """Violations of the one-way lifecycle, empty when the log is legal."""
        issues = []
        seq: dict[VoxelKey, int] = {}
        for tr in self.transitions:
            cur = seq.get(tr.key, int(VoxelState.UNREADY))
            if int(tr.old) != cur or int(tr.new) != cur + 1:
                issues.append(f"voxel {tr.key}: illegal transition "
                              f"{tr.old.name} -> {tr.new.name} at frame {tr.frame}")
            seq[tr.key] = int(tr.new)
        return issues

    def audit_converged_resolves(self) -> list[str]:
        """Solves that happened after a cell converged (must be none)."""
        issues = []
        for key, frame_conv in self._convergence_frames().items():
            late = [f for f, k in self.solve_log if k == key and f > frame_conv]
            if late:
                issues.append(f"voxel {key} re-solved after convergence at frames {late}")
        return issues

    def _convergence_frames(self) -> dict[VoxelKey, int]:
        return {tr.key: tr.frame for tr in self.transitions
                if tr.new == VoxelState.CONVERGED}

    def audit_hash_consistency(self) -> list[str]:
        """Raw points whose lattice key disagrees with their cell (must be none)."""
        issues = []
        for key, cell in self.cells.items():
            if not len(cell.raw):
                continue
            keys = voxel_keys(cell.raw.positions, self.voxel_size)
            bad = np.any(keys != np.array(key, dtype=np.int64), axis=1)
            if np.any(bad):
                issues.append(f"voxel {key}: {int(bad.sum())} raw points hash elsewhere")
        return issues
