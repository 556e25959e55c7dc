"""Pipeline configuration and its documented defaults.

Field defaults mirror the hyperparameter set the mapping stack was tuned
with; everything is overridable through ``key=value`` config files (see
``voxsplat.formats.read_pipeline_config``).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    # Voxel map / regression
    voxel_size: float = 0.2        # side length of each voxel, meters
    tau: int = 10                  # point count threshold for solving a voxel
    n_s: int = 3                   # subgrid intervals per voxel side
    n_r: int = 3                   # fine prediction points per interval
    eta: float = 0.3               # convergence threshold on mean posterior variance
    sensor_var: float = 1e-4       # per-point observation variance, m^2
    kernel_lambda: float = 1.0     # squared-exponential kernel constant
    jitter: float = 1e-10          # diagonal jitter used when factorization fails

    # Loss weights
    lambda_ssim: float = 0.2
    lambda_p: float = 0.1
    lambda_d: float = 0.1
    silhouette_threshold: float = 0.5

    # Camera queues / frame selection
    window: int = 50               # size of the recent-camera window
    k_curr: int = 1
    k_hist: int = 1

    # Optimizer
    lr_position: float = 0.0005
    lr_color: float = 0.0025
    lr_opacity: float = 0.025
    lr_scale: float = 0.0025
    lr_rotation: float = 0.0025
    iterations: int = 5            # optimizer steps per ingested frame
    fd_step: float = 1e-4          # central-difference perturbation per parameter unit

    # Splat initialization / rendering
    initial_opacity: float = 0.5
    scale_floor: float = 1e-4      # minimum axis standard deviation, meters
    weight_floor: float = 1e-8     # variance clamp before inversion into weights
    near_plane: float = 0.01

    # Orchestration
    expansion_threshold: int = 1   # solved-voxel count that triggers map expansion
    seed: int = 0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.tau < 1 or self.n_s < 1 or self.n_r < 1:
            raise ValueError("tau, n_s and n_r must be at least 1")
        if self.eta <= 0 or self.sensor_var < 0 or self.kernel_lambda <= 0:
            raise ValueError("eta and kernel_lambda must be positive, sensor_var nonnegative")
        for name in ("lambda_ssim", "lambda_p", "lambda_d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.window < self.k_curr:
            raise ValueError("window must be at least k_curr")
        if not 0.0 < self.initial_opacity <= 1.0:
            raise ValueError("initial_opacity must lie in (0, 1]")

    def replace(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping, strict: bool = False) -> "PipelineConfig":
        """Build a config from string key/value pairs, warning on unknown keys."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in fields:
                if strict:
                    raise ValueError(f"unknown config key: {key}")
                log.warning("ignoring unknown config key %r", key)
                continue
            kwargs[key] = _convert(fields[key], value)
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        """Deterministic key=value echo of every field, sorted by name."""
        out = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            out.append(f"{f.name}={getattr(self, f.name)!r}".replace("'", ""))
        return out


def _convert(field, value):
    if isinstance(value, str):
        base = field.default
        if isinstance(base, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(base, int):
            return int(value)
        if isinstance(base, float):
            return float(value)
        return value
    return value
