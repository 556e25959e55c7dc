"""Persistence: PLY point clouds, splat map files, images, trajectories,
config files and the frame-stream directory container.

Serialization is f64 throughout the map format so round-trips are bit-exact.
All writers are deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .camera import Camera
from .config import PipelineConfig
from .errors import ParseError
from .geometry import quaternion_to_rotation
from .splat_init import GaussianMap
from .voxel_map import PointCloud

MAP_MAGIC = b"VXSPLAT1"
MAP_VERSION = 1
_MAP_RECORD = np.dtype([
    ("position", "<f8", (3,)),
    ("scale", "<f8", (3,)),
    ("rotation", "<f8", (4,)),   # w-first
    ("opacity", "<f8"),
    ("color", "<f8", (3,)),      # SH0 coefficients
    ("source_key", "<i8", (3,)),
])

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    path = Path(path)
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    colors = np.floor(np.clip(cloud.colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if binary:
        rec = np.empty(n, dtype=_PLY_VERTEX)
        rec["x"], rec["y"], rec["z"] = (cloud.positions[:, i].astype("<f4")
                                        for i in range(3))
        rec["red"], rec["green"], rec["blue"] = colors.T
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header)
            for p, c in zip(cloud.positions.astype(np.float32), colors):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path, noise_var: float = 0.0) -> PointCloud:
    """Parse a PLY with the x,y,z,red,green,blue vertex layout.

    Colors map [0, 255] -> [0, 1]; ``noise_var`` seeds the per-point noise
    column (the map overrides it with the sensor variance on ingest).
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:3] != b"ply":
        raise ParseError(path, "byte 0", "missing ply magic")
    lines = []
    offset = 0
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise ParseError(path, f"byte {offset}", "header never ends")
        lines.append((offset, data[offset:end].decode("ascii", "replace").strip()))
        offset = end + 1
        if lines[-1][1] == "end_header":
            break
        if len(lines) > 100:
            raise ParseError(path, f"byte {offset}", "header too long")

    if not lines or lines[0][1] != "ply":
        raise ParseError(path, "byte 0", "missing ply magic")
    fmt = None
    count = None
    props = []
    for off, line in lines[1:-1]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(path, f"byte {off}", f"unsupported format {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise ParseError(path, f"byte {off}", f"unsupported element {line!r}")
            try:
                count = int(tok[2])
            except ValueError as exc:
                raise ParseError(path, f"byte {off}", "bad vertex count") from exc
        elif tok[0] == "property":
            props.append(tuple(tok[1:]))
    if fmt is None or count is None:
        raise ParseError(path, "header", "format or element vertex line missing")
    expected = [("float", "x"), ("float", "y"), ("float", "z"),
                ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
    if props != expected:
        raise ParseError(path, "header",
                         f"unsupported property layout {props!r}")

    payload = data[offset:]
    if fmt == "binary_little_endian":
        need = count * _PLY_VERTEX.itemsize
        if len(payload) < need:
            raise ParseError(path, f"byte {offset + len(payload)}",
                             f"payload truncated: need {need} bytes, have {len(payload)}")
        rec = np.frombuffer(payload[:need], dtype=_PLY_VERTEX)
        positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    else:
        rows = payload.decode("ascii", "replace").splitlines()
        if len(rows) < count:
            raise ParseError(path, f"line {len(lines) + len(rows)}",
                             f"payload truncated: need {count} rows, have {len(rows)}")
        positions = np.empty((count, 3))
        colors = np.empty((count, 3))
        for i in range(count):
            tok = rows[i].split()
            if len(tok) != 6:
                raise ParseError(path, f"line {len(lines) + i + 1}",
                                 f"expected 6 fields, got {len(tok)}")
            try:
                positions[i] = [float(v) for v in tok[:3]]
                colors[i] = [int(v) / 255.0 for v in tok[3:]]
            except ValueError as exc:
                raise ParseError(path, f"line {len(lines) + i + 1}",
                                 f"bad vertex row: {exc}") from exc
    return PointCloud(positions, np.clip(colors, 0.0, 1.0),
                      np.full(count, noise_var))


# ---------------------------------------------------------------------------
# Splat map files
# ---------------------------------------------------------------------------

def write_map(path, gmap: GaussianMap, config: PipelineConfig | None = None) -> None:
    path = Path(path)
    echo = "\n".join(config.to_lines()) if config is not None else ""
    echo_bytes = echo.encode("utf-8")
    rec = np.empty(len(gmap), dtype=_MAP_RECORD)
    rec["position"] = gmap.positions
    rec["scale"] = gmap.scales
    rec["rotation"] = gmap.rotations
    rec["opacity"] = gmap.opacities
    rec["color"] = gmap.colors
    rec["source_key"] = gmap.source_keys
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<IQI", MAP_VERSION, len(gmap), len(echo_bytes)))
        fh.write(echo_bytes)
        fh.write(rec.tobytes())


def read_map(path):
    """Returns (GaussianMap, config-echo dict of strings)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAP_MAGIC:
        raise ParseError(path, "byte 0", "bad magic, not a map file")
    if len(data) < 8 + 16:
        raise ParseError(path, f"byte {len(data)}", "truncated header")
    version, count, echo_len = struct.unpack_from("<IQI", data, 8)
    if version != MAP_VERSION:
        raise ParseError(path, "byte 8", f"unsupported version {version}")
    body = 8 + 16
    echo = data[body:body + echo_len].decode("utf-8")
    payload = data[body + echo_len:]
    need = count * _MAP_RECORD.itemsize
    if len(payload) < need:
        raise ParseError(path, f"byte {body + echo_len + len(payload)}",
                         f"payload truncated: need {need} bytes, have {len(payload)}")
    rec = np.frombuffer(payload[:need], dtype=_MAP_RECORD)
    gmap = GaussianMap.from_arrays(rec["position"], rec["scale"], rec["rotation"],
                                   rec["opacity"], rec["color"], rec["source_key"])
    echo_pairs = {}
    for line in echo.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            echo_pairs[k.strip()] = v.strip()
    return gmap, echo_pairs


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def _to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """8-bit RGB PNG (PPM when the suffix says so); grayscale is replicated."""
    path = Path(path)
    arr = _to_uint8(image)
    if path.suffix.lower() == ".ppm":
        with open(path, "wb") as fh:
            fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
        return
    from PIL import Image
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """(H, W, 3) float image in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = path.read_bytes()
        try:
            magic, rest = data.split(b"\n", 1)
            if magic != b"P6":
                raise ParseError(path, "byte 0", "not a P6 ppm")
            dims, rest = rest.split(b"\n", 1)
            maxval, payload = rest.split(b"\n", 1)
            w, h = (int(v) for v in dims.split())
            if int(maxval) != 255:
                raise ParseError(path, "header", "only maxval 255 supported")
        except (ValueError, IndexError) as exc:
            raise ParseError(path, "header", f"bad ppm header: {exc}") from exc
        need = w * h * 3
        if len(payload) < need:
            raise ParseError(path, f"byte {len(data)}", "ppm payload truncated")
        arr = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3)
        return arr / 255.0
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def read_trajectory(path):
    """Rows of "timestamp tx ty tz qx qy qz qw": sensor pose in world frame.

    Quaternions whose norm strays from 1 by more than 1e-3 are rejected;
    accepted ones are renormalized.
    """
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 8:
            raise ParseError(path, f"line {lineno}",
                             f"expected 8 fields, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError as exc:
            raise ParseError(path, f"line {lineno}", f"bad number: {exc}") from exc
        q = np.array(vals[4:8])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise ParseError(path, f"line {lineno}",
                             f"quaternion norm {norm:.3f} too far from 1")
        rows.append((vals[0], np.array(vals[1:4]), q / norm))
    return rows


def write_trajectory(path, rows) -> None:
    """Rows of (timestamp, translation (3,), quaternion xyzw (4,))."""
    with open(path, "w", encoding="ascii") as fh:
        for ts, t, q in rows:
            fh.write(f"{ts:.9f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def camera_from_pose(intrinsics: dict, translation, quaternion_xyzw,
                     path="<pose>") -> Camera:
    """Camera from a world-from-camera pose row (translation + xyzw quaternion)."""
    q = np.asarray(quaternion_xyzw, dtype=float)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise ParseError(path, "pose", f"quaternion norm {norm:.3f} too far from 1")
    q = q / norm
    R_wc = quaternion_to_rotation(np.array([q[3], q[0], q[1], q[2]]))
    t_wc = np.asarray(translation, dtype=float)
    return Camera(rotation=R_wc.T, translation=-R_wc.T @ t_wc, **intrinsics)


def pose_row_from_camera(camera: Camera, timestamp: float):
    from .geometry import rotation_to_quaternion
    R_wc = camera.rotation.T
    t_wc = camera.center()
    q = rotation_to_quaternion(R_wc)  # w-first
    return (timestamp, t_wc, np.array([q[1], q[2], q[3], q[0]]))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def read_config_pairs(path):
    """Line-oriented key=value pairs with # comments; keys may repeat.

    Returns (lineno, key, value) triples in file order.
    """
    path = Path(path)
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, f"line {lineno}", "expected key=value")
        key, value = line.split("=", 1)
        pairs.append((lineno, key.strip(), value.strip()))
    return pairs


def read_pipeline_config(path=None, overrides=None) -> PipelineConfig:
    """Config from a file (missing keys keep defaults, unknown keys warn)."""
    mapping = {}
    if path is not None:
        for _, key, value in read_config_pairs(path):
            mapping[key] = value
    if overrides:
        mapping.update(overrides)
    return PipelineConfig.from_mapping(mapping)


def write_config(path, config: PipelineConfig) -> None:
    Path(path).write_text("\n".join(config.to_lines()) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# Stream container: NNNNNN.ply + NNNNNN.png + trajectory.txt + scene.cfg
# ---------------------------------------------------------------------------

def write_stream(directory, frames, scene_lines=()) -> None:
    """Write FrameSamples as a stream directory.

    ``scene_lines`` are extra key=value lines echoed into scene.cfg next to
    the camera intrinsics (which are always written).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    cam0 = None
    for i, frame in enumerate(frames):
        write_ply(directory / f"{i:06d}.ply", frame.points)
        write_image(directory / f"{i:06d}.png", frame.image)
        rows.append(pose_row_from_camera(frame.camera, frame.timestamp))
        if cam0 is None:
            cam0 = frame.camera
    write_trajectory(directory / "trajectory.txt", rows)
    lines = [f"camera={cam0.fx:.9g} {cam0.fy:.9g} {cam0.cx:.9g} {cam0.cy:.9g} "
             f"{cam0.width} {cam0.height}"]
    lines.extend(scene_lines)
    (directory / "scene.cfg").write_text("\n".join(lines) + "\n", encoding="ascii")


def read_stream(directory):
    """Load a stream directory back into FrameSamples."""
    from .pipeline import FrameSample  # local import avoids a cycle

    directory = Path(directory)
    cfg_path = directory / "scene.cfg"
    if not cfg_path.exists():
        raise ParseError(cfg_path, "file", "stream directory lacks scene.cfg")
    intrinsics = None
    for lineno, key, value in read_config_pairs(cfg_path):
        if key == "camera":
            tok = value.split()
            if len(tok) != 6:
                raise ParseError(cfg_path, f"line {lineno}",
                                 "camera needs fx fy cx cy width height")
            intrinsics = dict(fx=float(tok[0]), fy=float(tok[1]), cx=float(tok[2]),
                              cy=float(tok[3]), width=int(tok[4]), height=int(tok[5]))
    if intrinsics is None:
        raise ParseError(cfg_path, "end of file", "scene.cfg lacks a camera line")
    rows = read_trajectory(directory / "trajectory.txt")
    frames = []
    for i, (ts, t, q) in enumerate(rows):
        ply = directory / f"{i:06d}.ply"
        png = directory / f"{i:06d}.png"
        if not ply.exists():
            raise ParseError(ply, "file", "stream frame missing its point cloud")
        if not png.exists():
            raise ParseError(png, "file", "stream frame missing its image")
        camera = camera_from_pose(intrinsics, t, q, path=directory / "trajectory.txt")
        frames.append(FrameSample(timestamp=ts, points=read_ply(ply),
                                  image=read_image(png), camera=camera))
    return frames


def report_to_json_line(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
