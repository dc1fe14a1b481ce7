"""Measurement frames: back-projection, normals, depth denoising and disk IO.

Sequence directory layout::

    intrinsics.json              fx, fy, cx, cy, width, height, depth_scale
    frame_000000.depth.png       uint16, depth * depth_scale (0 = invalid)
    frame_000000.color.png       8-bit RGB
    frame_000000.label.png       8-bit class ids
    frame_000000.flow            optional, see ``write_flow``
    frame_000000.part.png        optional ground-truth part ids (generator)
    ground_truth.json            optional (generator)
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, IngestionError

logger = logging.getLogger(__name__)

FLOW_MAGIC = b"SFLO"
FRAME_RE = re.compile(r"frame_(\d{6})\.depth\.png$")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, scale: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera rasterized ``scale`` times finer."""
        return CameraIntrinsics(
            self.fx * scale, self.fy * scale, self.cx * scale, self.cy * scale,
            self.width * scale, self.height * scale,
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates ``(u, v)`` of camera-frame points."""
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        return np.stack(
            [self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy],
            axis=-1,
        )

    def backproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, depth)))
        return np.stack(
            [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth], axis=-1
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class MeasurementFrame:
    """Per-pixel maps of one RGB-D frame. Arrays are read-only once built."""

    index: int
    intrinsics: CameraIntrinsics
    depth: np.ndarray  # (H, W) meters, 0 where invalid
    vertex: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    color: np.ndarray  # (H, W, 3) uint8
    label: np.ndarray  # (H, W) int
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w = self.depth.shape
        for name in ("vertex", "normal", "color"):
            if getattr(self, name).shape != (h, w, 3):
                raise FormatError(f"{name} map shape {getattr(self, name).shape} != {(h, w, 3)}", self.index)
        for name in ("label", "valid"):
            if getattr(self, name).shape != (h, w):
                raise FormatError(f"{name} map shape {getattr(self, name).shape} != {(h, w)}", self.index)
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise FormatError(f"frame {(h, w)} does not match intrinsics", self.index)
        _freeze(self.depth, self.vertex, self.normal, self.color, self.label, self.valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class FlowMap:
    """Backward flow on a target frame: pixel ``u`` came from ``u - flow[u]``."""

    flow: np.ndarray  # (H, W, 2) pixels, (dx, dy)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.flow.shape != self.valid.shape + (2,):
            raise FormatError(f"flow shape {self.flow.shape} inconsistent with mask {self.valid.shape}")
        _freeze(self.flow, self.valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowMap":
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))


@dataclass
class IngestConfig:
    denoise_sigma: float = 1.0
    max_depth_jump: float = 0.05
    max_frames: int | None = None
    read_flow: bool = True


def backproject_depth(depth: np.ndarray, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vertex map and validity mask; pixels with zero or non-finite depth are invalid."""
    depth = np.asarray(depth, dtype=float)
    valid = np.isfinite(depth) & (depth > 0)
    v, u = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]]
    vertex = intrinsics.backproject(u, v, np.where(valid, depth, 0.0))
    return vertex, valid


def compute_normals(vertex: np.ndarray, valid: np.ndarray, max_depth_jump: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Normals from central differences of the vertex map, facing the camera.

    Falls back to one-sided differences at borders and depth jumps. Pixels
    with no usable neighbour along either axis get no normal.
    """
    h, w = valid.shape
    pts = np.where(valid[..., None], vertex, np.nan)
    pad = np.pad(pts, ((1, 1), (1, 1), (0, 0)), constant_values=np.nan)
    center = pad[1:-1, 1:-1]

    def neighbour(dy, dx):
        nb = pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        jump = np.abs(nb[..., 2] - center[..., 2]) > max_depth_jump
        return np.where(jump[..., None], np.nan, nb)

    def diff(plus, minus):
        both = plus - minus
        fwd = plus - center
        bwd = center - minus
        out = np.where(np.isfinite(both), both, np.where(np.isfinite(fwd), fwd, bwd))
        return out

    du = diff(neighbour(0, 1), neighbour(0, -1))
    dv = diff(neighbour(1, 0), neighbour(-1, 0))
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = valid & np.isfinite(norm) & (norm > 1e-12)
    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)
    flip = np.sum(n * np.where(ok[..., None], vertex, 0.0), axis=-1) > 0
    n[flip] *= -1
    # one more pass so every normal is unit to machine precision
    n[ok] /= np.linalg.norm(n[ok], axis=-1, keepdims=True)
    return n, ok


def denoise_depth(raw_depth: np.ndarray, kernel_sigma: float = 1.0) -> np.ndarray:
    """Gaussian smoothing restricted to valid pixels (normalized convolution).

    Invalid pixels (zero or non-finite) stay invalid and do not contribute
    to their neighbours.
    """
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    depth = np.asarray(raw_depth, dtype=float)
    valid = np.isfinite(depth) & (depth > 0)
    mask = valid.astype(float)
    num = ndimage.gaussian_filter(np.where(valid, depth, 0.0), kernel_sigma, mode="constant")
    den = ndimage.gaussian_filter(mask, kernel_sigma, mode="constant")
    out = np.zeros_like(depth)
    out[valid] = num[valid] / den[valid]
    # convex combination, but guard against rounding past the input range
    if valid.any():
        out[valid] = np.clip(out[valid], depth[valid].min(), depth[valid].max())
    return out


def make_frame(
    index: int,
    depth: np.ndarray,
    color: np.ndarray,
    label: np.ndarray,
    intrinsics: CameraIntrinsics,
    denoise_sigma: float = 0.0,
    max_depth_jump: float = 0.05,
) -> MeasurementFrame:
    """Build a frame from raw maps. ``denoise_sigma <= 0`` skips filtering."""
    depth = np.asarray(depth, dtype=float)
    if denoise_sigma > 0:
        depth = denoise_depth(depth, denoise_sigma)
    vertex, valid = backproject_depth(depth, intrinsics)
    normal, has_normal = compute_normals(vertex, valid, max_depth_jump)
    valid = valid & has_normal
    depth = np.where(valid, depth, 0.0)
    vertex = np.where(valid[..., None], vertex, 0.0)
    return MeasurementFrame(
        index=index,
        intrinsics=intrinsics,
        depth=depth,
        vertex=vertex,
        normal=normal,
        color=np.ascontiguousarray(color, dtype=np.uint8),
        label=np.asarray(label, dtype=np.int64).copy(),
        valid=valid,
    )


# --------------------------------------------------------------------- disk IO


def write_flow(path: Path, flow: FlowMap) -> None:
    """Raw little-endian float32 flow with a 12-byte header.

    Header: 4-byte magic, uint32 width, uint32 height. Body: H*W*2 float32
    ``(dx, dy)`` pairs in row-major order; invalid vectors are NaN.
    """
    h, w = flow.valid.shape
    body = np.where(flow.valid[..., None], flow.flow, np.nan).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", w, h))
        fh.write(body.tobytes())


def read_flow(path: Path, frame: int | None = None) -> FlowMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read flow file {path}: {exc}", frame) from exc
    if len(raw) < 12 or raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow header", frame)
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 8 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} flow, got {len(raw) - 12} payload bytes", frame)
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(float)
    valid = np.all(np.isfinite(data), axis=-1)
    return FlowMap(np.where(valid[..., None], data, 0.0), valid)


def load_intrinsics(seq_dir: Path) -> tuple[CameraIntrinsics, float]:
    path = Path(seq_dir) / "intrinsics.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IngestionError(f"missing {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot parse {path}: {exc}") from exc
    try:
        intr = CameraIntrinsics(
            float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
            int(data["width"]), int(data["height"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return intr, float(data.get("depth_scale", 1000.0))


def write_intrinsics(seq_dir: Path, intrinsics: CameraIntrinsics, depth_scale: float = 1000.0) -> None:
    data = intrinsics.to_dict() | {"depth_scale": depth_scale}
    (Path(seq_dir) / "intrinsics.json").write_text(json.dumps(data, indent=2))


def frame_indices(seq_dir: Path) -> list[int]:
    found = []
    for p in Path(seq_dir).iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            found.append(int(m.group(1)))
    return sorted(found)


def _read_png(path: Path, frame: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            return np.array(img)
    except FileNotFoundError as exc:
        raise IngestionError(f"frame {frame}: missing {path.name}", frame) from exc
    except OSError as exc:
        raise IngestionError(f"frame {frame}: corrupt {path.name}: {exc}", frame) from exc


def frame_path(seq_dir: Path, index: int, kind: str) -> Path:
    return Path(seq_dir) / f"frame_{index:06d}.{kind}"


def read_raw_frame(seq_dir: Path, index: int, intrinsics: CameraIntrinsics, depth_scale: float):
    """Depth (meters), color, label and optional part-id map of one frame."""
    depth_raw = _read_png(frame_path(seq_dir, index, "depth.png"), index)
    color = _read_png(frame_path(seq_dir, index, "color.png"), index)
    label = _read_png(frame_path(seq_dir, index, "label.png"), index)
    shape = (intrinsics.height, intrinsics.width)
    if color.ndim == 2:
        color = np.repeat(color[..., None], 3, axis=-1)
    color = color[..., :3]
    for name, arr in (("depth", depth_raw), ("color", color), ("label", label)):
        if arr.shape[:2] != shape:
            raise FormatError(f"frame {index}: {name} is {arr.shape[:2]}, intrinsics say {shape}", index)
    depth = depth_raw.astype(float) / depth_scale
    part_path = frame_path(seq_dir, index, "part.png")
    part = _read_png(part_path, index).astype(np.int64) - 1 if part_path.exists() else None
    return depth, color, label.astype(np.int64), part


def load_sequence(seq_dir: Path, config: IngestConfig | None = None) -> Iterator[tuple[MeasurementFrame, FlowMap | None]]:
    """Yield ``(frame, flow)`` pairs from a sequence directory in index order.

    Raises:
        IngestionError: missing or unreadable files, naming the frame.
        FormatError: dimension mismatches.
    """
    config = config or IngestConfig()
    seq_dir = Path(seq_dir)
    intr, depth_scale = load_intrinsics(seq_dir)
    indices = frame_indices(seq_dir)
    if config.max_frames is not None:
        indices = indices[: config.max_frames]
    for idx in indices:
        depth, color, label, _ = read_raw_frame(seq_dir, idx, intr, depth_scale)
        frame = make_frame(idx, depth, color, label, intr, config.denoise_sigma, config.max_depth_jump)
        flow = None
        fpath = frame_path(seq_dir, idx, "flow")
        if config.read_flow and fpath.exists():
            flow = read_flow(fpath, idx)
            if flow.valid.shape != frame.shape:
                raise FormatError(f"frame {idx}: flow is {flow.valid.shape}, frame is {frame.shape}", idx)
        yield frame, flow


def write_frame_files(
    seq_dir: Path,
    index: int,
    depth: np.ndarray,
    color: np.ndarray,
    label: np.ndarray,
    depth_scale: float = 1000.0,
    flow: FlowMap | None = None,
    part: np.ndarray | None = None,
) -> None:
    seq_dir = Path(seq_dir)
    d = np.where(np.isfinite(depth) & (depth > 0), np.round(depth * depth_scale), 0)
    Image.fromarray(np.clip(d, 0, 65535).astype(np.uint16)).save(frame_path(seq_dir, index, "depth.png"))
    Image.fromarray(np.asarray(color, dtype=np.uint8)).save(frame_path(seq_dir, index, "color.png"))
    Image.fromarray(np.asarray(label, dtype=np.uint8)).save(frame_path(seq_dir, index, "label.png"))
    if part is not None:
        Image.fromarray((np.asarray(part) + 1).astype(np.uint8)).save(frame_path(seq_dir, index, "part.png"))
    if flow is not None:
        write_flow(frame_path(seq_dir, index, "flow"), flow)

