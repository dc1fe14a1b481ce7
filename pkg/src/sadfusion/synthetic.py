"""Ray-cast synthetic RGB-D sequences with exact flow and ground truth.

Scenes are built from rigid primitives (rectangles and boxes). Every
primitive ("part") carries one camera-frame pose per frame; a non-rigid
object is several parts sharing an object id, e.g. the folding sheet.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import GenerationError
from .measurement import CameraIntrinsics, FlowMap, MeasurementFrame, make_frame, write_frame_files, write_intrinsics

SCENE_KINDS = ("in-plane", "lift", "pass", "sheet")
PRESET_ALIASES = {
    "in-plane": "in-plane",
    "in-plane-translator": "in-plane",
    "lift": "lift",
    "lift-off-table": "lift",
    "pass": "pass",
    "two-object-pass": "pass",
    "sheet": "sheet",
}


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=200.0, fy=200.0, cx=80.0, cy=60.0, width=160, height=120)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def pose(rot: np.ndarray, trans) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


@dataclass
class Part:
    name: str
    object_id: int
    kind: str  # "rect" (local z=0 plane) or "box"
    half_size: tuple[float, float, float]
    color: tuple[int, int, int]
    poses: list[np.ndarray]  # local -> camera, one per frame

    def corners(self) -> np.ndarray:
        a, b, c = self.half_size
        if self.kind == "rect":
            c = 0.0
        g = np.array([[sx * a, sy * b, sz * c] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return np.vstack([g, np.zeros(3)])


@dataclass
class SceneObject:
    name: str
    class_id: int


@dataclass
class SyntheticScene:
    kind: str
    parts: list[Part]
    objects: list[SceneObject]
    class_names: dict[int, str]  # ids 1..H+1, the last one "unrecognized"
    rigidness: dict[int, float]

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.n_frames < 2:
            raise ValueError("a synthetic scene needs at least two frames")
        for part in self.parts:
            if len(part.poses) != self.n_frames:
                raise ValueError(f"part {part.name} has {len(part.poses)} poses, expected {self.n_frames}")
            for m in part.poses:
                r = m[:3, :3]
                if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
                    raise ValueError(f"part {part.name} has a non-rigid pose")

    @property
    def n_frames(self) -> int:
        return len(self.parts[0].poses)

    @property
    def unrecognized(self) -> int:
        return max(self.class_names)

    def class_of_object(self, object_id: int) -> int:
        return self.objects[object_id].class_id

    def truncated(self, n: int) -> "SyntheticScene":
        parts = [Part(p.name, p.object_id, p.kind, p.half_size, p.color, p.poses[:n]) for p in self.parts]
        return SyntheticScene(self.kind, parts, self.objects, self.class_names, self.rigidness)


@dataclass
class NoiseConfig:
    depth_sigma: float = 0.0  # meters
    label_flip_fraction: float = 0.0
    erase_class: int | None = None  # relabeled unrecognized for frames t > 0
    seed: int = 0


@dataclass
class GroundTruth:
    """Per-frame part poses plus, per frame, the part id seen at each pixel."""

    part_object: list[int]
    object_class: list[int]
    object_names: list[str]
    poses: list[np.ndarray] = field(default_factory=list)  # per frame, (P, 4, 4)
    part_maps: list[np.ndarray] = field(default_factory=list)  # per frame, (H, W), -1 = none

    def anchor(self, frame: int, part_ids: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Part-local coordinates of camera-frame points observed at ``frame``."""
        inv = np.linalg.inv(self.poses[frame][part_ids])
        return np.einsum("nij,nj->ni", inv[:, :3, :3], points) + inv[:, :3, 3]

    def position(self, frame: int, part_ids: np.ndarray, local: np.ndarray) -> np.ndarray:
        m = self.poses[frame][part_ids]
        return np.einsum("nij,nj->ni", m[:, :3, :3], local) + m[:, :3, 3]

    def to_json(self, samples: list[dict] | None = None) -> dict:
        return {
            "objects": [
                {"name": n, "class": int(c)} for n, c in zip(self.object_names, self.object_class)
            ],
            "parts": [{"object": int(o)} for o in self.part_object],
            "frames": [
                {"index": t, "part_poses": [m.tolist() for m in poses]} for t, poses in enumerate(self.poses)
            ],
            "correspondence_samples": samples or [],
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        gt = cls(
            part_object=[p["object"] for p in data["parts"]],
            object_class=[o["class"] for o in data["objects"]],
            object_names=[o["name"] for o in data["objects"]],
        )
        gt.poses = [np.array(f["part_poses"], dtype=float) for f in data["frames"]]
        return gt


@dataclass
class SyntheticFrame:
    frame: MeasurementFrame
    flow: FlowMap
    depth: np.ndarray  # exact depth before noise
    label: np.ndarray  # labels after corruption
    part_map: np.ndarray


# ------------------------------------------------------------------ ray casting


def _pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(u.shape)], axis=-1)


def _intersect(part: Part, m: np.ndarray, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray depth (inf on miss) and part-local hit points for camera-origin rays."""
    rot, trans = m[:3, :3], m[:3, 3]
    origin = -rot.T @ trans
    d = rays @ rot  # rot.T @ ray, row-wise
    a, b, c = part.half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        if part.kind == "rect":
            t = -origin[2] / d[..., 2]
            hit = origin + t[..., None] * d
            ok = (t > 0) & (np.abs(hit[..., 0]) <= a) & (np.abs(hit[..., 1]) <= b)
        else:
            half = np.array([a, b, c])
            t0 = (-half - origin) / d
            t1 = (half - origin) / d
            tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
            tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
            t = tmin
            ok = (tmax >= tmin) & (tmin > 0)
            hit = origin + t[..., None] * d
    t = np.where(ok, t, np.inf)
    return t, hit


def _checker(local: np.ndarray, base: tuple[int, int, int], cell: float = 0.02) -> np.ndarray:
    k = (np.floor(local[..., 0] / cell) + np.floor(local[..., 1] / cell) + np.floor(local[..., 2] / cell)) % 2
    base = np.asarray(base, dtype=float)
    return np.where(k[..., None] > 0, base, 0.6 * base).astype(np.uint8)


def render_scene(scene: SyntheticScene, intr: CameraIntrinsics, t: int):
    """Exact depth, color, part id and local hit maps of frame ``t``."""
    rays = _pixel_rays(intr)
    shape = rays.shape[:2]
    depth = np.full(shape, np.inf)
    part_map = np.full(shape, -1, dtype=np.int64)
    local = np.zeros(shape + (3,))
    color = np.zeros(shape + (3,), dtype=np.uint8)
    for pid, part in enumerate(scene.parts):
        d, hit = _intersect(part, part.poses[t], rays)
        closer = d < depth
        depth[closer] = d[closer]
        part_map[closer] = pid
        local[closer] = hit[closer]
        color[closer] = _checker(hit, part.color)[closer]
    depth[~np.isfinite(depth)] = 0.0
    return depth, color, part_map, local


def _check_frustum(scene: SyntheticScene, intr: CameraIntrinsics, t: int) -> None:
    for obj_id, obj in enumerate(scene.objects):
        seen = False
        for part in scene.parts:
            if part.object_id != obj_id:
                continue
            pts = part.corners() @ part.poses[t][:3, :3].T + part.poses[t][:3, 3]
            front = pts[:, 2] > 1e-6
            if not front.any():
                continue
            uv = intr.project(pts[front])
            lo, hi = uv.min(axis=0), uv.max(axis=0)
            if hi[0] >= 0 and lo[0] < intr.width and hi[1] >= 0 and lo[1] < intr.height:
                seen = True
        if not seen:
            raise GenerationError(f"object {obj.name!r} leaves the camera frustum at frame {t}")


def ground_truth_flow(scene: SyntheticScene, intr: CameraIntrinsics, t: int, part_map, local) -> FlowMap:
    """Backward flow of frame ``t``: where each visible point projected at ``t - 1``."""
    shape = part_map.shape
    if t == 0:
        return FlowMap(np.zeros(shape + (2,)), part_map >= 0)
    prev = np.stack([p.poses[t - 1] for p in scene.parts])
    ids = np.where(part_map >= 0, part_map, 0)
    m = prev[ids]
    pts = np.einsum("...ij,...j->...i", m[..., :3, :3], local) + m[..., :3, 3]
    ok = (part_map >= 0) & (pts[..., 2] > 1e-6)
    uv = intr.project(np.where(ok[..., None], pts, 1.0))
    v, u = np.mgrid[0 : shape[0], 0 : shape[1]]
    flow = np.stack([u - uv[..., 0], v - uv[..., 1]], axis=-1)
    return FlowMap(np.where(ok[..., None], flow, 0.0), ok)


def generate_synthetic(
    scene: SyntheticScene,
    intrinsics: CameraIntrinsics | None = None,
    noise: NoiseConfig | None = None,
    denoise_sigma: float = 0.0,
) -> tuple[GroundTruth, Iterator[SyntheticFrame]]:
    """Ground-truth record and a lazy stream of frames.

    The ground-truth record fills in as the stream is consumed (poses for
    all frames are available up front; part maps are appended per frame).

    Raises:
        GenerationError: when an object leaves the frustum entirely.
    """
    intr = intrinsics or default_intrinsics()
    noise = noise or NoiseConfig()
    for t in range(scene.n_frames):
        _check_frustum(scene, intr, t)
    gt = GroundTruth(
        part_object=[p.object_id for p in scene.parts],
        object_class=[o.class_id for o in scene.objects],
        object_names=[o.name for o in scene.objects],
        poses=[np.stack([p.poses[t] for p in scene.parts]) for t in range(scene.n_frames)],
    )
    part_class = np.array([scene.objects[p.object_id].class_id for p in scene.parts])
    n_classes = scene.unrecognized

    def stream() -> Iterator[SyntheticFrame]:
        rng = np.random.default_rng(noise.seed)
        for t in range(scene.n_frames):
            depth, color, part_map, local = render_scene(scene, intr, t)
            valid = part_map >= 0
            label = np.where(valid, part_class[np.where(valid, part_map, 0)], n_classes)
            if noise.erase_class is not None and t > 0:
                label = np.where(label == noise.erase_class, n_classes, label)
            if noise.label_flip_fraction > 0:
                flip = valid & (rng.random(label.shape) < noise.label_flip_fraction)
                shift = rng.integers(1, n_classes, size=label.shape)
                label = np.where(flip, (label - 1 + shift) % n_classes + 1, label)
            noisy = depth
            if noise.depth_sigma > 0:
                noisy = np.where(valid, depth + rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
            frame = make_frame(t, noisy, color, label, intr, denoise_sigma)
            flow = ground_truth_flow(scene, intr, t, part_map, local)
            gt.part_maps.append(part_map)
            yield SyntheticFrame(frame, flow, depth, label, part_map)

    return gt, stream()


def write_sequence(
    out_dir: Path,
    scene: SyntheticScene,
    intrinsics: CameraIntrinsics | None = None,
    noise: NoiseConfig | None = None,
    depth_scale: float = 1000.0,
    n_samples: int = 64,
) -> Path:
    """Write a synthetic scene in the on-disk sequence layout."""
    intr = intrinsics or default_intrinsics()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_intrinsics(out_dir, intr, depth_scale)
    gt, frames = generate_synthetic(scene, intr, noise)
    rng = np.random.default_rng(0)
    samples = []
    for sf in frames:
        t = sf.frame.index
        write_frame_files(out_dir, t, sf.frame.depth, sf.frame.color, sf.label, depth_scale,
                          sf.flow if t > 0 else None, sf.part_map)
        ys, xs = np.nonzero(sf.part_map >= 0)
        for j in rng.choice(len(ys), size=min(n_samples, len(ys)), replace=False):
            y, x = int(ys[j]), int(xs[j])
            pid = int(sf.part_map[y, x])
            point = sf.frame.vertex[y, x]
            samples.append({
                "frame": t, "pixel": [x, y], "part": pid,
                "local": gt.anchor(t, np.array([pid]), point[None])[0].tolist(),
            })
    meta = gt.to_json(samples)
    meta["scene"] = {"kind": scene.kind, "classes": {str(k): v for k, v in scene.class_names.items()},
                     "rigidness": {str(k): v for k, v in scene.rigidness.items()}}
    (out_dir / "ground_truth.json").write_text(json.dumps(meta))
    return out_dir


def load_ground_truth(seq_dir: Path) -> GroundTruth | None:
    path = Path(seq_dir) / "ground_truth.json"
    if not path.exists():
        return None
    return GroundTruth.from_json(json.loads(path.read_text()))


# --------------------------------------------------------------------- presets


def _linear(start: np.ndarray, step: np.ndarray, n: int) -> list[np.ndarray]:
    return [np.asarray(start, float) + t * np.asarray(step, float) for t in range(n)]


def in_plane_scene(n_frames: int = 10, step=(0.015, 0.0, 0.0), depth: float = 1.0,
                   start_x: float = -0.07) -> SyntheticScene:
    """A textured card sliding parallel to the image plane."""
    rot = np.eye(3)
    centers = _linear([start_x, 0.0, depth], step, n_frames)
    card = Part("card", 0, "rect", (0.15, 0.10, 0.0), (200, 160, 60), [pose(rot, c) for c in centers])
    return SyntheticScene(
        kind="in-plane",
        parts=[card],
        objects=[SceneObject("card", 1)],
        class_names={1: "calendar", 2: "unrecognized"},
        rigidness={1: 1.0, 2: 1.0},
    )


def lift_scene(n_frames: int = 10, lift_step: float = 0.019, tilt_deg: float = 45.0,
               carry_step: float = 0.0) -> SyntheticScene:
    """A box lifted off a tilted table along the table normal.

    ``carry_step`` adds motion along the table's x axis per frame.
    """
    a = math.radians(tilt_deg)
    # table local z is its normal, facing the camera and image-up
    rot = np.column_stack([[1.0, 0, 0], [0, -math.cos(a), math.sin(a)], [0, -math.sin(a), -math.cos(a)]])
    center = np.array([0.0, 0.06, 1.0])
    normal = rot[:, 2]
    table = Part("table", 0, "rect", (0.35, 0.25, 0.0), (60, 160, 60), [pose(rot, center)] * n_frames)
    cup_half = (0.05, 0.05, 0.06)
    base = center + rot @ np.array([0.0, -0.02, cup_half[2]])
    cup = Part("cup", 1, "box", cup_half, (150, 90, 40),
               [pose(rot, base + t * (lift_step * normal + carry_step * rot[:, 0])) for t in range(n_frames)])
    return SyntheticScene(
        kind="lift",
        parts=[table, cup],
        objects=[SceneObject("table", 1), SceneObject("cup", 2)],
        class_names={1: "table", 2: "cup", 3: "unrecognized"},
        rigidness={1: 1.0, 2: 1.0, 3: 1.0},
    )


def pass_scene(n_frames: int = 10, speed: float = 0.012) -> SyntheticScene:
    """Two cards at different depths crossing in opposite directions."""
    rot = np.eye(3)
    front = Part("ball", 0, "box", (0.06, 0.06, 0.06), (220, 120, 40),
                 [pose(rot, c) for c in _linear([-0.12, 0.02, 0.9], [speed, 0, 0], n_frames)])
    back = Part("board", 1, "rect", (0.10, 0.12, 0.0), (60, 90, 200),
                [pose(rot, c) for c in _linear([0.12, -0.01, 1.15], [-speed, 0, 0], n_frames)])
    return SyntheticScene(
        kind="pass",
        parts=[front, back],
        objects=[SceneObject("ball", 1), SceneObject("board", 2)],
        class_names={1: "ball", 2: "board", 3: "unrecognized"},
        rigidness={1: 1.0, 2: 1.0, 3: 1.0},
    )


def sheet_scene(n_frames: int = 10, fold_step_deg: float = 3.0) -> SyntheticScene:
    """A sheet folding about its vertical centre line, right half toward the camera."""
    half = (0.10, 0.12, 0.0)
    hinge = np.array([0.0, 0.0, 1.0])
    left = Part("sheet-left", 0, "rect", half, (230, 230, 230), [pose(np.eye(3), hinge - [0.10, 0, 0])] * n_frames)
    right_poses = []
    for t in range(n_frames):
        r = rot_y(math.radians(fold_step_deg * t))
        right_poses.append(pose(r, hinge + r @ np.array([0.10, 0.0, 0.0])))
    right = Part("sheet-right", 0, "rect", half, (230, 230, 230), right_poses)
    return SyntheticScene(
        kind="sheet",
        parts=[left, right],
        objects=[SceneObject("sheet", 1)],
        class_names={1: "cloth", 2: "unrecognized"},
        rigidness={1: 0.3, 2: 0.3},
    )


def make_scene(kind: str, n_frames: int | None = None) -> SyntheticScene:
    key = PRESET_ALIASES.get(kind)
    if key is None:
        raise ValueError(f"unknown preset {kind!r}; choose from {sorted(set(PRESET_ALIASES.values()))}")
    builders = {"in-plane": in_plane_scene, "lift": lift_scene, "pass": pass_scene, "sheet": sheet_scene}
    return builders[key]() if n_frames is None else builders[key](n_frames=n_frames)
