"""Point rasterization of surfels into color/vertex/normal/index maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measurement import CameraIntrinsics

EMPTY = -1


@dataclass
class RenderMaps:
    color: np.ndarray  # (H, W, 3) uint8
    vertex: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    index: np.ndarray  # (H, W) surfel index or EMPTY
    scale: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape

    def occupied(self) -> int:
        return int(np.count_nonzero(self.index != EMPTY))


def project_pixels(vertex: np.ndarray, intrinsics: CameraIntrinsics, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Nearest integer pixel of each point at the given scale, with a visibility flag."""
    intr = intrinsics.scaled(scale)
    z = vertex[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = np.rint(intr.fx * vertex[:, 0] / zs + intr.cx).astype(np.int64)
    v = np.rint(intr.fy * vertex[:, 1] / zs + intr.cy).astype(np.int64)
    ok &= (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return np.stack([u, v], axis=-1), ok


def rasterize(vertex: np.ndarray, normal: np.ndarray, color: np.ndarray, intrinsics: CameraIntrinsics,
              scale: int = 1) -> RenderMaps:
    """Z-buffered nearest-pixel rasterization.

    Back-facing surfels (``normal . vertex >= 0``) are skipped. On equal depth
    the lower surfel index wins.
    """
    if scale not in (1, 4):
        raise ValueError("scale must be 1 or 4")
    h, w = intrinsics.height * scale, intrinsics.width * scale
    index = np.full((h, w), EMPTY, dtype=np.int64)
    out_v = np.zeros((h, w, 3))
    out_n = np.zeros((h, w, 3))
    out_c = np.zeros((h, w, 3), dtype=np.uint8)
    if len(vertex):
        pix, ok = project_pixels(vertex, intrinsics, scale)
        ok &= np.sum(normal * vertex, axis=1) < 0
        ids = np.nonzero(ok)[0]
        flat = pix[ids, 1] * w + pix[ids, 0]
        order = np.lexsort((ids, vertex[ids, 2], flat))
        flat, ids = flat[order], ids[order]
        first = np.ones(len(flat), dtype=bool)
        first[1:] = flat[1:] != flat[:-1]
        flat, ids = flat[first], ids[first]
        index.reshape(-1)[flat] = ids
        out_v.reshape(-1, 3)[flat] = vertex[ids]
        out_n.reshape(-1, 3)[flat] = normal[ids]
        out_c.reshape(-1, 3)[flat] = color[ids]
    return RenderMaps(out_c, out_v, out_n, index, scale)


def render(geometry, intrinsics: CameraIntrinsics, scale: int = 1) -> RenderMaps:
    """Rasterize anything exposing ``vertex``, ``normal`` and ``color`` arrays."""
    return rasterize(geometry.vertex, geometry.normal, geometry.color, intrinsics, scale)
