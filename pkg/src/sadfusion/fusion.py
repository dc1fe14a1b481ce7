"""Surfel geometry and its per-frame update: fuse, append, remove, grow graph."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .align import GateOptions
from .measurement import MeasurementFrame
from .render import EMPTY, RenderMaps, project_pixels
from .warpfield import (
    DeformationGraph,
    SurfelBinding,
    blend_transforms,
    build_node_neighbors,
    compute_edge_weights,
    uniform_edge_weights,
    warp_surfel,
)


@dataclass
class Surfel:
    vertex: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    radius: float
    semantic: np.ndarray
    count: int = 1
    last_seen: int = 0

    @property
    def label(self) -> int:
        return int(np.argmax(self.semantic)) + 1


@dataclass
class SurfelGeometry:
    """Surfels stored column-wise. Class ``k`` lives in ``semantic[:, k - 1]``.

    ``gt_part``/``gt_anchor`` are optional ground-truth payloads used only for
    error metrics (-1 when unknown). The anchor is the part-local point the
    surfel stands for; fusion averages it alongside the vertex.
    """

    vertex: np.ndarray
    normal: np.ndarray
    color: np.ndarray  # float RGB in [0, 255]
    radius: np.ndarray
    semantic: np.ndarray  # (S, C)
    count: np.ndarray
    last_seen: np.ndarray
    created: np.ndarray
    gt_part: np.ndarray
    gt_anchor: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "SurfelGeometry":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, n_classes)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.vertex)

    @property
    def n_classes(self) -> int:
        return self.semantic.shape[1]

    def labels(self) -> np.ndarray:
        """Argmax class per surfel (ties go to the lower class id)."""
        return np.argmax(self.semantic, axis=1) + 1

    def copy(self) -> "SurfelGeometry":
        return SurfelGeometry(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def select(self, keep: np.ndarray) -> tuple["SurfelGeometry", np.ndarray]:
        """Compacted geometry and the old->new index remap (-1 for dropped)."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        return SurfelGeometry(**{f.name: getattr(self, f.name)[keep] for f in fields(self)}), remap

    def extend(self, other: "SurfelGeometry") -> "SurfelGeometry":
        return SurfelGeometry(**{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                                 for f in fields(self)})

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.vertex[i].copy(), self.normal[i].copy(), self.color[i].copy(), float(self.radius[i]),
                      self.semantic[i].copy(), int(self.count[i]), int(self.last_seen[i]))


@dataclass
class FusionOptions:
    measurement_confidence: float = 1.0
    unrecognized_confidence: float = 0.0
    semantic_fusion: bool = True
    violation_margin: float = 0.02
    stale_frames: int = 10
    radius_scale: float = math.sqrt(2.0)
    max_radius: float = 0.05


# ------------------------------------------------------------------ warping


def warp_geometry(geometry: SurfelGeometry, binding: SurfelBinding, transforms: np.ndarray
                  ) -> tuple[SurfelGeometry, np.ndarray]:
    """Warped copy of the geometry and a mask of surfels left unwarped.

    Surfels whose blend weights all underflowed cannot be warped; they are
    returned unchanged and flagged.
    """
    out = geometry.copy()
    if len(geometry) == 0:
        return out, np.zeros(0, dtype=bool)
    degenerate = ~np.any(binding.weights > 0, axis=1)
    ok = ~degenerate
    if ok.any():
        sub = SurfelBinding(binding.nodes[ok], binding.weights[ok])
        blended = blend_transforms(sub, transforms)
        out.vertex[ok], out.normal[ok] = warp_surfel(geometry.vertex[ok], geometry.normal[ok], blended)
    return out, degenerate


# ----------------------------------------------------------- fuse and append


def update_distribution(p: np.ndarray, measured: np.ndarray, delta: np.ndarray | float) -> np.ndarray:
    """Add ``delta`` to the measured class entry, then renormalize to sum 1."""
    p = np.array(p, dtype=float, copy=True, ndmin=2)
    measured = np.atleast_1d(np.asarray(measured, dtype=np.int64))
    delta = np.broadcast_to(np.asarray(delta, dtype=float), measured.shape)
    p[np.arange(len(p)), measured - 1] += delta
    return p / p.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels - 1] = 1.0
    return out


def fuse(m_vertex, m_normal, m_color, m_label: int, surfel: Surfel, delta_m: float = 1.0,
         frame: int | None = None) -> Surfel:
    """Merge one measurement into one surfel (count-weighted running average)."""
    c = surfel.count
    v = (c * surfel.vertex + np.asarray(m_vertex, float)) / (c + 1)
    n = c * surfel.normal + np.asarray(m_normal, float)
    n = n / np.linalg.norm(n)
    col = (c * surfel.color + np.asarray(m_color, float)) / (c + 1)
    p = update_distribution(surfel.semantic, m_label, delta_m)[0]
    return Surfel(v, n, col, surfel.radius, p, c + 1, surfel.last_seen if frame is None else frame)


def surfel_radius(depth: np.ndarray, normal: np.ndarray, vertex: np.ndarray, fx: float,
                  opts: FusionOptions | None = None) -> np.ndarray:
    """Pixel footprint ``depth / fx`` scaled up at grazing angles, clamped."""
    opts = opts or FusionOptions()
    view = vertex / np.linalg.norm(vertex, axis=-1, keepdims=True)
    cos = np.clip(-np.sum(normal * view, axis=-1), 0.26, 1.0)
    return np.minimum(opts.radius_scale * depth / fx / cos, opts.max_radius)


def append(m_vertex, m_normal, m_color, m_label: int, n_classes: int, fx: float,
           frame: int = 0, opts: FusionOptions | None = None) -> Surfel:
    """New surfel from one measurement; its distribution is one-hot on the label."""
    v = np.asarray(m_vertex, float)
    n = np.asarray(m_normal, float)
    r = float(surfel_radius(v[2:3], n[None], v[None], fx, opts)[0])
    return Surfel(v, n, np.asarray(m_color, float), r, one_hot(m_label, n_classes)[0], 1, frame)


def fusion_registration(measurement: MeasurementFrame, render_g: RenderMaps, geometry: SurfelGeometry,
                        gates: GateOptions | None = None) -> np.ndarray:
    """Surfel registered to each measurement pixel, or -1.

    Looks inside the ``scale x scale`` footprint of each valid pixel in the
    fine render of the warped geometry and keeps the nearest surfel that
    passes the distance and normal gates (lower index on ties). Every render
    pixel belongs to exactly one footprint, so no surfel is claimed twice.
    """
    gates = gates or GateOptions()
    s = render_g.scale
    h, w = measurement.shape
    half = s // 2
    pad = np.pad(render_g.index, ((half, s - half), (half, s - half)), constant_values=EMPTY)
    blocks = pad[: h * s, : w * s].reshape(h, s, w, s).transpose(0, 2, 1, 3).reshape(h, w, s * s)
    out = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.nonzero(measurement.valid)
    cand = blocks[ys, xs]  # (M, s*s)
    has = cand != EMPTY
    safe = np.where(has, cand, 0)
    mv = measurement.vertex[ys, xs]
    mn = measurement.normal[ys, xs]
    dist = np.linalg.norm(geometry.vertex[safe] - mv[:, None, :], axis=-1)
    cos = np.sum(geometry.normal[safe] * mn[:, None, :], axis=-1)
    ok = has & (dist <= gates.max_distance) & (cos >= math.cos(math.radians(gates.max_angle_deg)))
    dist = np.where(ok, dist, np.inf)
    order = np.lexsort((np.where(ok, cand, np.iinfo(np.int64).max), dist), axis=-1)[:, 0]
    best = cand[np.arange(len(cand)), order]
    found = ok[np.arange(len(cand)), order]
    out[ys[found], xs[found]] = best[found]
    return out


@dataclass
class FusionResult:
    geometry: SurfelGeometry
    fused: np.ndarray  # indices into the pre-append geometry
    appended: int
    attempts: int
    new_surfels: np.ndarray  # indices of appended surfels in the result


def fuse_and_append(geometry: SurfelGeometry, measurement: MeasurementFrame, registration: np.ndarray,
                    opts: FusionOptions, unrecognized: int, gt_parts: np.ndarray | None = None,
                    gt=None) -> FusionResult:
    """Vectorized fuse for registered pixels, append for the rest."""
    t = measurement.index
    ys, xs = np.nonzero(measurement.valid)
    reg = registration[ys, xs]
    out = geometry.copy()
    labels = measurement.label[ys, xs]
    delta = np.where(labels == unrecognized, opts.unrecognized_confidence, opts.measurement_confidence)

    fz = reg >= 0
    idx = reg[fz]
    c = out.count[idx][:, None].astype(float)
    mv = measurement.vertex[ys[fz], xs[fz]]
    mn = measurement.normal[ys[fz], xs[fz]]
    mc = measurement.color[ys[fz], xs[fz]].astype(float)
    if gt is not None and gt_parts is not None and len(idx):
        # the averaged vertex stands for the averaged physical point, as long
        # as the measurement resamples the same point (within the footprint)
        parts = gt_parts[ys[fz], xs[fz]]
        same = (parts >= 0) & (parts == out.gt_part[idx])
        anchor = np.zeros((len(idx), 3))
        if same.any():
            anchor[same] = gt.anchor(t, parts[same], mv[same])
            same[same] = np.linalg.norm(anchor[same] - out.gt_anchor[idx[same]], axis=1) <= out.radius[idx[same]]
        if same.any():
            si = idx[same]
            out.gt_anchor[si] = (c[same] * out.gt_anchor[si] + anchor[same]) / (c[same] + 1)
    out.vertex[idx] = (c * out.vertex[idx] + mv) / (c + 1)
    n = c * out.normal[idx] + mn
    out.normal[idx] = n / np.linalg.norm(n, axis=1, keepdims=True)
    out.color[idx] = (c * out.color[idx] + mc) / (c + 1)
    if opts.semantic_fusion:
        out.semantic[idx] = update_distribution(out.semantic[idx], labels[fz], delta[fz])
    else:
        out.semantic[idx] = one_hot(labels[fz], out.n_classes)
    out.count[idx] += 1
    out.last_seen[idx] = t

    ap = ~fz
    ay, ax = ys[ap], xs[ap]
    av = measurement.vertex[ay, ax]
    an = measurement.normal[ay, ax]
    new = SurfelGeometry(
        vertex=av.copy(),
        normal=an.copy(),
        color=measurement.color[ay, ax].astype(float),
        radius=surfel_radius(av[:, 2], an, av, measurement.intrinsics.fx, opts),
        semantic=one_hot(labels[ap], out.n_classes),
        count=np.ones(len(ay), np.int64),
        last_seen=np.full(len(ay), t, np.int64),
        created=np.full(len(ay), t, np.int64),
        gt_part=np.full(len(ay), -1, np.int64),
        gt_anchor=np.zeros((len(ay), 3)),
    )
    if gt is not None and gt_parts is not None:
        parts = gt_parts[ay, ax]
        known = parts >= 0
        new.gt_part[known] = parts[known]
        if known.any():
            new.gt_anchor[known] = gt.anchor(t, parts[known], av[known])
    start = len(out)
    out = out.extend(new)
    return FusionResult(out, idx, int(ap.sum()), len(ys), np.arange(start, len(out)))


def bootstrap_geometry(measurement: MeasurementFrame, n_classes: int, opts: FusionOptions,
                       gt_parts: np.ndarray | None = None, gt=None) -> SurfelGeometry:
    """Every valid pixel of the first frame becomes a surfel."""
    empty = SurfelGeometry.empty(n_classes)
    reg = np.full(measurement.shape, -1, dtype=np.int64)
    unrecognized = n_classes
    return fuse_and_append(empty, measurement, reg, opts, unrecognized, gt_parts, gt).geometry


# ------------------------------------------------------------------ removal


def remove_violating(geometry: SurfelGeometry, measurement: MeasurementFrame, fused: np.ndarray,
                     opts: FusionOptions | None = None) -> np.ndarray:
    """Indices of unfused surfels failing the free-space or staleness test.

    A surfel violates free space when it sits more than
    ``opts.violation_margin`` in front of the measured depth at its pixel. It
    is stale when it was observed only once and has not been seen for
    ``opts.stale_frames`` frames.
    """
    opts = opts or FusionOptions()
    t = measurement.index
    candidates = np.ones(len(geometry), dtype=bool)
    candidates[np.asarray(fused, dtype=np.int64)] = False
    ids = np.nonzero(candidates)[0]
    pix, inside = project_pixels(geometry.vertex[ids], measurement.intrinsics, 1)
    meas = np.zeros(len(ids))
    meas[inside] = measurement.depth[pix[inside, 1], pix[inside, 0]]
    has_depth = inside & (meas > 0)
    violating = has_depth & (geometry.vertex[ids, 2] < meas - opts.violation_margin)
    stale = (geometry.count[ids] == 1) & (t - geometry.last_seen[ids] >= opts.stale_frames)
    return ids[violating | stale]


# ----------------------------------------------------------------- graph growth


def majority_label(labels: np.ndarray) -> np.ndarray:
    """Row-wise most frequent label; ties go to the lower class id."""
    labels = np.atleast_2d(labels)
    top = labels.max() + 1
    counts = np.zeros((len(labels), top), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(labels)), labels.shape[1]), labels.reshape(-1)), 1)
    return np.argmax(counts, axis=1)


def node_support_distance(points: np.ndarray, graph: DeformationGraph) -> np.ndarray:
    if len(graph) == 0:
        return np.full(len(points), np.inf)
    d, _ = cKDTree(graph.positions).query(points)
    return np.asarray(d)


def update_graph(geometry: SurfelGeometry, graph: DeformationGraph, sigma: float,
                 rigidness: Mapping[int, float] | None, mode: str = "sad", label_neighbors: int = 8,
                 radius_factor: float = 1.5, node_neighbors: int = 8) -> tuple[DeformationGraph, int]:
    """Add nodes over unsupported surfels; returns the new graph and nodes added.

    Unsupported surfels (farther than ``sigma`` from every node) are
    voxel-downsampled at spacing ``sigma``, keeping the lowest surfel index
    per voxel. Sampling repeats until every surfel is supported. Existing
    nodes are kept. Edges and weights are rebuilt.
    """
    out = graph.copy()
    added = 0
    if len(geometry):
        surfel_labels = geometry.labels()
        tree = cKDTree(geometry.vertex)
        pending = np.nonzero(node_support_distance(geometry.vertex, out) > sigma)[0]
        while len(pending):
            keys = np.floor(geometry.vertex[pending] / sigma).astype(np.int64)
            _, first = np.unique(keys, axis=0, return_index=True)
            reps = np.sort(pending[first])
            k = min(label_neighbors, len(geometry))
            _, nb = tree.query(geometry.vertex[reps], k=k)
            nb = np.asarray(nb).reshape(len(reps), k)
            labels = majority_label(surfel_labels[nb])
            out.add_nodes(geometry.vertex[reps], radius_factor * sigma, labels)
            added += len(reps)
            d = node_support_distance(geometry.vertex[pending], out)
            pending = pending[d > sigma]
    out.neighbors = build_node_neighbors(out.positions, node_neighbors)
    if mode == "sad":
        out.edge_weights = compute_edge_weights(out.labels, out.neighbors, rigidness or {})
    elif mode == "ed-uniform":
        out.edge_weights = uniform_edge_weights(out.neighbors)
    else:
        raise ValueError(f"unknown graph mode {mode!r}")
    return out, added


# ---------------------------------------------------------------------- export


def write_ply(path: Path, geometry: SurfelGeometry) -> None:
    """ASCII PLY with normals, color, radius, argmax label and its probability."""
    labels = geometry.labels()
    conf = geometry.semantic.max(axis=1) if len(geometry) else np.zeros(0)
    color = np.clip(np.rint(geometry.color), 0, 255).astype(int)
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(geometry)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        "property float radius", "property int label", "property float label_confidence",
        "end_header",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(len(geometry)):
            v, n, c = geometry.vertex[i], geometry.normal[i], color[i]
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f} "
                     f"{c[0]} {c[1]} {c[2]} {geometry.radius[i]:.6f} {labels[i]} {conf[i]:.6f}\n")


def read_ply(path: Path) -> dict[str, np.ndarray]:
    """Parse a PLY written by ``write_ply`` into named columns."""
    lines = Path(path).read_text().splitlines()
    names = []
    start = 0
    for i, line in enumerate(lines):
        if line.startswith("property"):
            names.append(line.split()[-1])
        if line == "end_header":
            start = i + 1
            break
    data = np.array([l.split() for l in lines[start:]], dtype=float).reshape(-1, len(names))
    return {n: data[:, j] for j, n in enumerate(names)}

