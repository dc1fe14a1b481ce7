"""Deformation graph with per-node dual-quaternion transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from . import dualquat as dqm
from .errors import ConfigError, DegenerateBindingError

CROSS_CLASS_WEIGHT = 0.1
NODE_NEIGHBORS = 8
SURFEL_NEIGHBORS = 4


@dataclass
class DeformationGraph:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    transforms: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    neighbors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    edge_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "DeformationGraph":
        return DeformationGraph(*(a.copy() for a in (
            self.positions, self.radii, self.labels, self.transforms, self.neighbors, self.edge_weights)))

    def add_nodes(self, positions: np.ndarray, radius: float, labels: np.ndarray) -> None:
        """Append nodes with identity transforms. Edges must be rebuilt after."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(positions)
        self.positions = np.vstack([self.positions, positions])
        self.radii = np.concatenate([self.radii, np.full(n, float(radius))])
        self.labels = np.concatenate([self.labels, np.asarray(labels, dtype=np.int64)])
        self.transforms = np.vstack([self.transforms, np.tile(dqm.IDENTITY, (n, 1))])

    def reset_transforms(self) -> None:
        self.transforms = np.tile(dqm.IDENTITY, (len(self), 1))

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(j, i, weight)`` for every node ``j`` and neighbour ``i``."""
        k = self.neighbors.shape[1]
        j = np.repeat(np.arange(len(self)), k)
        return j, self.neighbors.reshape(-1), self.edge_weights.reshape(-1)

    def to_json(self) -> dict:
        j, i, w = self.directed_edges()
        return {
            "nodes": [
                {"position": p.tolist(), "radius": float(r), "label": int(l), "transform": q.tolist()}
                for p, r, l, q in zip(self.positions, self.radii, self.labels, self.transforms)
            ],
            "edges": [{"from": int(a), "to": int(b), "weight": float(c)} for a, b, c in zip(j, i, w)],
        }


@dataclass
class SurfelBinding:
    nodes: np.ndarray  # (S, k) node indices
    weights: np.ndarray  # (S, k) unnormalized blend weights

    def __len__(self) -> int:
        return len(self.nodes)


def blend_weights(points: np.ndarray, node_pos: np.ndarray, node_radius: np.ndarray) -> np.ndarray:
    """Gaussian falloff ``exp(-|v - p|^2 / (2 r^2))``."""
    d2 = np.sum((points - node_pos) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * node_radius**2))


def knn(points: np.ndarray, targets: np.ndarray, k: int, exclude_self: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Indices and squared distances of the ``k`` nearest targets.

    Ties are broken by lower target index: candidates are over-fetched from
    the tree and re-sorted by exact squared distance, then index.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    n_t = len(targets)
    want = k + (1 if exclude_self else 0)
    fetch = min(n_t, want + 4)
    if len(points) == 0 or k == 0:
        return np.zeros((len(points), k), dtype=np.int64), np.zeros((len(points), k))
    _, cand = cKDTree(targets).query(points, k=fetch)
    cand = np.asarray(cand).reshape(len(points), fetch)
    d2 = np.sum((targets[cand] - points[:, None, :]) ** 2, axis=-1)
    if exclude_self:
        d2 = np.where(cand == np.arange(len(points))[:, None], np.inf, d2)
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)[:, :k]
    d2 = np.take_along_axis(d2, order, axis=1)[:, :k]
    return cand, d2


def bind_surfels(positions: np.ndarray, graph: DeformationGraph, k: int = SURFEL_NEIGHBORS,
                 surfel_labels: np.ndarray | None = None) -> SurfelBinding:
    """Bind every surfel to its ``k`` nearest nodes (fewer if the graph is small).

    With ``surfel_labels``, a node whose label differs from the surfel's gets
    its blend weight scaled by the cross-class constant, the same factor the
    semantic graph puts on edges between classes. Node selection stays purely
    geometric.
    """
    if len(graph) == 0:
        raise ValueError("cannot bind surfels to an empty graph")
    k = min(k, len(graph))
    nodes, d2 = knn(positions, graph.positions, k)
    weights = np.exp(-d2 / (2.0 * graph.radii[nodes] ** 2))
    if surfel_labels is not None:
        cross = graph.labels[nodes] != np.asarray(surfel_labels)[:, None]
        weights = np.where(cross, CROSS_CLASS_WEIGHT * weights, weights)
    return SurfelBinding(nodes, weights)


def build_node_neighbors(positions: np.ndarray, k: int = NODE_NEIGHBORS) -> np.ndarray:
    """k nearest other nodes per node; no self loops, no duplicates."""
    n = len(positions)
    k = min(k, max(n - 1, 0))
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    nodes, _ = knn(positions, positions, k, exclude_self=True)
    return nodes


def compute_edge_weights(labels: np.ndarray, neighbors: np.ndarray, rigidness: Mapping[int, float],
                         n_classes: int | None = None) -> np.ndarray:
    """Semantic connection weights: 0.1 across labels, the class rigidness within one.

    Raises:
        ConfigError: when the rigidness table lacks a class in ``1..n_classes``
            or a label present in the graph.
    """
    labels = np.asarray(labels, dtype=np.int64)
    needed = set(range(1, n_classes + 1)) if n_classes else set()
    needed |= set(int(x) for x in np.unique(labels))
    missing = sorted(c for c in needed if c not in rigidness)
    if missing:
        raise ConfigError(f"rigidness table has no entry for class(es) {missing}")
    if neighbors.size == 0:
        return np.zeros(neighbors.shape)
    table = np.zeros(max(needed | set(rigidness)) + 1)
    for c, v in rigidness.items():
        table[int(c)] = float(v)
    li = labels[:, None]
    lj = labels[neighbors]
    return np.where(li == lj, table[li], CROSS_CLASS_WEIGHT) * np.ones_like(lj, dtype=float)


def uniform_edge_weights(neighbors: np.ndarray, weight: float = 1.0) -> np.ndarray:
    return np.full(neighbors.shape, float(weight))


def blend_dq_raw(binding: SurfelBinding, transforms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized sign-aligned blend and the signed weights used.

    Each bound transform is flipped so its real part agrees in sign with the
    first bound node's, since ``q`` and ``-q`` are the same rigid motion.
    """
    q = transforms[binding.nodes]  # (S, k, 8)
    ref = q[:, :1, :4]
    sign = np.where(np.sum(q[..., :4] * ref, axis=-1) < 0, -1.0, 1.0)
    signed = binding.weights * sign
    return np.einsum("sk,skd->sd", signed, q), signed


def blend_transforms(binding: SurfelBinding, transforms: np.ndarray) -> np.ndarray:
    """Normalized blended transforms, one per bound surfel.

    Raises:
        DegenerateBindingError: when every weight of some surfel underflowed.
    """
    degenerate = ~np.any(binding.weights > 0, axis=1)
    if degenerate.any():
        raise DegenerateBindingError(f"{int(degenerate.sum())} surfel(s) too far from all bound nodes")
    raw, _ = blend_dq_raw(binding, transforms)
    return dqm.dq_normalize(raw)


def blend_transform(position: np.ndarray, node_ids, graph: DeformationGraph) -> np.ndarray:
    """Blended transform of a single point bound to ``node_ids``."""
    node_ids = np.atleast_1d(np.asarray(node_ids, dtype=np.int64))
    if node_ids.size == 0:
        raise ValueError("binding is empty")
    w = blend_weights(np.asarray(position, float)[None], graph.positions[node_ids], graph.radii[node_ids])
    return blend_transforms(SurfelBinding(node_ids[None], w[None]), graph.transforms)[0]


def warp_surfel(vertex: np.ndarray, normal: np.ndarray, blended: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigidly move vertices by ``blended``; rotate normals only."""
    v = dqm.dq_transform_points(blended, vertex)
    n = dqm.dq_rotate_vectors(blended, normal)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return v, n


def node_translations(graph: DeformationGraph) -> np.ndarray:
    return dqm.dq_translation(graph.transforms)


def warp_nodes(graph: DeformationGraph) -> np.ndarray:
    """Node positions moved by their own transforms."""
    return dqm.dq_transform_points(graph.transforms, graph.positions)
