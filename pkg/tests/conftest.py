"""Shared fixtures and small problem builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from sadfusion import dualquat as dqm
from sadfusion.align import AlignmentProblem, Correspondences, EnergyWeights
from sadfusion.measurement import CameraIntrinsics
from sadfusion.warpfield import (
    DeformationGraph,
    bind_surfels,
    blend_transforms,
    build_node_neighbors,
    compute_edge_weights,
)

# acceptance outcomes, echoed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=12.0, width=32, height=24)


def random_transforms(rng, n, rot_scale=0.1, trans_scale=0.02):
    rot = dqm.quat_from_axis_angle(rng.normal(scale=rot_scale, size=(n, 3)))
    return dqm.dq_from_rt(rot, rng.normal(scale=trans_scale, size=(n, 3)))


def random_problem(rng, n_nodes=None, n_corr=None, weights=None, rigidness=None, tracking=False):
    """A random alignment instance with a few nodes and correspondences.

    Returns the problem and a random (non-identity) starting warp. With
    ``tracking`` the measurements are the surfels moved by a random small
    warp plus 1 mm noise and the start is the identity, as in a frame solve.
    """
    n = int(n_nodes or rng.integers(1, 6))
    m = int(n_corr or rng.integers(1, 21))
    pos = rng.normal(scale=0.04, size=(n, 3)) + [0.0, 0.0, 1.0]
    graph = DeformationGraph()
    graph.add_nodes(pos, 0.08, rng.integers(1, 3, size=n))
    graph.neighbors = build_node_neighbors(pos, 8)
    graph.edge_weights = compute_edge_weights(graph.labels, graph.neighbors, rigidness or {1: 1.0, 2: 0.3})
    surf = pos[rng.integers(n, size=m)] + rng.normal(scale=0.03, size=(m, 3))
    binding = bind_surfels(surf, graph, k=min(4, n))
    normals = rng.normal(size=(m, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if tracking:
        truth = random_transforms(rng, n, rot_scale=0.05, trans_scale=0.01)
        moved = dqm.dq_transform_points(blend_transforms(binding, truth), surf)
        meas = moved + rng.normal(scale=0.001, size=(m, 3))
        init = np.tile(dqm.IDENTITY, (n, 1))
    else:
        meas = surf + rng.normal(scale=0.01, size=(m, 3))
        init = random_transforms(rng, n)
    corr = Correspondences.from_arrays(meas, normals, surf, binding.nodes, binding.weights)
    problem = AlignmentProblem(corr, graph, weights or EnergyWeights())
    return problem, init
