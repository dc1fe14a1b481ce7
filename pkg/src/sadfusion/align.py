"""Non-rigid alignment: flow registration, energy terms and the node solver.

Each node transform is updated through a 6-dof local increment ``(w, t)``
that rotates about the node's current warped position, so that
``q_new = inc(w, t) * q``. Residuals are linearized at ``(w, t) = 0``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import dualquat as dqm
from .errors import SolverError
from .measurement import FlowMap, MeasurementFrame
from .render import EMPTY, RenderMaps
from .warpfield import DeformationGraph, SurfelBinding, blend_dq_raw

logger = logging.getLogger(__name__)

TERMS = ("total", "picp", "2d", "areg")


@dataclass
class EnergyWeights:
    picp: float = 1.0
    two_d: float = 1.0
    areg: float = 4.0

    def __post_init__(self):
        values = (self.picp, self.two_d, self.areg)
        if min(values) < 0:
            raise ValueError("energy weights must be non-negative")
        if max(values) == 0:
            raise ValueError("at least one energy weight must be positive")

    def scaled(self, factor: float) -> "EnergyWeights":
        return EnergyWeights(self.picp * factor, self.two_d * factor, self.areg * factor)


@dataclass
class SolverOptions:
    max_outer: int = 8
    sweeps: int = 4
    rel_tol: float = 1e-5
    damping: float = 1e-6
    max_backtracks: int = 4
    linear_solver: str = "gauss-seidel"  # or "dense"
    damping_retries: int = 6  # x10 damping re-solves once backtracking is exhausted


@dataclass
class GateOptions:
    max_distance: float = 0.05
    max_angle_deg: float = 30.0


@dataclass
class Correspondences:
    """Registered (measurement pixel, geometry surfel) pairs, struct-of-arrays."""

    pixel: np.ndarray  # (M, 2) measurement (x, y)
    meas_vertex: np.ndarray  # (M, 3)
    meas_normal: np.ndarray  # (M, 3)
    surfel: np.ndarray  # (M,) geometry index
    surfel_vertex: np.ndarray  # (M, 3)
    nodes: np.ndarray  # (M, k)
    weights: np.ndarray  # (M, k)

    def __len__(self) -> int:
        return len(self.surfel)

    @classmethod
    def empty(cls, k: int = 1) -> "Correspondences":
        return cls(np.zeros((0, 2), np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64),
                   np.zeros((0, 3)), np.zeros((0, k), np.int64), np.zeros((0, k)))

    @classmethod
    def from_arrays(cls, meas_vertex, meas_normal, surfel_vertex, nodes, weights) -> "Correspondences":
        m = len(meas_vertex)
        return cls(np.zeros((m, 2), np.int64), np.asarray(meas_vertex, float), np.asarray(meas_normal, float),
                   np.arange(m), np.asarray(surfel_vertex, float), np.asarray(nodes, np.int64),
                   np.asarray(weights, float))


@dataclass
class SolverReport:
    iterations: int = 0
    energies: list[dict] = field(default_factory=list)
    termination: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "energies": self.energies,
                "termination": self.termination, "error": self.error}


def build_correspondences(measurement: MeasurementFrame, flow: FlowMap, render_a: RenderMaps,
                          geometry, binding: SurfelBinding, gates: GateOptions | None = None) -> Correspondences:
    """Pair each valid measurement pixel with the surfel rendered at its flow source.

    The lookup pixel is ``round(u - flow(u))`` in the alignment render. Pairs
    farther apart than ``gates.max_distance`` or whose normals differ by more
    than ``gates.max_angle_deg`` are dropped.
    """
    gates = gates or GateOptions()
    if flow.valid.shape != measurement.shape:
        raise ValueError(f"flow {flow.valid.shape} does not match frame {measurement.shape}")
    if render_a.scale != 1:
        raise ValueError("registration needs the scale-1 alignment render")
    h, w = measurement.shape
    ys, xs = np.nonzero(measurement.valid & flow.valid)
    sx = np.rint(xs - flow.flow[ys, xs, 0]).astype(np.int64)
    sy = np.rint(ys - flow.flow[ys, xs, 1]).astype(np.int64)
    inb = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    ys, xs, sx, sy = ys[inb], xs[inb], sx[inb], sy[inb]
    idx = render_a.index[sy, sx]
    hit = idx != EMPTY
    ys, xs, idx = ys[hit], xs[hit], idx[hit]
    mv = measurement.vertex[ys, xs]
    mn = measurement.normal[ys, xs]
    sv = geometry.vertex[idx]
    sn = geometry.normal[idx]
    keep = np.linalg.norm(sv - mv, axis=1) <= gates.max_distance
    keep &= np.sum(sn * mn, axis=1) >= math.cos(math.radians(gates.max_angle_deg))
    ys, xs, idx = ys[keep], xs[keep], idx[keep]
    return Correspondences(
        pixel=np.stack([xs, ys], axis=1),
        meas_vertex=mv[keep],
        meas_normal=mn[keep],
        surfel=idx,
        surfel_vertex=sv[keep],
        nodes=binding.nodes[idx],
        weights=binding.weights[idx],
    )


# ------------------------------------------------------------------- energies


class AlignmentProblem:
    """The three-term energy over node transforms, with analytic Jacobians."""

    def __init__(self, corr: Correspondences, graph: DeformationGraph, weights: EnergyWeights):
        self.corr = corr
        self.node_pos = graph.positions
        self.n_nodes = len(graph)
        self.edge_j, self.edge_i, self.edge_w = graph.directed_edges()
        self.weights = weights
        self._binding = SurfelBinding(corr.nodes, corr.weights)

    # residuals -----------------------------------------------------------

    def warped_sources(self, transforms: np.ndarray) -> np.ndarray:
        raw, _ = blend_dq_raw(self._binding, transforms)
        return dqm.dq_transform_points(raw, self.corr.surfel_vertex)

    def residuals(self, transforms: np.ndarray) -> dict[str, np.ndarray]:
        """Unweighted residuals: ``picp`` (M,), ``2d`` (M, 2), ``areg`` (E, 3)."""
        out = {}
        if len(self.corr):
            diff = self.warped_sources(transforms) - self.corr.meas_vertex
            out["picp"] = np.sum(self.corr.meas_normal * diff, axis=1)
            out["2d"] = diff[:, :2]
        else:
            out["picp"] = np.zeros(0)
            out["2d"] = np.zeros((0, 2))
        pj = self.node_pos[self.edge_j]
        out["areg"] = (dqm.dq_transform_points(transforms[self.edge_i], pj)
                       - dqm.dq_transform_points(transforms[self.edge_j], pj))
        return out

    def energy(self, transforms: np.ndarray) -> dict[str, float]:
        r = self.residuals(transforms)
        e_picp = float(np.sum(r["picp"] ** 2))
        e_2d = float(np.sum(r["2d"] ** 2))
        e_areg = float(np.sum(self.edge_w * np.sum(r["areg"] ** 2, axis=1)))
        w = self.weights
        total = w.picp * e_picp + w.two_d * e_2d + w.areg * e_areg
        return {"total": total, "picp": e_picp, "2d": e_2d, "areg": e_areg}

    def weighted_residual_vector(self, transforms: np.ndarray) -> np.ndarray:
        r = self.residuals(transforms)
        w = self.weights
        return np.concatenate([
            math.sqrt(w.picp) * r["picp"],
            math.sqrt(w.two_d) * r["2d"].reshape(-1),
            (np.sqrt(w.areg * self.edge_w)[:, None] * r["areg"]).reshape(-1),
        ])

    # jacobians -----------------------------------------------------------

    def centers(self, transforms: np.ndarray) -> np.ndarray:
        return dqm.dq_transform_points(transforms, self.node_pos)

    def term_jacobians(self, transforms: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-term dense Jacobian blocks and their node columns.

        ``picp``: (M, k, 6), ``2d``: (M, k, 2, 6), ``areg``: (E, 2, 3, 6); each
        paired with the node index array of matching leading shape.
        """
        centers = self.centers(transforms)
        node_jac = dqm.increment_jacobian(transforms, centers)  # (N, 8, 6)
        out = {}
        if len(self.corr):
            raw, signed = blend_dq_raw(self._binding, transforms)
            jf = dqm.point_jacobian(raw, self.corr.surfel_vertex)  # (M, 3, 8)
            jq = signed[..., None, None] * node_jac[self.corr.nodes]  # (M, k, 8, 6)
            jp = np.einsum("mij,mkjl->mkil", jf, jq)  # (M, k, 3, 6)
            out["picp"] = (np.einsum("mi,mkil->mkl", self.corr.meas_normal, jp), self.corr.nodes)
            out["2d"] = (jp[:, :, :2, :], self.corr.nodes)
        else:
            out["picp"] = (np.zeros((0, 1, 6)), np.zeros((0, 1), np.int64))
            out["2d"] = (np.zeros((0, 1, 2, 6)), np.zeros((0, 1), np.int64))
        pj = self.node_pos[self.edge_j]
        e = len(pj)
        ja = np.zeros((e, 2, 3, 6))
        yi = dqm.dq_transform_points(transforms[self.edge_i], pj)
        yj = dqm.dq_transform_points(transforms[self.edge_j], pj)
        ja[:, 0, :, :3] = -dqm.skew(yi - centers[self.edge_i])
        ja[:, 0, :, 3:] = np.eye(3)
        ja[:, 1, :, :3] = dqm.skew(yj - centers[self.edge_j])
        ja[:, 1, :, 3:] = -np.eye(3)
        out["areg"] = (ja, np.stack([self.edge_i, self.edge_j], axis=1))
        return out

    def linearize(self, transforms: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        """Weighted sparse Jacobian ``J`` (rows x 6N) and residual ``r``."""
        blocks = self.term_jacobians(transforms)
        w = self.weights
        rows, cols, vals = [], [], []
        offset = 0

        def add(block, nodes, scale):
            # block: (R, k, d, 6) with residual dim d, nodes: (R, k)
            nonlocal offset
            n_res, k, d, _ = block.shape
            r_idx = offset + np.arange(n_res)[:, None, None, None] * d + np.arange(d)[None, None, :, None]
            c_idx = nodes[:, :, None, None] * 6 + np.arange(6)[None, None, None, :]
            r_idx, c_idx = np.broadcast_arrays(r_idx, c_idx)
            rows.append(r_idx.reshape(-1))
            cols.append(c_idx.reshape(-1))
            vals.append((block * scale).reshape(-1))
            offset += n_res * d

        jp, nodes = blocks["picp"]
        add(jp[:, :, None, :], nodes, math.sqrt(w.picp))
        j2, nodes = blocks["2d"]
        add(j2, nodes, math.sqrt(w.two_d))
        ja, nodes = blocks["areg"]
        add(ja, nodes, np.sqrt(w.areg * self.edge_w)[:, None, None, None])
        jac = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, 6 * self.n_nodes),
        )
        return jac, self.weighted_residual_vector(transforms)


def apply_increment(transforms: np.ndarray, xi: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """``q_i <- inc(xi_i about centers_i) * q_i``, renormalized."""
    inc = dqm.local_increment(xi.reshape(-1, 6), centers)
    return dqm.dq_normalize(dqm.dq_mul(inc, transforms))


# -------------------------------------------------------------------- solver


def _damped_block(block: np.ndarray, lam: float) -> np.ndarray:
    d = np.diag(block)
    return block + lam * (np.diag(d) + (d.sum() / 6.0) * np.eye(6))


def _factor_block(block: np.ndarray, lam: float, node: int):
    """Cholesky factor of a damped 6x6 block; ``None`` if the block is empty."""
    if not np.any(block):
        return None
    for attempt in range(6):
        try:
            return scipy.linalg.cho_factor(_damped_block(block, lam * 100.0**attempt))
        except np.linalg.LinAlgError:
            logger.debug("node %d: block not positive definite, raising damping", node)
    raise SolverError(f"6x6 block of node {node} stays singular under damping")


def gauss_seidel(hessian: np.ndarray, grad: np.ndarray, n_nodes: int, opts: SolverOptions) -> np.ndarray:
    """Block Gauss-Seidel on ``H x = -g``, sweeping nodes in index order."""
    x = np.zeros(6 * n_nodes)
    factors = [_factor_block(hessian[6 * i : 6 * i + 6, 6 * i : 6 * i + 6], opts.damping, i) for i in range(n_nodes)]
    for _ in range(opts.sweeps):
        for i, fac in enumerate(factors):
            if fac is None:
                continue
            sl = slice(6 * i, 6 * i + 6)
            rhs = -grad[sl] - hessian[sl] @ x + hessian[sl, sl] @ x[sl]
            x[sl] = scipy.linalg.cho_solve(fac, rhs)
    return x


def dense_solve(hessian: np.ndarray, grad: np.ndarray, n_nodes: int, opts: SolverOptions) -> np.ndarray:
    """Direct solve of the same damped system; the reference for Gauss-Seidel."""
    h = hessian.copy()
    active = np.zeros(6 * n_nodes, dtype=bool)
    for i in range(n_nodes):
        sl = slice(6 * i, 6 * i + 6)
        if np.any(hessian[sl, sl]):
            h[sl, sl] = _damped_block(hessian[sl, sl], opts.damping)
            active[sl] = True
    x = np.zeros(6 * n_nodes)
    if active.any():
        x[active] = np.linalg.solve(h[np.ix_(active, active)], -grad[active])
    return x


def _damped_step(problem, linear, hessian, grad, transforms, centers, current, opts):
    """Backtracked step that does not raise the energy, or ``(None, None)``.

    When halving fails ``max_backtracks`` times the same system is re-solved
    with ten times the damping, up to ``damping_retries`` times.
    """
    lam = opts.damping
    for _ in range(opts.damping_retries + 1):
        step = linear(hessian, grad, problem.n_nodes, dataclasses.replace(opts, damping=lam)).reshape(-1, 6)
        scale = 1.0
        for _ in range(opts.max_backtracks + 1):
            candidate = apply_increment(transforms, scale * step, centers)
            trial = problem.energy(candidate)
            if np.isfinite(trial["total"]) and trial["total"] <= current["total"]:
                return candidate, trial
            scale *= 0.5
        lam *= 10.0
    return None, None


def solve(problem: AlignmentProblem, init: np.ndarray, opts: SolverOptions | None = None) -> tuple[np.ndarray, SolverReport]:
    """Minimize the weighted energy over node transforms.

    Each outer iteration relinearizes, solves the normal equations, and
    backtracks (halving) until the total energy does not increase, raising
    the damping if halving alone fails. A step that cannot be made
    non-increasing ends the solve, so the recorded energy sequence is
    monotone.
    """
    opts = opts or SolverOptions()
    report = SolverReport()
    transforms = dqm.dq_normalize(np.asarray(init, dtype=float))
    current = problem.energy(transforms)
    report.energies.append(current)
    if len(problem.corr) == 0:
        report.termination = "no data terms"
        return transforms, report
    linear = gauss_seidel if opts.linear_solver == "gauss-seidel" else dense_solve
    try:
        for _ in range(opts.max_outer):
            if current["total"] == 0.0:
                report.termination = "zero energy"
                break
            jac, res = problem.linearize(transforms)
            hessian = (jac.T @ jac).toarray()
            grad = jac.T @ res
            centers = problem.centers(transforms)
            candidate, trial = _damped_step(problem, linear, hessian, grad, transforms, centers, current, opts)
            if candidate is None:
                report.termination = "no descent"
                break
            decrease = current["total"] - trial["total"]
            transforms, current = candidate, trial
            report.iterations += 1
            report.energies.append(current)
            if decrease <= opts.rel_tol * max(report.energies[-2]["total"], 1e-300):
                report.termination = "converged"
                break
        else:
            report.termination = "max iterations"
    except (SolverError, np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("solver failed: %s; keeping initial transforms", exc)
        report.error = str(exc)
        report.termination = "error"
        return dqm.dq_normalize(np.asarray(init, dtype=float)), report
    return transforms, report


def solve_frame(measurement: MeasurementFrame, flow: FlowMap, render_a: RenderMaps, geometry,
                graph: DeformationGraph, binding: SurfelBinding, weights: EnergyWeights,
                opts: SolverOptions | None = None, gates: GateOptions | None = None,
                init: np.ndarray | None = None) -> tuple[np.ndarray, SolverReport, Correspondences]:
    """Registration plus solve for one frame."""
    corr = build_correspondences(measurement, flow, render_a, geometry, binding, gates)
    problem = AlignmentProblem(corr, graph, weights)
    start = graph.transforms if init is None else init
    transforms, report = solve(problem, start, opts)
    return transforms, report, corr
