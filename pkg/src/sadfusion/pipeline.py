"""Per-frame tracking-and-reconstruction loop, its configuration and metrics."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import tomli

from . import align, fusion
from .errors import ConfigError, IngestionError, SadFusionError
from .measurement import (
    CameraIntrinsics,
    FlowMap,
    IngestConfig,
    MeasurementFrame,
    frame_indices,
    frame_path,
    load_intrinsics,
    make_frame,
    read_flow,
    read_raw_frame,
)
from .render import RenderMaps, render
from .synthetic import (
    GroundTruth,
    NoiseConfig,
    SyntheticScene,
    default_intrinsics,
    generate_synthetic,
    load_ground_truth,
    make_scene,
)
from .warpfield import DeformationGraph, bind_surfels, node_translations, warp_nodes

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    # energy weights
    w_picp: float = 1.0
    w_2d: float = 1.0
    w_areg: float = 4.0
    # solver
    max_outer: int = 8
    sweeps: int = 4
    rel_tol: float = 1e-5
    damping: float = 1e-6
    max_backtracks: int = 4
    warm_start: bool = True
    # registration gates
    corr_max_distance: float = 0.05
    corr_max_angle_deg: float = 30.0
    # graph
    graph_mode: str = "sad"
    sigma: float = 0.05
    node_radius_factor: float = 1.5
    node_neighbors: int = 8
    surfel_neighbors: int = 4
    label_neighbors: int = 8
    rigidness: dict[int, float] = field(default_factory=dict)
    semantic_binding: bool = True  # sad mode only: damp cross-class blend weights
    n_classes: int | None = None
    # fusion
    measurement_confidence: float = 1.0
    unrecognized_confidence: float = 0.0
    semantic_fusion: bool = True
    violation_margin: float = 0.02
    stale_frames: int = 10
    # measurement
    denoise_sigma: float = 1.0
    max_depth_jump: float = 0.05
    flow_source: str = "gt"
    # synthetic noise (presets only)
    depth_noise: float = 0.0
    label_flip_fraction: float = 0.0
    erase_class: int | None = None
    # run
    frames: int | None = None
    threads: int = 1
    seed: int = 0
    dump_ply: bool = False
    dump_graph: bool = False
    dump_render: bool = False

    def __post_init__(self):
        if self.graph_mode not in ("sad", "ed-uniform"):
            raise ConfigError(f"graph_mode must be 'sad' or 'ed-uniform', not {self.graph_mode!r}")
        if self.flow_source not in ("gt", "files"):
            raise ConfigError(f"flow_source must be 'gt' or 'files', not {self.flow_source!r}")
        try:
            align.EnergyWeights(self.w_picp, self.w_2d, self.w_areg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.rigidness = {int(k): float(v) for k, v in self.rigidness.items()}

    @classmethod
    def from_toml(cls, path: Path) -> "PipelineConfig":
        """Parse a flat TOML file; unknown keys are rejected."""
        try:
            data = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @property
    def weights(self) -> align.EnergyWeights:
        return align.EnergyWeights(self.w_picp, self.w_2d, self.w_areg)

    @property
    def solver(self) -> align.SolverOptions:
        return align.SolverOptions(self.max_outer, self.sweeps, self.rel_tol, self.damping, self.max_backtracks)

    @property
    def gates(self) -> align.GateOptions:
        return align.GateOptions(self.corr_max_distance, self.corr_max_angle_deg)

    @property
    def fusion(self) -> fusion.FusionOptions:
        return fusion.FusionOptions(
            measurement_confidence=self.measurement_confidence,
            unrecognized_confidence=self.unrecognized_confidence,
            semantic_fusion=self.semantic_fusion,
            violation_margin=self.violation_margin,
            stale_frames=self.stale_frames,
        )


@dataclass
class FrameMetrics:
    frame: int
    energies: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    correspondences: int = 0
    fused: int = 0
    appended: int = 0
    removed: int = 0
    surfels: int = 0
    nodes: int = 0
    nodes_added: int = 0
    error: dict | None = None
    semantics: dict | None = None
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["error"] is None:
            del out["error"]
        if out["semantics"] is None:
            del out["semantics"]
        return out


@dataclass
class FrameInput:
    frame: MeasurementFrame
    flow: FlowMap | None = None
    part_map: np.ndarray | None = None


@dataclass
class Source:
    intrinsics: CameraIntrinsics
    frames: Iterable[FrameInput]
    n_classes: int
    rigidness: dict[int, float]
    ground_truth: GroundTruth | None = None
    class_names: dict[int, str] = field(default_factory=dict)


# --------------------------------------------------------------------- sources


def preset_source(name: str, config: PipelineConfig, intrinsics: CameraIntrinsics | None = None) -> Source:
    try:
        scene = make_scene(name, config.frames)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return scene_source(scene, config, intrinsics)


def scene_source(scene: SyntheticScene, config: PipelineConfig, intrinsics: CameraIntrinsics | None = None) -> Source:
    """Frames of a synthetic scene generated on the fly, with ground truth."""
    if config.flow_source == "files":
        raise ConfigError("--flow files needs a sequence directory, not a preset")
    noise = NoiseConfig(config.depth_noise, config.label_flip_fraction, config.erase_class, config.seed)
    intr = intrinsics or default_intrinsics()
    gt, stream = generate_synthetic(scene, intr, noise, config.denoise_sigma)
    frames = (FrameInput(sf.frame, sf.flow if sf.frame.index > 0 else None, sf.part_map) for sf in stream)
    rigidness = config.rigidness or scene.rigidness
    return Source(intr, frames, scene.unrecognized, rigidness, gt, dict(scene.class_names))


def directory_source(seq_dir: Path, config: PipelineConfig) -> Source:
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise IngestionError(f"input directory {seq_dir} does not exist")
    intr, depth_scale = load_intrinsics(seq_dir)
    gt = load_ground_truth(seq_dir)
    meta = {}
    gt_path = seq_dir / "ground_truth.json"
    if gt_path.exists():
        meta = json.loads(gt_path.read_text()).get("scene", {})
    rigidness = config.rigidness or {int(k): float(v) for k, v in meta.get("rigidness", {}).items()}
    classes = {int(k): v for k, v in meta.get("classes", {}).items()}
    n_classes = config.n_classes or (max(classes) if classes else (max(rigidness) if rigidness else None))
    if n_classes is None:
        raise ConfigError("number of classes unknown: set n_classes or rigidness in the config")
    indices = frame_indices(seq_dir)
    if config.frames is not None:
        indices = indices[: config.frames]
    if not indices:
        raise IngestionError(f"no frames found in {seq_dir}")
    ingest = IngestConfig(config.denoise_sigma, config.max_depth_jump)

    def frames() -> Iterator[FrameInput]:
        for idx in indices:
            depth, color, label, part = read_raw_frame(seq_dir, idx, intr, depth_scale)
            frame = make_frame(idx, depth, color, label, intr, ingest.denoise_sigma, ingest.max_depth_jump)
            flow = None
            fpath = frame_path(seq_dir, idx, "flow")
            if fpath.exists():
                flow = read_flow(fpath, idx)
                if flow.valid.shape != frame.shape:
                    raise IngestionError(f"frame {idx}: flow size does not match", idx)
            yield FrameInput(frame, flow, part if gt is not None else None)

    return Source(intr, frames(), n_classes, rigidness, gt, classes)


def prefetch(items: Iterable, enabled: bool) -> Iterator:
    """Overlap producing item ``t + 1`` with consuming item ``t``."""
    if not enabled:
        yield from items
        return
    it = iter(items)
    sentinel = object()
    with concurrent.futures.ThreadPoolExecutor(max_workers=1) as pool:
        fut = pool.submit(next, it, sentinel)
        while True:
            item = fut.result()
            if item is sentinel:
                return
            fut = pool.submit(next, it, sentinel)
            yield item


# -------------------------------------------------------------------- pipeline


class Pipeline:
    """Holds geometry, graph and bindings across frames."""

    def __init__(self, config: PipelineConfig, intrinsics: CameraIntrinsics, n_classes: int,
                 rigidness: dict[int, float], ground_truth: GroundTruth | None = None,
                 class_names: dict[int, str] | None = None):
        self.config = config
        self.intrinsics = intrinsics
        self.n_classes = n_classes
        self.rigidness = dict(rigidness)
        if config.graph_mode == "sad":
            missing = [c for c in range(1, n_classes + 1) if c not in self.rigidness]
            if missing:
                raise ConfigError(f"rigidness table has no entry for class(es) {missing}")
        self.gt = ground_truth
        self.class_names = class_names or {}
        self.geometry = fusion.SurfelGeometry.empty(n_classes)
        self.graph = DeformationGraph()
        self.binding = None
        self.frame_index = -1
        self.last_report: align.SolverReport | None = None
        self.last_render_a: RenderMaps | None = None
        self.last_render_g: RenderMaps | None = None
        self.last_correspondences: align.Correspondences | None = None

    @property
    def unrecognized(self) -> int:
        return self.n_classes

    def _update_graph_and_bind(self) -> int:
        c = self.config
        self.graph, added = fusion.update_graph(
            self.geometry, self.graph, c.sigma, self.rigidness, c.graph_mode,
            c.label_neighbors, c.node_radius_factor, c.node_neighbors)
        if len(self.geometry) == 0:
            self.binding = None
            return added
        labels = self.geometry.labels() if c.graph_mode == "sad" and c.semantic_binding else None
        self.binding = bind_surfels(self.geometry.vertex, self.graph, c.surfel_neighbors, labels)
        return added

    def process(self, item: FrameInput) -> FrameMetrics:
        frame = item.frame
        c = self.config
        metrics = FrameMetrics(frame=frame.index)
        timing = metrics.timing
        self.frame_index = frame.index
        if len(self.geometry) == 0 or self.binding is None:
            tic = time.perf_counter()
            self.geometry = fusion.bootstrap_geometry(frame, self.n_classes, c.fusion, item.part_map, self.gt)
            metrics.appended = len(self.geometry)
            timing["fusion"] = time.perf_counter() - tic
            tic = time.perf_counter()
            metrics.nodes_added = self._update_graph_and_bind() if len(self.geometry) else 0
            timing["graph"] = time.perf_counter() - tic
            self.last_report = None
        else:
            tic = time.perf_counter()
            render_a = render(self.geometry, self.intrinsics, 1)
            timing["render_a"] = time.perf_counter() - tic

            tic = time.perf_counter()
            flow = item.flow if item.flow is not None else FlowMap.zeros(*frame.shape)
            init = self.graph.transforms if c.warm_start else None
            if init is None:
                self.graph.reset_transforms()
            transforms, report, corr = align.solve_frame(
                frame, flow, render_a, self.geometry, self.graph, self.binding, c.weights, c.solver, c.gates)
            self.graph.transforms = transforms
            timing["solve"] = time.perf_counter() - tic
            metrics.correspondences = len(corr)
            metrics.solver = {"iterations": report.iterations, "termination": report.termination,
                              "error": report.error, "energy_trajectory": [e["total"] for e in report.energies]}
            metrics.energies = {"initial": report.energies[0], "final": report.energies[-1]}

            tic = time.perf_counter()
            warped, _ = fusion.warp_geometry(self.geometry, self.binding, transforms)
            self.graph.positions = warp_nodes(self.graph)
            render_g = render(warped, self.intrinsics, 4)
            timing["warp_render_g"] = time.perf_counter() - tic

            tic = time.perf_counter()
            reg = fusion.fusion_registration(frame, render_g, warped, c.gates)
            result = fusion.fuse_and_append(warped, frame, reg, c.fusion, self.unrecognized, item.part_map, self.gt)
            removed = fusion.remove_violating(result.geometry, frame, result.fused, c.fusion)
            keep = np.ones(len(result.geometry), dtype=bool)
            keep[removed] = False
            self.geometry, _ = result.geometry.select(keep)
            metrics.fused, metrics.appended, metrics.removed = len(result.fused), result.appended, len(removed)
            timing["fusion"] = time.perf_counter() - tic

            tic = time.perf_counter()
            metrics.nodes_added = self._update_graph_and_bind()
            timing["graph"] = time.perf_counter() - tic
            self.last_report, self.last_render_a, self.last_render_g = report, render_a, render_g
            self.last_correspondences = corr
        metrics.surfels = len(self.geometry)
        metrics.nodes = len(self.graph)
        if self.gt is not None:
            metrics.error = self.ground_truth_error()
            metrics.semantics = self.semantic_stats()
        return metrics

    # ground-truth evaluation -------------------------------------------

    def surfel_errors(self) -> tuple[np.ndarray, np.ndarray]:
        """Distance (m) of each anchored surfel to its true position, and the mask."""
        g = self.geometry
        known = g.gt_part >= 0
        err = np.full(len(g), np.nan)
        if known.any():
            truth = self.gt.position(self.frame_index, g.gt_part[known], g.gt_anchor[known])
            err[known] = np.linalg.norm(g.vertex[known] - truth, axis=1)
        return err, known

    def ground_truth_error(self) -> dict:
        g = self.geometry
        err, known = self.surfel_errors()
        out = {"mean_mm": None, "median_mm": None, "gt_motion_mm": None, "per_object_mean_mm": {}}
        if not known.any():
            return out
        e = err[known] * 1000.0
        out["mean_mm"] = float(e.mean())
        out["median_mm"] = float(np.median(e))
        p0 = self.gt.position(0, g.gt_part[known], g.gt_anchor[known])
        pt = self.gt.position(self.frame_index, g.gt_part[known], g.gt_anchor[known])
        out["gt_motion_mm"] = float(np.linalg.norm(pt - p0, axis=1).mean() * 1000.0)
        objects = np.asarray(self.gt.part_object)[g.gt_part[known]]
        for oid, name in enumerate(self.gt.object_names):
            sel = objects == oid
            if sel.any():
                out["per_object_mean_mm"][name] = float(e[sel].mean())
        return out

    def semantic_stats(self) -> dict:
        """Per object: share of surfels whose argmax label is the object's class.

        ``retained`` restricts to surfels created at frame 0.
        """
        g = self.geometry
        known = g.gt_part >= 0
        labels = g.labels()
        out = {}
        objects = np.full(len(g), -1)
        objects[known] = np.asarray(self.gt.part_object)[g.gt_part[known]]
        for oid, name in enumerate(self.gt.object_names):
            sel = objects == oid
            if not sel.any():
                continue
            correct = labels[sel] == self.gt.object_class[oid]
            first = sel & (g.created == 0)
            kept = labels[first] == self.gt.object_class[oid]
            out[name] = {"accuracy": float(correct.mean()),
                         "retained": float(kept.mean()) if first.any() else None,
                         "initial_surfels": int(first.sum())}
        return out

    def node_translations(self) -> np.ndarray:
        return node_translations(self.graph)


# -------------------------------------------------------------------------- run


def resolve_source(input_spec: str, config: PipelineConfig) -> Source:
    if input_spec.startswith("preset:"):
        return preset_source(input_spec.split(":", 1)[1], config)
    return directory_source(Path(input_spec), config)


def run(config: PipelineConfig, input_spec: str | Source, output_dir: Path | None = None,
        on_frame=None) -> list[FrameMetrics]:
    """Process a whole sequence; writes ``metrics.jsonl`` and dumps when asked.

    ``on_frame(pipeline, metrics)`` is called after every frame.
    """
    source = resolve_source(input_spec, config) if isinstance(input_spec, str) else input_spec
    pipe = Pipeline(config, source.intrinsics, source.n_classes, source.rigidness, source.ground_truth,
                    source.class_names)
    out_dir = Path(output_dir) if output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    all_metrics = []
    metrics_fh = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None
    try:
        for item in prefetch(source.frames, config.threads > 1):
            if config.frames is not None and len(all_metrics) >= config.frames:
                break
            tic = time.perf_counter()
            try:
                m = pipe.process(item)
            except SadFusionError as exc:
                raise type(exc)(f"frame {item.frame.index}: {exc}") from exc
            except Exception as exc:
                raise RuntimeError(f"frame {item.frame.index}: {exc}") from exc
            m.timing["total"] = time.perf_counter() - tic
            all_metrics.append(m)
            logger.info("frame %d: %d surfels, %d nodes, %d corr", m.frame, m.surfels, m.nodes, m.correspondences)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(m.to_dict()) + "\n")
                metrics_fh.flush()
                _dump_frame(pipe, config, out_dir)
            if on_frame is not None:
                on_frame(pipe, m)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return all_metrics


def _dump_frame(pipe: Pipeline, config: PipelineConfig, out_dir: Path) -> None:
    t = pipe.frame_index
    if config.dump_ply:
        fusion.write_ply(out_dir / f"geometry_{t:06d}.ply", pipe.geometry)
    if config.dump_graph:
        (out_dir / f"graph_{t:06d}.json").write_text(json.dumps(pipe.graph.to_json()))
    if config.dump_render and pipe.last_render_a is not None:
        from .report import save_render_maps

        save_render_maps(out_dir / f"render_a_{t:06d}", pipe.last_render_a)
        save_render_maps(out_dir / f"render_g_{t:06d}", pipe.last_render_g)
