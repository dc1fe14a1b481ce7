"""Semantic-aware non-rigid surfel reconstruction from RGB-D, labels and optical flow."""

from .align import EnergyWeights, GateOptions, SolverOptions, SolverReport, solve, solve_frame
from .errors import (
    ConfigError,
    DegenerateBindingError,
    FormatError,
    GenerationError,
    IngestionError,
    SadFusionError,
    SolverError,
)
from .fusion import FusionOptions, SurfelGeometry, update_graph
from .measurement import CameraIntrinsics, FlowMap, MeasurementFrame
from .pipeline import FrameMetrics, Pipeline, PipelineConfig, run
from .warpfield import DeformationGraph, bind_surfels, compute_edge_weights

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfigError",
    "DeformationGraph",
    "DegenerateBindingError",
    "EnergyWeights",
    "FlowMap",
    "FormatError",
    "FrameMetrics",
    "FusionOptions",
    "GateOptions",
    "GenerationError",
    "IngestionError",
    "MeasurementFrame",
    "Pipeline",
    "PipelineConfig",
    "SadFusionError",
    "SolverError",
    "SolverOptions",
    "SolverReport",
    "SurfelGeometry",
    "bind_surfels",
    "compute_edge_weights",
    "run",
    "solve",
    "solve_frame",
    "update_graph",
]
