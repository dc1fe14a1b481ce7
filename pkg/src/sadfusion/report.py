"""Metrics loading, run comparison and figures."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import FormatError  # noqa: E402
from .render import EMPTY, RenderMaps  # noqa: E402

# scalar metrics pulled out of each frame record, by dotted path
TRACKED = {
    "mean_error_mm": "error.mean_mm",
    "median_error_mm": "error.median_mm",
    "gt_motion_mm": "error.gt_motion_mm",
    "energy_final": "energies.final.total",
    "correspondences": "correspondences",
    "fused": "fused",
    "appended": "appended",
    "removed": "removed",
    "surfels": "surfels",
    "nodes": "nodes",
}


def load_metrics(path: Path) -> list[dict]:
    """Read a metrics JSON-lines file.

    Raises:
        FormatError: on a malformed line; the message names file and line.
    """
    path = Path(path)
    records = []
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise FormatError(f"metrics file {path} not found") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "frame" not in rec:
            raise FormatError(f"{path}:{lineno}: not a frame record")
        records.append(rec)
    return records


def _get(rec: dict, dotted: str):
    cur = rec
    for key in dotted.split("."):
        if not isinstance(cur, dict) or key not in cur:
            return None
        cur = cur[key]
    return cur


def series(records: list[dict], name: str) -> np.ndarray:
    """One tracked metric over frames, NaN where absent."""
    vals = [_get(r, TRACKED.get(name, name)) for r in records]
    return np.array([np.nan if v is None else float(v) for v in vals])


def compare_runs(a: list[dict], b: list[dict]) -> dict:
    """Per-frame deltas ``b - a`` and a final-frame summary.

    Raises:
        ValueError: when the runs have different frame counts.
    """
    if len(a) != len(b):
        raise ValueError(f"frame count mismatch: {len(a)} vs {len(b)}")
    frames = []
    for ra, rb in zip(a, b):
        row = {"frame": ra["frame"]}
        for name in TRACKED:
            va, vb = _get(ra, TRACKED[name]), _get(rb, TRACKED[name])
            row[name] = None if va is None or vb is None else float(vb) - float(va)
        frames.append(row)
    summary = {}
    for name in TRACKED:
        va = _get(a[-1], TRACKED[name]) if a else None
        vb = _get(b[-1], TRACKED[name]) if b else None
        entry = {"a": va, "b": vb, "delta": None, "ratio": None}
        if va is not None and vb is not None:
            entry["delta"] = float(vb) - float(va)
            if va != 0:
                entry["ratio"] = float(vb) / float(va)
        summary[name] = entry
    return {"frames": frames, "summary": summary}


def summary_table(comparison: dict, label_a: str = "a", label_b: str = "b") -> str:
    rows = [f"{'metric':<18}{label_a:>14}{label_b:>14}{'delta':>14}{'b/a':>12}"]

    def fmt(v, width):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return f"{'-':>{width}}"
        return f"{v:>{width}.5g}" if isinstance(v, float) else f"{v:>{width}}"

    for name, e in comparison["summary"].items():
        rows.append(f"{name:<18}{fmt(e['a'], 14)}{fmt(e['b'], 14)}{fmt(e['delta'], 14)}{fmt(e['ratio'], 12)}")
    return "\n".join(rows)


def plot_runs(runs: dict[str, list[dict]], path: Path) -> Path:
    """Error, energy and size curves for one or more runs, saved as PNG."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for name, recs in runs.items():
        frames = [r["frame"] for r in recs]
        axes[0].plot(frames, series(recs, "mean_error_mm"), marker="o", label=name)
        axes[1].semilogy(frames, np.maximum(series(recs, "energy_final"), 1e-30), marker=".", label=name)
        axes[2].plot(frames, series(recs, "nodes"), label=f"{name} nodes")
    axes[0].set(xlabel="frame", ylabel="mean error (mm)", title="reconstruction error")
    axes[1].set(xlabel="frame", ylabel="final energy", title="alignment energy")
    axes[2].set(xlabel="frame", ylabel="count", title="graph nodes")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_comparison(comparison: dict, path: Path, label_a: str = "a", label_b: str = "b") -> Path:
    frames = [r["frame"] for r in comparison["frames"]]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name in ("mean_error_mm", "median_error_mm"):
        vals = [np.nan if r[name] is None else r[name] for r in comparison["frames"]]
        ax.plot(frames, vals, marker="o", label=name)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set(xlabel="frame", ylabel=f"{label_b} - {label_a} (mm)", title="per-frame error delta")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_comparison(path_a: Path, path_b: Path, out_dir: Path) -> dict:
    """Compare two metrics files; writes ``comparison.json`` and ``comparison.png``."""
    a, b = load_metrics(path_a), load_metrics(path_b)
    comp = compare_runs(a, b)
    comp["a"], comp["b"] = str(path_a), str(path_b)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.json").write_text(json.dumps(comp, indent=2))
    plot_comparison(comp, out_dir / "comparison.png", Path(path_a).parent.name, Path(path_b).parent.name)
    plot_runs({Path(path_a).parent.name or "a": a, Path(path_b).parent.name or "b": b}, out_dir / "runs.png")
    return comp


def save_render_maps(prefix: Path, maps: RenderMaps) -> None:
    """Color, normal, depth and index images of one render, as PNGs."""
    prefix = Path(prefix)
    occ = maps.index != EMPTY
    Image.fromarray(maps.color).save(f"{prefix}_color.png")
    normal = np.where(occ[..., None], (maps.normal * 0.5 + 0.5) * 255, 0).astype(np.uint8)
    Image.fromarray(normal).save(f"{prefix}_normal.png")
    z = maps.vertex[..., 2]
    depth = np.zeros(z.shape, np.uint16)
    depth[occ] = np.clip(np.rint(z[occ] * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(f"{prefix}_depth.png")
    # hash surfel ids into colors so neighbouring ids are distinguishable
    idx = maps.index.astype(np.uint64)
    rgb = np.stack([(idx * k) % 251 for k in (37, 91, 157)], axis=-1).astype(np.uint8)
    rgb[~occ] = 0
    Image.fromarray(rgb).save(f"{prefix}_index.png")
