"""Turn a finished run directory into plain CSV tables and SVG heat maps."""

from __future__ import annotations

import csv
import math
import shutil
from pathlib import Path

import numpy as np

from .analysis import GridSpec, GridStudy
from .checkpoint import load_arrays, save_arrays

__all__ = ["GRID_FILE", "save_grid_study", "load_grid_study", "write_grid_csv", "heatmap_svg", "export_artifacts"]

GRID_FILE = "grid_study.ckpt"
KAPPA_COLUMNS = ("round", "epoch", "env_steps", "base_uncertainty", "kappa")

# viridis sampled at nine evenly spaced points
_PALETTE = np.array([
    (68, 1, 84), (71, 44, 122), (59, 81, 139), (44, 113, 142), (33, 144, 141),
    (39, 173, 129), (92, 200, 99), (170, 220, 50), (253, 231, 37),
], dtype=np.float64)


def save_grid_study(path, study: GridStudy) -> Path:
    meta = {"kind": "grid_study", "phi_range": list(study.spec.phi_range),
            "phidot_range": list(study.spec.phidot_range), "resolution": list(study.spec.shape),
            "kappa": study.kappa if math.isfinite(study.kappa) else "inf"}
    return save_arrays(path, {"u_gjs": study.u_gjs, "d": study.d, "in_E": study.in_E.astype(np.uint8)}, meta)


def load_grid_study(path) -> GridStudy:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "grid_study":
        raise ValueError(f"{path} does not hold a grid study")
    spec = GridSpec(tuple(meta["phi_range"]), tuple(meta["phidot_range"]), tuple(meta["resolution"]))
    return GridStudy(spec, arrays["u_gjs"], arrays["d"], arrays["in_E"].astype(bool), float(meta["kappa"]))


def write_grid_csv(path, study: GridStudy) -> Path:
    for name in ("u_gjs", "d"):
        if not np.all(np.isfinite(getattr(study, name))):
            raise ValueError(f"grid study holds non-finite {name} values")
    states = study.spec.states()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["phi", "phidot", "u_gjs", "d_ij", "in_E"])
        for (phi, phidot), u, d, e in zip(states, study.u_gjs.ravel(), study.d.ravel(), study.in_E.ravel()):
            out.writerow([repr(float(phi)), repr(float(phidot)), repr(float(u)), repr(float(d)), int(e)])
    return Path(path)


def _colour(t: float) -> str:
    x = min(max(t, 0.0), 1.0) * (len(_PALETTE) - 1)
    lo = min(int(x), len(_PALETTE) - 2)
    rgb = _PALETTE[lo] + (x - lo) * (_PALETTE[lo + 1] - _PALETTE[lo])
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def _log_unit(values: np.ndarray) -> np.ndarray:
    """Map values onto [0, 1] on a log scale; zeros sit at the smallest positive value."""
    positive = values[values > 0]
    if positive.size == 0:
        return np.zeros_like(values)
    floor = positive.min()
    logs = np.log10(np.maximum(values, floor))
    lo, hi = logs.min(), logs.max()
    return np.zeros_like(values) if hi == lo else (logs - lo) / (hi - lo)


def heatmap_svg(values, title: str, log_scale: bool = True, cell: int = 4) -> str:
    """A self-contained SVG with one rectangle per cell; rows are drawn top to bottom."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("heat map needs a 2-D array")
    if not np.all(np.isfinite(values)):
        raise ValueError("heat map values must be finite")
    if np.any(values < 0) and log_scale:
        raise ValueError("log-scaled heat map needs non-negative values")
    if log_scale:
        unit = _log_unit(values)
    else:
        span = values.max() - values.min()
        unit = np.zeros_like(values) if span == 0 else (values - values.min()) / span
    rows, cols = values.shape
    top = 24
    width, height = cols * cell, rows * cell + top
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" shape-rendering="crispEdges">',
        f'<text x="4" y="16" font-family="sans-serif" font-size="12">{title} '
        f'[{values.min():.3g}, {values.max():.3g}{", log" if log_scale else ""}]</text>',
    ]
    for i in range(rows):
        for j in range(cols):
            parts.append(f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_colour(unit[i, j])}"/>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def _write_kappa_trace(src: Path, dst: Path):
    with open(src, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(dst, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(KAPPA_COLUMNS)
        for row in rows:
            out.writerow([row[c] for c in KAPPA_COLUMNS])


def export_artifacts(run_dir, out_dir=None) -> list[Path]:
    """Write the export set into ``run_dir/export`` (or ``out_dir``); returns the files written.

    The grid table and heat maps are produced when a grid study was saved in
    the run (or its checkpoint) directory.
    """
    run_dir = Path(run_dir)
    curve = run_dir / "learning_curve.csv"
    grid_path = next((p for p in (run_dir / GRID_FILE, run_dir / "checkpoint" / GRID_FILE) if p.is_file()), None)
    if not run_dir.is_dir() or (not curve.is_file() and grid_path is None):
        raise FileNotFoundError(f"no completed run in {run_dir}")
    out = Path(out_dir) if out_dir is not None else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if curve.is_file():
        shutil.copyfile(curve, out / "learning_curve.csv")
        written.append(out / "learning_curve.csv")
    if (run_dir / "rounds.csv").is_file():
        _write_kappa_trace(run_dir / "rounds.csv", out / "kappa_trace.csv")
        written.append(out / "kappa_trace.csv")
    if grid_path is not None:
        study = load_grid_study(grid_path)
        written.append(write_grid_csv(out / "grid_study.csv", study))
        for name, values, log_scale in (("u_gjs", study.u_gjs, True), ("d_ij", study.d, True),
                                        ("in_E", study.in_E.astype(np.float64), False)):
            path = out / f"heatmap_{name}.svg"
            path.write_text(heatmap_svg(values, name, log_scale))
            written.append(path)
    return written
