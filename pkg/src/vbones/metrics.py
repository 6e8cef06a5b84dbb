"""Sequence error metrics, reported in millimetres.

Geometry is stored in metres; every distance metric here multiplies by 1000.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .formats import write_obj

logger = logging.getLogger(__name__)

MM = 1000.0


class MetricError(ValueError):
    pass


def _frames(x) -> np.ndarray:
    return np.asarray(getattr(x, "frames", x), dtype=np.float64)


def _same_shape(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _frames(pred), _frames(truth)
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def rmse(pred, truth) -> float:
    """Root mean squared per-vertex Euclidean error over all frames, in mm."""
    p, t = _same_shape(pred, truth)
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=-1))) * MM)


def hausdorff_frame(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric vertex-set Hausdorff distance between two point sets, in mm."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("Hausdorff distance of an empty point set")
    dab = cKDTree(b).query(a)[0].max()
    dba = cKDTree(a).query(b)[0].max()
    return float(max(dab, dba) * MM)


def hausdorff_brute(a: np.ndarray, b: np.ndarray) -> float:
    """O(|a||b|) reference evaluation of :func:`hausdorff_frame`."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("Hausdorff distance of an empty point set")
    d = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()) * MM)


def hausdorff(pred, truth) -> float:
    """Mean over frames of the per-frame Hausdorff distance, in mm."""
    p, t = _same_shape(pred, truth)
    return float(np.mean([hausdorff_frame(a, b) for a, b in zip(p, t)]))


def sted(pred, truth, edges: np.ndarray, temporal_weight: float = 1.0,
         parts: bool = False):
    """Spatio-temporal edge difference (dimensionless).

    Spatial part: RMS over frames and edges of ``|l_pred - l_true| / l_true``.
    Temporal part: RMS over frame pairs and vertices of the difference of
    frame-to-frame displacement norms, in metres per frame (left unscaled so
    it stays comparable to the relative spatial part). Ground-truth edges of
    zero length are skipped.

    Returns the sum ``spatial + temporal_weight * temporal``, or the triple
    ``(total, spatial, temporal)`` when ``parts`` is set.
    """
    p, t = _same_shape(pred, truth)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lp = np.linalg.norm(p[:, edges[:, 0]] - p[:, edges[:, 1]], axis=-1)
    lt = np.linalg.norm(t[:, edges[:, 0]] - t[:, edges[:, 1]], axis=-1)
    ok = lt > 0
    skipped = int(np.size(ok) - np.count_nonzero(ok))
    if skipped:
        logger.warning("sted: skipped %d zero-length ground-truth edge samples", skipped)
    rel = np.abs(lp[ok] - lt[ok]) / lt[ok]
    spatial = float(np.sqrt(np.mean(rel**2))) if rel.size else 0.0
    if len(p) > 1:
        dp = np.linalg.norm(np.diff(p, axis=0), axis=-1)
        dt = np.linalg.norm(np.diff(t, axis=0), axis=-1)
        temporal = float(np.sqrt(np.mean((dp - dt) ** 2)))
    else:
        temporal = 0.0
    total = spatial + temporal_weight * temporal
    return (total, spatial, temporal) if parts else total


def per_vertex_error_map(pred, truth) -> np.ndarray:
    """Per-vertex mean Euclidean error over frames, in mm."""
    p, t = _same_shape(pred, truth)
    return np.mean(np.linalg.norm(p - t, axis=-1), axis=0) * MM


def looseness_map(frames, body_positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex mean and std of the distance to the nearest body sample, in mm.

    ``body_positions`` is (T, K, 3), one sample set per frame.
    """
    f = _frames(frames)
    body_positions = np.asarray(body_positions, dtype=np.float64)
    if len(body_positions) != len(f):
        raise MetricError("one body sample set per frame is required")
    d = np.stack([cKDTree(b).query(x)[0] for x, b in zip(f, body_positions)]) * MM
    return d.mean(axis=0), d.std(axis=0)


@dataclass
class EvalReport:
    rmse: float
    hausdorff: float
    sted: float
    per_vertex_mean_error: np.ndarray = field(repr=False)
    label: str = ""

    def __post_init__(self):
        if min(self.rmse, self.hausdorff, self.sted) < 0:
            raise MetricError("metrics must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_vertex_mean_error"] = np.asarray(self.per_vertex_mean_error).tolist()
        d["units"] = {"rmse": "mm", "hausdorff": "mm", "sted": "dimensionless",
                      "per_vertex_mean_error": "mm"}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def evaluate(pred, truth, edges: np.ndarray, label: str = "", temporal_weight: float = 1.0) -> EvalReport:
    return EvalReport(rmse(pred, truth), hausdorff(pred, truth),
                      sted(pred, truth, edges, temporal_weight),
                      per_vertex_error_map(pred, truth), label)


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per report."""
    header = ("model", "RMSE (mm)", "Hausdorff (mm)", "STED")
    rows = [(r.label or f"#{k}", f"{r.rmse:.3f}", f"{r.hausdorff:.3f}", f"{r.sted:.4f}")
            for k, r in enumerate(reports)]
    widths = [max(len(row[c]) for row in [header, *rows]) for c in range(4)]

    def line(row):
        return "  ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                         for c, (cell, w) in enumerate(zip(row, widths)))

    return "\n".join([line(header), "  ".join("-" * w for w in widths), *map(line, rows)])


def error_colors(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Blue (low) to red (high) vertex colours."""
    v = np.asarray(values, dtype=np.float64)
    top = float(vmax if vmax is not None else (v.max() if v.size and v.max() > 0 else 1.0))
    s = np.clip(v / top, 0.0, 1.0)[:, None]
    return (1 - s) * np.array([0.1, 0.2, 0.9]) + s * np.array([0.9, 0.1, 0.1])


def export_map_obj(path, positions: np.ndarray, faces: np.ndarray, values: np.ndarray,
                   vmax: float | None = None) -> None:
    write_obj(path, positions, faces, error_colors(values, vmax))


def export_map_csv(path, values: np.ndarray, name: str = "error_mm") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", name])
        for i, v in enumerate(values):
            w.writerow([i, f"{v:.6f}"])
