"""Trajectory, rendering, and reconstruction metrics.

Trajectory error is ATE RMSE after a closed-form rigid alignment (rotation
via the quaternion eigenvalue method, no scale). Rendering quality is depth
L1 in centimeters and PSNR in dB (SSIM optional). Reconstruction quality is
the point-set F-score at a distance threshold, computed without any
ICP-style pre-alignment since predictions and ground truth share one frame.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np


class EvaluationError(ValueError):
    pass


# trajectory ------------------------------------------------------------------


def align_horn(est: np.ndarray, gt: np.ndarray):
    """Closed-form rigid fit: returns (R, t) minimizing ||gt - (R est + t)||.

    Rotation comes from the maximal eigenvector of the 4x4 quaternion
    profile matrix; requires at least 3 correspondences.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise EvaluationError(f"trajectory shapes differ: {est.shape} vs {gt.shape}")
    if len(est) < 3:
        raise EvaluationError(f"need >= 3 poses to align, got {len(est)}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    e = est - mu_e
    g = gt - mu_g
    m = e.T @ g  # correlation of est (rows) against gt (cols)
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    evals, evecs = np.linalg.eigh(n)
    q = evecs[:, np.argmax(evals)]  # (w, x, y, z)
    from .geometry import quat_to_matrix
    rot = quat_to_matrix(q)
    t = mu_g - rot @ mu_e
    return rot, t


def ate_rmse(est: np.ndarray, gt: np.ndarray, align: bool = True) -> float:
    """RMSE (meters) of translation error, after rigid alignment by default."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise EvaluationError(f"trajectory shapes differ: {est.shape} vs {gt.shape}")
    if align:
        rot, t = align_horn(est, gt)
        est = est @ rot.T + t
    d = est - gt
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# rendering -------------------------------------------------------------------


def depth_l1_render(rendered: np.ndarray, gt: np.ndarray,
                    mask: np.ndarray | None = None) -> float:
    """Mean |depth error| over valid pixels, in centimeters."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise EvaluationError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    if mask is None:
        mask = gt > 0
    if not np.any(mask):
        raise EvaluationError("no valid pixels for depth L1")
    return float(np.mean(np.abs(rendered[mask] - gt[mask]))) * 100.0


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """10 log10(1/MSE) for images in [0,1]; identical images give +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity with an 11-tap gaussian window."""
    from skimage.metrics import structural_similarity
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    kwargs = {"data_range": 1.0, "gaussian_weights": True, "sigma": 1.5,
              "use_sample_covariance": False}
    if a.ndim == 3:
        kwargs["channel_axis"] = -1
    return float(structural_similarity(a, b, **kwargs))


# reconstruction ---------------------------------------------------------------


def _has_neighbor_within(queries: np.ndarray, targets: np.ndarray,
                         tau: float) -> np.ndarray:
    """Boolean per query: any target within tau (grid for large sets)."""
    if len(targets) * len(queries) <= 10_000_000:
        hits = np.zeros(len(queries), dtype=bool)
        chunk = max(1, 10_000_000 // max(len(targets), 1))
        for lo in range(0, len(queries), chunk):
            q = queries[lo:lo + chunk]
            d2 = np.sum((q[:, None, :] - targets[None, :, :]) ** 2, axis=2)
            hits[lo:lo + chunk] = (d2 <= tau * tau).any(axis=1)
        return hits
    from .pointcloud import GridIndex
    grid = GridIndex(cell_size=tau)
    for i, p in enumerate(targets):
        grid.insert(i, p)
    hits = np.zeros(len(queries), dtype=bool)
    for i, q in enumerate(queries):
        cand = grid.candidates_near(q, tau)
        if len(cand):
            d2 = np.sum((targets[cand] - q) ** 2, axis=1)
            hits[i] = bool(np.any(d2 <= tau * tau))
    return hits


def f_score(pred: np.ndarray, gt: np.ndarray, tau: float = 0.01) -> dict:
    """Point-set precision/recall/F (percent) at distance threshold tau."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise EvaluationError("f_score requires non-empty point sets")
    precision = 100.0 * float(_has_neighbor_within(pred, gt, tau).mean())
    recall = 100.0 * float(_has_neighbor_within(gt, pred, tau).mean())
    f = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f_score": f}


# reports ----------------------------------------------------------------------

METRIC_KEYS = ["ate_rmse_cm", "depth_l1_cm", "psnr_db", "f_score",
               "precision", "recall", "runtime_s", "point_count",
               "peak_mem_mb"]


def _jsonable(value):
    if value is None:
        return None
    if isinstance(value, (int, np.integer)):
        return int(value)
    v = float(value)
    if math.isinf(v):
        return "inf"
    return v


def write_metrics_json(path, metrics: dict,
                       exclude: tuple = ("runtime_s", "peak_mem_mb")) -> None:
    """Deterministic JSON report.

    Wall-clock and memory keys are excluded by default so reruns with the
    same seed produce byte-identical files; the CSV row keeps them.
    """
    out = {k: _jsonable(v) for k, v in sorted(metrics.items())
           if k not in exclude}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(path, metrics: dict) -> None:
    keys = [k for k in METRIC_KEYS if k in metrics] + \
        sorted(k for k in metrics if k not in METRIC_KEYS)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        writer.writerow([_jsonable(metrics[k]) for k in keys])
