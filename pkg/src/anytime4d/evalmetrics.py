"""Alignment estimators and benchmark metrics for tracking, poses, clouds and depth."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraPose, Sim3, matrix_to_quat, quat_angle

DEFAULT_APD_THRESHOLDS = (0.05, 0.10, 0.20, 0.40, 0.80)


class DegenerateError(ValueError):
    """Point configuration does not determine a similarity transform."""


class NoConsensusError(RuntimeError):
    """RANSAC found no hypothesis with at least three inliers."""


# ---------------------------------------------------------------------------
# alignment

def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise ValueError("correspondences must be finite")
    return x


def _umeyama_parts(pred: np.ndarray, gt: np.ndarray, weights=None):
    if weights is None:
        w = np.full(len(pred), 1.0 / len(pred))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    mu_p = w @ pred
    mu_g = w @ gt
    dp = pred - mu_p
    dg = gt - mu_g
    cov = (dg * w[:, None]).T @ dp
    var_p = w @ np.einsum("ij,ij->i", dp, dp)
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = (D * S).sum() / var_p
    t = mu_g - s * R @ mu_p
    return s, R, t, dp


def umeyama_sim3(pred, gt, weights=None, allow_degenerate: bool = False) -> Sim3:
    """Least-squares ``(s, R, t)`` minimizing ``sum |s R pred + t - gt|^2``."""
    pred, gt = _as_points(pred), _as_points(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must pair up")
    if len(pred) < 3 and not allow_degenerate:
        raise DegenerateError("need at least three correspondences")
    s, R, t, dp = _umeyama_parts(pred, gt, weights)
    exact = np.array_equal(pred, gt)
    if not allow_degenerate:
        sv = np.linalg.svd(dp, compute_uv=False)
        if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateError("points are coincident or collinear")
    if not s > 0:
        raise DegenerateError("non-positive scale estimate")
    if exact:
        # the SVD leaves rounding noise; identical sets are aligned by the identity exactly
        return Sim3(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))
    return Sim3.from_parts(s, R, t)


def _batched_umeyama(P: np.ndarray, G: np.ndarray):
    """Vectorized Umeyama over ``(B, k, 3)`` samples; returns ``(s, R, t, ok)``."""
    mu_p = P.mean(axis=1, keepdims=True)
    mu_g = G.mean(axis=1, keepdims=True)
    dp = P - mu_p
    dg = G - mu_g
    cov = np.einsum("bki,bkj->bij", dg, dp) / P.shape[1]
    var_p = np.einsum("bki,bki->b", dp, dp) / P.shape[1]
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones((len(P), 3))
    S[np.linalg.det(U) * np.linalg.det(Vt) < 0, 2] = -1.0
    R = np.einsum("bij,bj,bjk->bik", U, S, Vt)
    sv = np.linalg.svd(dp, compute_uv=False)
    ok = (sv[:, 0] > 1e-12) & (sv[:, 1] > 1e-9 * sv[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (D * S).sum(axis=1) / var_p
    ok &= s > 0
    t = mu_g[:, 0] - s[:, None] * np.einsum("bij,bj->bi", R, mu_p[:, 0])
    return s, R, t, ok


def ransac_sim3(pred, gt, inlier_threshold: float = 0.05, iterations: int = 512,
                seed: int = 0, chunk: int = 64) -> tuple[Sim3, np.ndarray]:
    """Three-point RANSAC over Umeyama fits, refit once on the best inlier set.

    Ties between hypotheses go to the first one drawn.
    """
    pred, gt = _as_points(pred), _as_points(gt)
    n = len(pred)
    if n < 3:
        raise DegenerateError("need at least three correspondences")
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    best_count, best_mask = -1, None
    for lo in range(0, iterations, chunk):
        idx = samples[lo:lo + chunk]
        s, R, t, ok = _batched_umeyama(pred[idx], gt[idx])
        fitted = s[:, None, None] * np.einsum("bij,nj->bni", R, pred) + t[:, None]
        resid = np.linalg.norm(fitted - gt, axis=-1)
        inliers = (resid < inlier_threshold) & ok[:, None]
        counts = inliers.sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_mask = int(counts[k]), inliers[k]
    if best_count < 3:
        raise NoConsensusError(f"best hypothesis has {best_count} inliers")
    return umeyama_sim3(pred[best_mask], gt[best_mask]), best_mask


def median_scale(pred, gt) -> float:
    """Median of ``|gt| / |pred|`` about the shared origin; even counts take the lower middle."""
    pred, gt = _as_points(pred), _as_points(gt)
    if len(pred) == 0:
        raise ValueError("need at least one correspondence")
    pn = np.linalg.norm(pred, axis=-1)
    if np.any(pn == 0):
        raise ValueError("predicted point at the origin")
    ratios = np.sort(np.linalg.norm(gt, axis=-1) / pn)
    return float(ratios[(len(ratios) - 1) // 2])


# ---------------------------------------------------------------------------
# tracking

def _errors(pred, gt, valid=None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"track shapes differ: {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1)
    if valid is not None:
        err = err[np.asarray(valid, bool)]
    err = err.ravel()
    if err.size == 0:
        raise ValueError("no valid points to score")
    return err


def apd(pred, gt, valid=None, thresholds: Sequence[float] = DEFAULT_APD_THRESHOLDS) -> float:
    err = _errors(pred, gt, valid)
    return float(np.mean([100.0 * np.mean(err < t) for t in thresholds]))


def epe(pred, gt, valid=None) -> float:
    return float(_errors(pred, gt, valid).mean())


# ---------------------------------------------------------------------------
# camera poses

def ate_rpe(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> tuple[float, float, float, Sim3]:
    """``(ate, rpe_t, rpe_r_degrees, alignment)`` after Sim(3) alignment of camera centers."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("pose sequences differ in length")
    if len(pred_poses) < 2:
        raise ValueError("need at least two poses")
    pc = np.stack([p.translation for p in pred_poses])
    gc = np.stack([p.translation for p in gt_poses])
    if np.allclose(pc, pc[0], atol=1e-15) or np.allclose(gc, gc[0], atol=1e-15):
        T = Sim3(1.0, np.array([1.0, 0, 0, 0]), gc.mean(0) - pc.mean(0))
    else:
        T = umeyama_sim3(pc, gc, allow_degenerate=True)
    aligned = [CameraPose(matrix_to_quat(T.R @ p.R), T.apply(p.translation)) for p in pred_poses]
    ate = float(np.sqrt(np.mean(np.sum((np.stack([p.translation for p in aligned]) - gc) ** 2, axis=1))))
    rt, rr = [], []
    for i in range(len(aligned) - 1):
        rel_p = aligned[i].inverse().compose(aligned[i + 1])
        rel_g = gt_poses[i].inverse().compose(gt_poses[i + 1])
        err = rel_g.inverse().compose(rel_p)
        rt.append(np.linalg.norm(err.translation))
        rr.append(np.degrees(quat_angle(np.array([1.0, 0, 0, 0]), err.rotation)))
    return ate, float(np.mean(rt)), float(np.mean(rr)), T


# ---------------------------------------------------------------------------
# point clouds

def nearest_distances(query, ref) -> tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(ref).query(query, k=1)
    return dist, idx


def estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Unoriented PCA normals over each point and its ``k`` nearest neighbors."""
    _, idx = cKDTree(points).query(points, k=k + 1)
    nbrs = points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def acc_comp_nc(pred, gt, k: int = 10) -> tuple[float, float, float | None]:
    """Accuracy, completeness and normal consistency; NC is None for clouds of at most ``k`` points."""
    pred, gt = _as_points(pred), _as_points(gt)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("clouds must be non-empty")
    d_pred, i_pred = nearest_distances(pred, gt)
    d_gt, i_gt = nearest_distances(gt, pred)
    acc, comp = float(d_pred.mean()), float(d_gt.mean())
    if len(pred) < k + 1 or len(gt) < k + 1:
        return acc, comp, None
    n_pred = estimate_normals(pred, k)
    n_gt = estimate_normals(gt, k)
    nc_pred = np.abs(np.einsum("ij,ij->i", n_pred, n_gt[i_pred])).mean()
    nc_gt = np.abs(np.einsum("ij,ij->i", n_gt, n_pred[i_gt])).mean()
    return acc, comp, float(min(1.0, (nc_pred + nc_gt) / 2))


# ---------------------------------------------------------------------------
# depth

def depth_alignment(pred, gt, valid=None, mode: str = "scale") -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("depth shapes differ")
    m = np.isfinite(pred) & (gt > 0) & np.isfinite(gt)
    if valid is not None:
        m &= np.asarray(valid, bool)
    if mode == "scale":
        m &= pred > 0
    if not m.any():
        raise ValueError("no valid depth pixels")
    p, g = pred[m], gt[m]
    if mode == "scale":
        return float(np.median(g / p)), 0.0
    if mode == "scale_shift":
        A = np.stack([p, np.ones_like(p)], axis=1)
        (s, b), *_ = np.linalg.lstsq(A, g, rcond=None)
        return float(s), float(b)
    raise ValueError(f"unknown depth alignment {mode!r}")


def depth_metrics(pred, gt, valid=None, mode: str = "scale") -> tuple[float, float, tuple[float, float]]:
    """``(rel, delta<1.25 percentage, (scale, shift))`` with per-sequence alignment."""
    s, b = depth_alignment(pred, gt, valid, mode)
    pred = np.asarray(pred, dtype=np.float64) * s + b
    gt = np.asarray(gt, dtype=np.float64)
    m = np.isfinite(pred) & (gt > 0) & np.isfinite(gt)
    if valid is not None:
        m &= np.asarray(valid, bool)
    p, g = pred[m], gt[m]
    rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta = float(100.0 * np.mean((p > 0) & (ratio < 1.25)))
    return rel, delta, (s, b)


# ---------------------------------------------------------------------------
# reports

METRIC_FIELDS = ("apd", "epe", "ate", "rpe_t", "rpe_r", "acc", "comp", "nc", "depth_rel", "depth_delta")


@dataclass
class MetricReport:
    name: str = ""
    apd: float | None = None
    epe: float | None = None
    ate: float | None = None
    rpe_t: float | None = None
    rpe_r: float | None = None
    acc: float | None = None
    comp: float | None = None
    nc: float | None = None
    depth_rel: float | None = None
    depth_delta: float | None = None
    alignment: dict = field(default_factory=dict)
    apd_thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_APD_THRESHOLDS))
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in ("apd", "depth_delta"):
            v = getattr(self, f)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{f} must be a percentage, got {v}")
        if self.nc is not None and not 0.0 <= self.nc <= 1.0:
            raise ValueError(f"nc must lie in [0, 1], got {self.nc}")

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS if getattr(self, k) is not None}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def csv_row(self) -> dict:
        return {"name": self.name, **{k: getattr(self, k) for k in METRIC_FIELDS}}


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["name", *METRIC_FIELDS], lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: ("" if v is None else v) for k, v in r.csv_row().items()})
    return buf.getvalue()


def aggregate_reports(reports: Sequence[MetricReport], name: str = "mean") -> MetricReport:
    """Arithmetic mean of every metric; all reports must carry the same metric set."""
    if not reports:
        raise ValueError("need at least one report")
    keys = set(reports[0].metrics())
    for r in reports[1:]:
        if set(r.metrics()) != keys:
            raise ValueError(f"inconsistent metric sets: {sorted(keys)} vs {sorted(r.metrics())}")
    means = {k: float(np.mean([r.metrics()[k] for r in reports])) for k in keys}
    return MetricReport(name=name, **means, alignment=dict(reports[0].alignment),
                        apd_thresholds=list(reports[0].apd_thresholds), extra={"count": len(reports)})
