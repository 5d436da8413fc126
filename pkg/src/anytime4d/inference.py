"""Prediction containers and the evaluation protocols that score them against ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .evalmetrics import (DEFAULT_APD_THRESHOLDS, MetricReport, NoConsensusError, acc_comp_nc, apd,
                          ate_rpe, depth_metrics, epe, median_scale, ransac_sim3, umeyama_sim3)
from .geometry import CameraPose, PointMap, Sim3, canonical_quat
from .model import Forward4D, Model4D
from .representation import DisplacementField, FactorizedFrame4D, Timestamp
from .scenegen import GroundTruthBundle

TRACK_ALIGNMENTS = ("sim3_ransac", "median_scale", "none")
DEPTH_ALIGNMENTS = ("scale", "scale_shift")
METRIC_GROUPS = ("tracking", "pose", "depth", "recon")


@dataclass
class Prediction:
    """Everything one ``forward_4d`` call produces, as numpy arrays."""

    depth: np.ndarray             # (N, H, W)
    depth_log_sigma: np.ndarray   # (N, H, W)
    rays: np.ndarray              # (N, H/2, W/2, 6)
    ray_log_sigma: np.ndarray     # (N, H/2, W/2)
    fov: np.ndarray               # (N,)
    quat: np.ndarray              # (N, 4)
    trans: np.ndarray             # (N, 3)
    base: np.ndarray              # (N, H, W, 3)
    query: int
    targets: list[int]
    deltas: np.ndarray            # (T, H, W, 3) world displacement of the query frame
    motion_log_sigma: np.ndarray  # (T, H, W)

    ARRAYS = ("depth", "depth_log_sigma", "rays", "ray_log_sigma", "fov", "quat", "trans", "base",
              "deltas", "motion_log_sigma")

    @property
    def num_frames(self) -> int:
        return len(self.depth)

    def poses(self) -> list[CameraPose]:
        return [CameraPose(canonical_quat(np.asarray(q, np.float64)), np.asarray(t, np.float64))
                for q, t in zip(self.quat, self.trans)]

    def tracks(self) -> np.ndarray:
        """Query-frame pixels at every target time, ``(T, H, W, 3)``."""
        return self.base[self.query][None] + self.deltas

    def factorized(self) -> FactorizedFrame4D:
        n = self.num_frames
        valid = np.ones(self.depth.shape[1:], bool)
        src = Timestamp(self.query, n)
        frame = FactorizedFrame4D(PointMap(self.base[self.query], valid), src)
        for k, t in enumerate(self.targets):
            frame.add(DisplacementField(self.deltas[k], valid.copy(), src, Timestamp(t, n)))
        return frame

    def self_displacement(self) -> float | None:
        """Mean displacement norm for the ``query -> query`` entry, if it was requested."""
        if self.query not in self.targets:
            return None
        return float(np.linalg.norm(self.deltas[self.targets.index(self.query)], axis=-1).mean())

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {k: getattr(self, k) for k in self.ARRAYS}
        arrays["targets"] = np.asarray(self.targets, dtype=np.int32)
        return arrays, {"query": self.query}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "Prediction":
        missing = [k for k in (*cls.ARRAYS, "targets") if k not in arrays]
        if missing:
            raise KeyError(f"prediction archive lacks {missing}")
        return cls(**{k: arrays[k] for k in cls.ARRAYS}, query=int(meta["query"]),
                   targets=[int(t) for t in arrays["targets"]])


def prediction_from_forward(out: Forward4D) -> Prediction:
    g = out.geometry
    to = lambda t: t.detach().cpu().numpy()
    return Prediction(depth=to(g.depth), depth_log_sigma=to(g.depth_log_sigma), rays=to(g.rays),
                      ray_log_sigma=to(g.ray_log_sigma), fov=to(g.fov), quat=to(g.quat), trans=to(g.trans),
                      base=to(out.base), query=out.query, targets=list(out.targets), deltas=to(out.deltas()),
                      motion_log_sigma=to(out.motion.log_sigma))


@torch.no_grad()
def predict(model: Model4D, frames: np.ndarray, query: int, targets: Sequence[int]) -> Prediction:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model.forward_4d(torch.as_tensor(np.asarray(frames), dtype=dtype), query, list(targets))
    return prediction_from_forward(out)


def ground_truth_prediction(bundle: GroundTruthBundle, query: int, targets: Sequence[int]) -> Prediction:
    """A perfect prediction built from ground truth; invalid pixels are zero-filled."""
    n = bundle.num_frames
    rays = np.stack([bundle.rays(i).as_array() for i in range(n)])
    base = np.stack([bundle.base(i).points for i in range(n)])
    deltas = np.stack([bundle.displacement(query, t).deltas for t in targets])
    zeros = np.zeros(bundle.depth.shape)
    return Prediction(depth=np.where(bundle.valid, bundle.depth, 0.0), depth_log_sigma=zeros, rays=rays,
                      ray_log_sigma=np.zeros(rays.shape[:3]), fov=np.full(n, bundle.intrinsics.vertical_fov),
                      quat=np.stack([p.rotation for p in bundle.poses]),
                      trans=np.stack([p.translation for p in bundle.poses]), base=base, query=query,
                      targets=list(targets), deltas=deltas, motion_log_sigma=np.zeros((len(targets),) + zeros.shape[1:]))


def default_query(num_frames: int) -> int:
    return (num_frames - 1) // 2


def gt_tracks(bundle: GroundTruthBundle, query: int, targets: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth positions ``(T, H, W, 3)`` and the query frame's valid mask."""
    base = bundle.base(query).points
    return np.stack([base + bundle.displacement(query, t).deltas for t in targets]), bundle.valid[query]


def fit_alignment(pred_pts: np.ndarray, gt_pts: np.ndarray, mode: str, ransac_threshold: float = 0.05,
                  ransac_iterations: int = 512, seed: int = 0) -> tuple[Sim3, dict]:
    """Alignment taking predicted points onto ground truth, plus a JSON record of it."""
    identity = Sim3(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))
    if mode == "none":
        T, info = identity, {}
    elif mode == "median_scale":
        s = median_scale(pred_pts, gt_pts)
        T, info = Sim3(s, identity.rotation, np.zeros(3)), {}
    elif mode == "sim3_ransac":
        try:
            T, inliers = ransac_sim3(pred_pts, gt_pts, ransac_threshold, ransac_iterations, seed)
            info = {"inlier_fraction": float(inliers.mean()), "fallback": None}
        except NoConsensusError:
            # untrained models rarely produce three points within the threshold
            T = umeyama_sim3(pred_pts, gt_pts, allow_degenerate=True)
            info = {"inlier_fraction": 0.0, "fallback": "umeyama"}
        info |= {"threshold": ransac_threshold, "iterations": ransac_iterations, "seed": seed}
    else:
        raise ValueError(f"unknown alignment {mode!r}; choose from {TRACK_ALIGNMENTS}")
    return T, {"mode": mode, **T.to_dict(), **info}


def evaluate(pred: Prediction, bundle: GroundTruthBundle, metrics: Sequence[str] = METRIC_GROUPS,
             align: str = "sim3_ransac", depth_align: str = "scale",
             thresholds: Sequence[float] = DEFAULT_APD_THRESHOLDS, ransac_threshold: float = 0.05,
             ransac_iterations: int = 512, seed: int = 0, knn: int = 10, name: str = "") -> MetricReport:
    """Score ``pred`` against ``bundle``; both must live in the same (normalized) units."""
    unknown = set(metrics) - set(METRIC_GROUPS)
    if unknown:
        raise ValueError(f"unknown metric groups {sorted(unknown)}")
    if pred.depth.shape != bundle.depth.shape:
        raise ValueError(f"prediction shape {pred.depth.shape} does not match ground truth {bundle.depth.shape}")
    if depth_align not in DEPTH_ALIGNMENTS:
        raise ValueError(f"unknown depth alignment {depth_align!r}")
    report = MetricReport(name=name, apd_thresholds=list(thresholds))
    q = pred.query
    gt_t, valid = gt_tracks(bundle, q, pred.targets)
    mask = np.broadcast_to(valid, gt_t.shape[:-1])
    pred_t = pred.tracks().astype(np.float64)
    T = None
    if "tracking" in metrics or "recon" in metrics:
        T, info = fit_alignment(pred_t[mask], gt_t[mask], align, ransac_threshold, ransac_iterations, seed)
        report.alignment["tracking"] = info
    if "tracking" in metrics:
        aligned = T.apply(pred_t.reshape(-1, 3)).reshape(pred_t.shape)
        report.apd = apd(aligned, gt_t, mask, thresholds)
        report.epe = epe(aligned, gt_t, mask)
    if "pose" in metrics:
        gt_poses = list(bundle.poses)
        report.ate, report.rpe_t, report.rpe_r, Tp = ate_rpe(pred.poses(), gt_poses)
        report.alignment["pose"] = {"mode": "umeyama", **Tp.to_dict()}
    if "depth" in metrics:
        report.depth_rel, report.depth_delta, (s, b) = depth_metrics(pred.depth, bundle.depth, bundle.valid,
                                                                     depth_align)
        report.alignment["depth"] = {"mode": depth_align, "scale": s, "shift": b}
    if "recon" in metrics:
        pc = T.apply(pred.base[bundle.valid].astype(np.float64))
        gc = np.concatenate([bundle.base(i).points[bundle.valid[i]] for i in range(bundle.num_frames)])
        report.acc, report.comp, report.nc = acc_comp_nc(pc, gc, knn)
        report.alignment["recon"] = {"mode": "same as tracking"}
    diag = pred.self_displacement()
    if diag is not None:
        report.extra["self_displacement"] = diag
    report.extra.update(query=q, targets=list(pred.targets))
    return report


def evaluate_model(model: Model4D, bundle: GroundTruthBundle, query: int | None = None,
                   targets: Sequence[int] | None = None, normalize: bool = True, **kw) -> MetricReport:
    """Predict on ``bundle`` (scene-normalized first by default) and :func:`evaluate`."""
    if normalize:
        bundle, _ = bundle.normalized()
    q = default_query(bundle.num_frames) if query is None else query
    targets = list(range(bundle.num_frames)) if targets is None else list(targets)
    return evaluate(predict(model, bundle.frames, q, targets), bundle, **kw)
