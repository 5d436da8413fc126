"""Losses, supervision sampling and the optimization loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .archive import ArchiveError, read_archive, write_archive
from .model import Forward4D, Model4D, ModelConfig
from .scenegen import GroundTruthBundle, augment, sample_clip


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss ({value})")
        self.term = term


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 3e-4
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    dense_probability: float = 0.2
    keep_fraction: tuple[float, float] = (0.2, 0.3)
    # weight of the spatial / temporal gradient terms relative to the value terms
    gradient_weight: float = 1.0
    # (min, max) frames per clip; None trains on whole sequences
    clip_length: tuple[int, int] | None = None
    max_stride: int = 5
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.keep_fraction = tuple(self.keep_fraction)
        if self.clip_length is not None:
            self.clip_length = tuple(self.clip_length)
        if not 0.0 <= self.dense_probability <= 1.0:
            raise ValueError("dense_probability must lie in [0, 1]")
        lo, hi = self.keep_fraction
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("keep_fraction must be an increasing range inside (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses

def _masked_sum(pred, gt, log_sigma, mask):
    """Sum and element count of ``|pred - gt| exp(-s) + s`` over masked entries."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() == log_sigma.dim() + 1:
        log_sigma = log_sigma.unsqueeze(-1).expand_as(pred)
        mask = mask.unsqueeze(-1).expand_as(pred)
    elem = (pred - gt).abs() * torch.exp(-log_sigma) + log_sigma
    return torch.where(mask, elem, torch.zeros_like(elem)).sum(), int(mask.sum())


def aleatoric_l1(pred, gt, log_sigma, mask) -> torch.Tensor:
    """Mean of ``|pred - gt| * exp(-log_sigma) + log_sigma`` over masked elements.

    ``log_sigma`` and ``mask`` may omit a trailing channel axis of ``pred``.
    """
    total, count = _masked_sum(pred, gt, log_sigma, mask)
    if count == 0:
        raise ValueError("empty loss mask")
    return total / count


def depth_loss(depth, log_sigma, gt, valid, gradient_weight: float = 1.0) -> torch.Tensor:
    """Value term plus forward-difference spatial-gradient term, one shared uncertainty map.

    Shapes ``(..., H, W)``; a gradient pair counts only when both pixels are valid.
    """
    value = aleatoric_l1(depth, gt, log_sigma, valid)
    sx, nx = _masked_sum(depth[..., :, 1:] - depth[..., :, :-1], gt[..., :, 1:] - gt[..., :, :-1],
                         log_sigma[..., :, :-1], valid[..., :, 1:] & valid[..., :, :-1])
    sy, ny = _masked_sum(depth[..., 1:, :] - depth[..., :-1, :], gt[..., 1:, :] - gt[..., :-1, :],
                         log_sigma[..., :-1, :], valid[..., 1:, :] & valid[..., :-1, :])
    if nx + ny == 0:
        return value
    return value + gradient_weight * (sx + sy) / (nx + ny)


def motion_loss(pred, log_sigma, gt, mask, gradient_weight: float = 1.0) -> torch.Tensor:
    """Value term plus velocity term over consecutive targets.

    ``pred``/``gt``: ``(T, H, W, 3)`` ordered by target time; ``log_sigma``/``mask``:
    ``(T, H, W)``. The velocity term uses the later target's uncertainty and only
    pixels supervised at both targets.
    """
    value = aleatoric_l1(pred, gt, log_sigma, mask)
    if pred.shape[0] < 2:
        return value
    both = mask[1:] & mask[:-1]
    if not both.any():
        return value
    temporal = aleatoric_l1(pred[1:] - pred[:-1], gt[1:] - gt[:-1], log_sigma[1:], both)
    return value + gradient_weight * temporal


def ray_loss(pred, gt, log_sigma, mask=None) -> torch.Tensor:
    """Aleatoric L1 over the 6 (origin, direction) channels of half-resolution ray maps."""
    if mask is None:
        mask = torch.ones(pred.shape[:-1], dtype=torch.bool)
    return aleatoric_l1(pred, gt, log_sigma, mask)


def quat_geodesic(a, b) -> torch.Tensor:
    """Rotation angle between unit quaternions, insensitive to sign."""
    aw, av = a[..., 0], a[..., 1:]
    bw, bv = b[..., 0], b[..., 1:]
    w = aw * bw + (av * bv).sum(-1)
    v = aw.unsqueeze(-1) * bv - bw.unsqueeze(-1) * av - torch.cross(av, bv, dim=-1)
    return 2 * torch.atan2(v.norm(dim=-1), w.abs())


def camera_loss(fov, quat, trans, gt_fov, gt_quat, gt_trans) -> torch.Tensor:
    per_frame = (fov - gt_fov).abs() + quat_geodesic(quat, gt_quat) + (trans - gt_trans).abs().sum(-1)
    return per_frame.mean()


@dataclass
class LossBreakdown:
    depth: float
    ray: float
    camera: float
    motion: float
    total: float
    counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"depth": self.depth, "ray": self.ray, "camera": self.camera, "motion": self.motion,
                "total": self.total}


# ---------------------------------------------------------------------------
# supervision

@dataclass
class SupervisionPlan:
    query: int
    targets: list[int]
    masks: np.ndarray          # (T, H, W) bool, one per target
    dense: bool
    keep_fraction: float | None
    dense_probability: float = 0.2
    keep_range: tuple[float, float] = (0.2, 0.3)


def top_magnitude_mask(deltas: np.ndarray, valid: np.ndarray, fraction: float) -> np.ndarray:
    """Keep the ``fraction`` of valid pixels with the largest displacement norm."""
    mag = np.linalg.norm(deltas, axis=-1)[valid]
    k = int(round(fraction * mag.size))
    order = np.argsort(-mag, kind="stable")
    keep = np.zeros(mag.size, bool)
    keep[order[:k]] = True
    out = np.zeros(valid.shape, bool)
    out[valid] = keep
    return out


def build_supervision_plan(bundle: GroundTruthBundle, seed: int, dense_probability: float = 0.2,
                           keep_fraction: tuple[float, float] = (0.2, 0.3),
                           query: int | None = None) -> SupervisionPlan:
    """One query frame per iteration, all frames as targets, dense or top-magnitude masks."""
    n = bundle.num_frames
    if n < 2:
        raise ValueError("need at least two frames")
    rng = np.random.Generator(np.random.PCG64(seed))
    q_draw = int(rng.integers(n))
    dense = bool(rng.uniform() < dense_probability)
    frac = float(rng.uniform(*keep_fraction))
    q = q_draw if query is None else query
    targets = list(range(n))
    masks = []
    for tau in targets:
        disp = bundle.displacement(q, tau)
        masks.append(disp.valid.copy() if dense else top_magnitude_mask(disp.deltas, disp.valid, frac))
    return SupervisionPlan(q, targets, np.stack(masks), dense, None if dense else frac,
                           dense_probability, tuple(keep_fraction))


@dataclass
class ClipBatch:
    frames: torch.Tensor
    depth: torch.Tensor
    valid: torch.Tensor
    rays: torch.Tensor
    fov: torch.Tensor
    quat: torch.Tensor
    trans: torch.Tensor
    query: int
    targets: list[int]
    displacement: torch.Tensor  # (T, H, W, 3)
    points_world: torch.Tensor  # (T, H, W, 3)
    points_local: torch.Tensor  # (T, H, W, 3) in the query camera's frame
    motion_mask: torch.Tensor   # (T, H, W)


def make_batch(bundle: GroundTruthBundle, plan: SupervisionPlan, frames: np.ndarray | None = None,
               dtype=torch.float32) -> ClipBatch:
    q = plan.query
    n = bundle.num_frames
    frames = bundle.frames if frames is None else frames
    rays = np.stack([bundle.rays(i).as_array() for i in range(n)])
    base = bundle.base(q).points
    disp = np.stack([bundle.displacement(q, t).deltas for t in plan.targets])
    world = np.where(bundle.valid[q][None, ..., None], base + disp, 0.0)
    pose = bundle.poses[q]
    local = np.where(bundle.valid[q][None, ..., None], (world - pose.translation) @ pose.R, 0.0)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    return ClipBatch(
        frames=t(frames), depth=t(bundle.depth), valid=torch.as_tensor(bundle.valid), rays=t(rays),
        fov=t(np.full(n, bundle.intrinsics.vertical_fov)), quat=t(np.stack([p.rotation for p in bundle.poses])),
        trans=t(np.stack([p.translation for p in bundle.poses])), query=q, targets=list(plan.targets),
        displacement=t(disp), points_world=t(world), points_local=t(local),
        motion_mask=torch.as_tensor(plan.masks))


def compute_losses(out: Forward4D, batch: ClipBatch, gradient_weight: float = 1.0):
    """Total loss tensor plus its :class:`LossBreakdown`."""
    g = out.geometry
    terms = {
        "depth": depth_loss(g.depth, g.depth_log_sigma, batch.depth, batch.valid, gradient_weight),
        "ray": ray_loss(g.rays, batch.rays, g.ray_log_sigma),
        "camera": camera_loss(g.fov, g.quat, g.trans, batch.fov, batch.quat, batch.trans),
    }
    target = {"displacement": batch.displacement, "points_world": batch.points_world,
              "points_local": batch.points_local}[out.output_param]
    terms["motion"] = motion_loss(out.motion.deltas, out.motion.log_sigma, target, batch.motion_mask,
                                  gradient_weight)
    for name, v in terms.items():
        if not torch.isfinite(v):
            raise NonFiniteLoss(name, float(v.detach()))
    total = terms["depth"] + terms["ray"] + terms["camera"] + terms["motion"]
    parts = {k: float(v.detach()) for k, v in terms.items()}
    breakdown = LossBreakdown(**parts, total=sum(parts.values()),
                              counts={"depth": int(batch.valid.sum()), "ray": int(batch.rays[..., 0].numel()),
                                      "camera": len(batch.fov), "motion": int(batch.motion_mask.sum())})
    return total, breakdown


# ---------------------------------------------------------------------------
# optimization

def lr_at(step: int, cfg: TrainConfig) -> float:
    total = max(cfg.steps, 1)
    lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
    if cfg.warmup_steps and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def train_step(model: Model4D, optimizer: torch.optim.Optimizer, batch: ClipBatch, step: int,
               cfg: TrainConfig) -> LossBreakdown:
    """One forward/backward/AdamW update; parameters change in place."""
    model.train()
    out = model.forward_4d(batch.frames, batch.query, batch.targets)
    total, breakdown = compute_losses(out, batch, cfg.gradient_weight)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr_at(step, cfg)
    optimizer.step()
    return breakdown


class Trainer:
    """Samples clips from a fixed set of sequences and runs :func:`train_step`."""

    def __init__(self, model: Model4D, bundles: Sequence[GroundTruthBundle], cfg: TrainConfig):
        if not bundles:
            raise ValueError("no training sequences")
        self.model = model
        self.bundles = list(bundles)
        self.cfg = cfg
        self.optimizer = make_optimizer(model, cfg)
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.step = 0

    def next_batch(self) -> ClipBatch:
        cfg = self.cfg
        k = int(self.rng.integers(len(self.bundles)))
        clip_seed, plan_seed, aug_seed = (int(x) for x in self.rng.integers(2**63, size=3))
        bundle = self.bundles[k]
        length = bundle.num_frames
        if cfg.clip_length is not None:
            lo, hi = cfg.clip_length
            length = int(self.rng.integers(lo, min(hi, bundle.num_frames) + 1))
        clip = sample_clip(bundle, clip_seed, length, max_stride=cfg.max_stride)
        clip, _ = clip.normalized()
        plan = build_supervision_plan(clip, plan_seed, cfg.dense_probability, cfg.keep_fraction)
        frames = augment(clip.frames, aug_seed) if cfg.augment else clip.frames
        dtype = next(self.model.parameters()).dtype
        return make_batch(clip, plan, frames, dtype)

    def run(self, steps: int, on_step: Callable[[int, LossBreakdown], bool | None] | None = None) -> list[LossBreakdown]:
        """Take up to ``steps`` optimizer steps; stops early when ``on_step`` returns True."""
        history = []
        for _ in range(steps):
            batch = self.next_batch()
            br = train_step(self.model, self.optimizer, batch, self.step, self.cfg)
            self.step += 1
            history.append(br)
            if on_step is not None and on_step(self.step, br):
                break
        return history

    # -- checkpoints

    def save(self, path, extra_meta: dict | None = None) -> Path:
        arrays = {}
        opt_state = self.optimizer.state_dict()
        names = [n for n, _ in self.model.named_parameters()]
        for name, p in self.model.named_parameters():
            arrays[f"param__{name}"] = p.detach().cpu().numpy().astype(np.float32)
        adam_steps = {}
        for idx, st in opt_state["state"].items():
            name = names[idx]
            arrays[f"adam_m__{name}"] = st["exp_avg"].cpu().numpy().astype(np.float32)
            arrays[f"adam_v__{name}"] = st["exp_avg_sq"].cpu().numpy().astype(np.float32)
            adam_steps[name] = float(st["step"])
        meta = {"model_config": self.model.cfg.to_dict(), "train_config": self.cfg.to_dict(),
                "step": self.step, "rng_state": self.rng.bit_generator.state, "adam_steps": adam_steps,
                **(extra_meta or {})}
        return write_archive(path, arrays, meta, kind="checkpoint")

    @classmethod
    def load(cls, path, bundles: Sequence[GroundTruthBundle], cfg: TrainConfig | None = None) -> "Trainer":
        model, manifest, arrays = load_model(path, return_all=True)
        meta = manifest["meta"]
        cfg = cfg or TrainConfig.from_dict(meta["train_config"])
        trainer = cls(model, bundles, cfg)
        trainer.step = int(meta["step"])
        trainer.rng.bit_generator.state = meta["rng_state"]
        names = [n for n, _ in model.named_parameters()]
        state = {}
        for idx, name in enumerate(names):
            if f"adam_m__{name}" in arrays:
                state[idx] = {"step": torch.tensor(meta["adam_steps"][name]),
                              "exp_avg": torch.from_numpy(arrays[f"adam_m__{name}"].copy()),
                              "exp_avg_sq": torch.from_numpy(arrays[f"adam_v__{name}"].copy())}
        sd = trainer.optimizer.state_dict()
        sd["state"] = state
        trainer.optimizer.load_state_dict(sd)
        return trainer


def load_model(path, return_all: bool = False):
    arrays, manifest = read_archive(path)
    if manifest.get("kind") != "checkpoint":
        raise ArchiveError(f"{path} is not a checkpoint")
    cfg = ModelConfig.from_dict(manifest["meta"]["model_config"])
    model = Model4D(cfg)
    sd = model.state_dict()
    params = {k[len("param__"):]: v for k, v in arrays.items() if k.startswith("param__")}
    missing = set(n for n, _ in model.named_parameters()) - set(params)
    if missing:
        raise ArchiveError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, v in params.items():
        if name not in sd or tuple(sd[name].shape) != v.shape:
            raise ArchiveError(f"parameter {name!r} does not match the model config")
        sd[name] = torch.from_numpy(v.copy())
    model.load_state_dict(sd)
    return (model, manifest, arrays) if return_all else model
