"""Toy-scale encode-once / query-anytime network.

Layout of a frame's token set: ``M`` patch tokens, then the camera token, then
the time token. The encoder alternates frame-wise and global self-attention;
the geometry head decodes each frame on its own; the motion head decodes the
displacement of a query frame towards a target time from the target's time
token (through AdaLN) and the target's patch tokens (through cross-attention).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraPose, DepthMap, PointMap, RayMap, upsample_matrix
from .representation import DisplacementField, FactorizedFrame4D, Timestamp

MOTION_VARIANTS = ("full", "no_cross_attn", "no_self_attn", "no_adaln")
OUTPUT_PARAMS = ("displacement", "points_world", "points_local")
CAMERA_TOKEN = -2
TIME_TOKEN = -1


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 128
    encoder_layers: int = 6
    heads: int = 4
    motion_layers: int = 4
    mlp_ratio: float = 4.0
    head_hidden: int = 256
    norm_eps: float = 1e-6
    # sinusoidal time code frequencies span [1, time_max_freq] cycles per unit time
    time_max_freq: float = 32.0
    # canonical pinhole field of view that predicted rays are a residual over
    prior_fov: float = math.radians(60.0)
    motion_variant: str = "full"
    output_param: str = "displacement"
    causal: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2D positional codes")
        if self.encoder_layers % 2 or self.encoder_layers < 2:
            raise ValueError("encoder_layers must be a positive even count")
        if self.patch_size % 2:
            raise ValueError("patch_size must be even so ray blocks tile the half-res grid")
        if self.motion_variant not in MOTION_VARIANTS:
            raise ValueError(f"motion_variant must be one of {MOTION_VARIANTS}")
        if self.output_param not in OUTPUT_PARAMS:
            raise ValueError(f"output_param must be one of {OUTPUT_PARAMS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# encodings

def sincos_2d(gh: int, gw: int, dim: int) -> torch.Tensor:
    """Fixed 2D sinusoidal code, ``(gh * gw, dim)``, row-major over the patch grid."""
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64),
                            indexing="ij")
    ay = ys.reshape(-1, 1) * omega
    ax = xs.reshape(-1, 1) * omega
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1)


def sincos_time(t: torch.Tensor, dim: int, max_freq: float) -> torch.Tensor:
    half = dim // 2
    freqs = torch.logspace(0, math.log10(max_freq), half, dtype=torch.float64)
    angle = 2 * math.pi * t.to(torch.float64).reshape(-1, 1) * freqs
    return torch.cat([angle.sin(), angle.cos()], dim=1)


def softmax_attention(q, k, v, mask=None):
    """``q``: (..., Lq, d); ``mask`` is boolean, True where attention is allowed."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def block_causal_mask(num_frames: int, tokens_per_frame: int) -> torch.Tensor:
    frame = torch.arange(num_frames).repeat_interleave(tokens_per_frame)
    return frame[:, None] >= frame[None, :]


# ---------------------------------------------------------------------------
# building blocks

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def split(self, x):
        *lead, L, D = x.shape
        return x.reshape(*lead, L, self.heads, D // self.heads).transpose(-2, -3)

    def merge(self, x):
        *lead, h, L, d = x.shape
        return x.transpose(-2, -3).reshape(*lead, L, h * d)

    def keys_values(self, ctx):
        return self.split(self.k(ctx)), self.split(self.v(ctx))

    def forward(self, x, ctx=None, mask=None, past_kv=None):
        """Returns ``(out, (k, v))``; ``past_kv`` is prepended to the keys/values of ``ctx``."""
        ctx = x if ctx is None else ctx
        q = self.split(self.q(x))
        k, v = self.keys_values(ctx)
        own = (k, v)
        if past_kv is not None:
            k = torch.cat([past_kv[0], k], dim=-2)
            v = torch.cat([past_kv[1], v], dim=-2)
        return self.out(self.merge(softmax_attention(q, k, v, mask))), own


class MLP(nn.Sequential):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, out or dim))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.embed_dim
        self.norm1 = nn.LayerNorm(D, eps=cfg.norm_eps)
        self.attn = Attention(D, cfg.heads)
        self.norm2 = nn.LayerNorm(D, eps=cfg.norm_eps)
        self.mlp = MLP(D, int(D * cfg.mlp_ratio))

    def forward(self, x, mask=None, past_kv=None):
        h, kv = self.attn(self.norm1(x), mask=mask, past_kv=past_kv)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, kv


def unpatchify(blocks: torch.Tensor, gh: int, gw: int, p: int, c: int) -> torch.Tensor:
    """``(B, gh*gw, p*p*c)`` per-token blocks to a ``(B, gh*p, gw*p, c)`` map."""
    B = blocks.shape[0]
    x = blocks.reshape(B, gh, gw, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * p, gw * p, c)


def patchify_pixels(frames: torch.Tensor, p: int) -> torch.Tensor:
    """``(N, H, W, 3)`` to ``(N, M, p*p*3)``, row-major patches."""
    N, H, W, C = frames.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    x = frames.reshape(N, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(N, (H // p) * (W // p), p * p * C)


# ---------------------------------------------------------------------------
# encoder

@dataclass
class SceneLatent:
    tokens: torch.Tensor      # (N, M + 2, D)
    image_shape: tuple[int, int]
    grid: tuple[int, int]

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def patches(self) -> torch.Tensor:
        return self.tokens[:, :-2]

    @property
    def camera(self) -> torch.Tensor:
        return self.tokens[:, CAMERA_TOKEN]

    @property
    def time(self) -> torch.Tensor:
        return self.tokens[:, TIME_TOKEN]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, p = cfg.embed_dim, cfg.patch_size
        self.proj = nn.Linear(p * p * 3, D)
        self.camera_token = nn.Parameter(torch.randn(D) * 0.02)
        self.time_token = nn.Parameter(torch.randn(D) * 0.02)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(D, eps=cfg.norm_eps)

    @staticmethod
    def is_global(layer: int) -> bool:
        # 0-based: even layers are frame-wise, odd layers are global
        return layer % 2 == 1

    def tokenize(self, frames: torch.Tensor, times: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """Patch, camera and time tokens for each frame: ``(N, M + 2, D)``."""
        N, H, W, _ = frames.shape
        p, D = self.cfg.patch_size, self.cfg.embed_dim
        gh, gw = H // p, W // p
        patches = self.proj(patchify_pixels(frames, p)) + sincos_2d(gh, gw, D).to(frames.dtype)
        cam = self.camera_token.expand(N, 1, D)
        time = (self.time_token + sincos_time(times, D, self.cfg.time_max_freq).to(frames.dtype)).unsqueeze(1)
        return torch.cat([patches, cam, time], dim=1), (gh, gw)

    def forward(self, frames: torch.Tensor, times: torch.Tensor, causal: bool | None = None,
                skip_global: bool = False, return_kv: bool = False):
        x, grid = self.tokenize(frames, times)
        tokens, kvs = self.run_layers(x, causal, skip_global)
        out = SceneLatent(tokens, (frames.shape[1], frames.shape[2]), grid)
        return (out, kvs) if return_kv else out

    def run_layers(self, x: torch.Tensor, causal: bool | None = None, skip_global: bool = False):
        """Alternating attention over token sets ``(N, T, D)``; returns final tokens and global-layer kv.

        ``skip_global`` replaces every global layer by the identity (a test hook).
        """
        causal = self.cfg.causal if causal is None else causal
        N, T, D = x.shape
        mask = block_causal_mask(N, T) if causal else None
        kvs = []
        for i, layer in enumerate(self.layers):
            if self.is_global(i):
                if skip_global:
                    kvs.append(None)
                    continue
                y, kv = layer(x.reshape(1, N * T, D), mask=mask)
                x = y.reshape(N, T, D)
                # (1, h, N*T, d) -> per-frame (N, h, T, d)
                kvs.append(tuple(t.reshape(t.shape[1], N, T, -1).transpose(0, 1) for t in kv))
            else:
                x, _ = layer(x)
                kvs.append(None)
        return self.norm(x), kvs


# ---------------------------------------------------------------------------
# heads

@dataclass
class GeometryPrediction:
    depth: torch.Tensor           # (N, H, W)
    depth_log_sigma: torch.Tensor  # (N, H, W)
    rays: torch.Tensor            # (N, H/2, W/2, 6) origins then directions
    ray_log_sigma: torch.Tensor   # (N, H/2, W/2)
    fov: torch.Tensor             # (N,)
    quat: torch.Tensor            # (N, 4) scalar-first, unit
    trans: torch.Tensor           # (N, 3)

    def frame(self, i: int):
        """Numpy view ``(DepthMap, RayMap, fov, CameraPose)`` of frame ``i``."""
        d = self.depth[i].detach().double().numpy()
        r = self.rays[i].detach().double().numpy()
        q = self.quat[i].detach().double().numpy()
        pose = CameraPose(q / np.linalg.norm(q), self.trans[i].detach().double().numpy())
        return DepthMap(d, np.ones(d.shape, bool)), RayMap(r[..., :3], r[..., 3:]), float(self.fov[i].detach()), pose


@dataclass
class MotionPrediction:
    deltas: torch.Tensor          # (T, H, W, 3) displacement (or points for point parameterizations)
    log_sigma: torch.Tensor       # (T, H, W)


class GeometryHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, p, h = cfg.embed_dim, cfg.patch_size, cfg.head_hidden
        self.norm = nn.LayerNorm(D, eps=cfg.norm_eps)
        self.depth_mlp = MLP(D, h, p * p * 2)
        self.ray_mlp = MLP(D, h, (p // 2) ** 2 * 7)
        self.camera_mlp = MLP(D, h, 8)
        self.fov_offset = math.log(math.expm1(-math.log1p(-cfg.prior_fov / math.pi)))
        with torch.no_grad():
            self.camera_mlp[-1].bias.zero_()
            self.camera_mlp[-1].bias[1] = 1.0

    def prior_rays(self, H: int, W: int, dtype) -> torch.Tensor:
        f = (H / 2) / math.tan(self.cfg.prior_fov / 2)
        u = (torch.arange(W // 2, dtype=torch.float64) + 0.5) * 2
        v = (torch.arange(H // 2, dtype=torch.float64) + 0.5) * 2
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        d = torch.stack([(uu - W / 2) / f, (vv - H / 2) / f, torch.ones_like(uu)], dim=-1)
        return torch.cat([torch.zeros_like(d), d], dim=-1).to(dtype)

    def forward(self, latent: SceneLatent, frames=None) -> GeometryPrediction:
        tokens = latent.tokens if frames is None else latent.tokens[frames]
        p = self.cfg.patch_size
        gh, gw = latent.grid
        H, W = latent.image_shape
        z = self.norm(tokens[:, :-2])
        dep = unpatchify(self.depth_mlp(z), gh, gw, p, 2)
        ray = unpatchify(self.ray_mlp(z), gh, gw, p // 2, 7)
        cam = self.camera_mlp(self.norm(tokens[:, CAMERA_TOKEN]))
        # fov = pi * (1 - exp(-softplus(x + c))) lies in (0, pi); c puts x = 0 at the prior
        fov = math.pi * (1 - torch.exp(-F.softplus(cam[:, 0] + self.fov_offset)))
        quat = cam[:, 1:5] / cam[:, 1:5].norm(dim=-1, keepdim=True)
        return GeometryPrediction(
            depth=torch.exp(dep[..., 0]), depth_log_sigma=dep[..., 1],
            rays=ray[..., :6] + self.prior_rays(H, W, ray.dtype), ray_log_sigma=ray[..., 6],
            fov=fov, quat=quat, trans=cam[:, 5:8])


class MotionBlock(nn.Module):
    """AdaLN-modulated self-attention, cross-attention to the target frame, MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.embed_dim
        self.variant = cfg.motion_variant
        self.use_self = self.variant != "no_self_attn"
        self.use_cross = self.variant != "no_cross_attn"
        self.use_adaln = self.variant != "no_adaln"
        eps = cfg.norm_eps
        self.norm1 = nn.LayerNorm(D, eps=eps, elementwise_affine=not self.use_adaln)
        if self.use_self:
            self.self_attn = Attention(D, cfg.heads)
        if self.use_adaln:
            # (shift, scale, gate) from the target time token, zero-initialized gate
            self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(D, 3 * D))
            nn.init.zeros_(self.adaln[-1].weight)
            nn.init.zeros_(self.adaln[-1].bias)
        if self.use_cross:
            self.norm_q = nn.LayerNorm(D, eps=eps)
            self.norm_kv = nn.LayerNorm(D, eps=eps)
            self.cross_attn = Attention(D, cfg.heads)
        self.norm2 = nn.LayerNorm(D, eps=eps)
        self.mlp = MLP(D, int(D * cfg.mlp_ratio))

    def forward(self, x, cond, ctx):
        h = self.norm1(x)
        if self.use_adaln:
            shift, scale, gate = self.adaln(cond).unsqueeze(1).chunk(3, dim=-1)
            h = h * (1 + scale) + shift
        if self.use_self:
            h, _ = self.self_attn(h)
        if self.use_adaln:
            h = gate * h
        # without self-attention the modulated tokens pass straight through as a residual update
        x = x + h
        if self.use_cross:
            h, _ = self.cross_attn(self.norm_q(x), ctx=self.norm_kv(ctx))
            x = x + h
        return x + self.mlp(self.norm2(x))


class MotionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, p = cfg.embed_dim, cfg.patch_size
        self.blocks = nn.ModuleList(MotionBlock(cfg) for _ in range(cfg.motion_layers))
        self.norm = nn.LayerNorm(D, eps=cfg.norm_eps)
        self.out = nn.Linear(D, p * p * 4)

    def forward(self, latent: SceneLatent, q: int, targets) -> MotionPrediction:
        n = latent.num_frames
        targets = [int(t) for t in targets]
        if not 0 <= q < n or any(not 0 <= t < n for t in targets):
            raise IndexError(f"query {q} / targets {targets} outside [0, {n})")
        tau = torch.tensor(targets, dtype=torch.long)
        patches = latent.patches
        x = patches[q].expand(len(targets), -1, -1)
        cond = latent.time[tau]
        ctx = patches[tau]
        for blk in self.blocks:
            x = blk(x, cond, ctx)
        gh, gw = latent.grid
        out = unpatchify(self.out(self.norm(x)), gh, gw, self.cfg.patch_size, 4)
        return MotionPrediction(out[..., :3], out[..., 3])


# ---------------------------------------------------------------------------
# full model

def upsample_half_torch(grid: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of :func:`geometry.upsample_half` on ``(..., h, w, c)``."""
    Ah = torch.as_tensor(upsample_matrix(grid.shape[-3]), dtype=grid.dtype)
    Aw = torch.as_tensor(upsample_matrix(grid.shape[-2]), dtype=grid.dtype)
    return torch.einsum("ih,...hwc,jw->...ijc", Ah, grid, Aw)


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def base_points(geom: GeometryPrediction) -> torch.Tensor:
    """Predicted depth times upsampled predicted rays: ``(N, H, W, 3)``."""
    rays = upsample_half_torch(geom.rays)
    return rays[..., :3] + geom.depth.unsqueeze(-1) * rays[..., 3:]


@dataclass
class Forward4D:
    latent: SceneLatent
    geometry: GeometryPrediction
    base: torch.Tensor            # (N, H, W, 3)
    query: int
    targets: list[int]
    motion: MotionPrediction      # raw head output, per target
    output_param: str = "displacement"

    def time_indexed_points(self) -> torch.Tensor:
        """Predicted positions of the query frame's pixels at each target: ``(T, H, W, 3)``."""
        return self.base[self.query] + self.deltas()

    def deltas(self, output_param: str | None = None) -> torch.Tensor:
        param = output_param or self.output_param
        raw = self.motion.deltas
        if param == "displacement":
            return raw
        if param == "points_world":
            return raw - self.base[self.query]
        R = quat_to_matrix_torch(self.geometry.quat[self.query])
        world = raw @ R.T + self.geometry.trans[self.query]
        return world - self.base[self.query]

    def factorized(self) -> FactorizedFrame4D:
        n = self.latent.num_frames
        base = self.base[self.query].detach().double().numpy()
        valid = np.ones(base.shape[:2], bool)
        src = Timestamp(self.query, n)
        frame = FactorizedFrame4D(PointMap(base, valid), src)
        deltas = self.deltas().detach().double().numpy()
        for k, t in enumerate(self.targets):
            frame.add(DisplacementField(deltas[k], valid.copy(), src, Timestamp(t, n)))
        return frame


class Model4D(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.geometry_head = GeometryHead(self.cfg)
        self.motion_head = MotionHead(self.cfg)
        self.encode_calls = 0

    @staticmethod
    def normalized_times(num_frames: int) -> torch.Tensor:
        return torch.arange(num_frames, dtype=torch.float64) / max(num_frames - 1, 1)

    def encode(self, frames: torch.Tensor, times: torch.Tensor | None = None, **kw) -> SceneLatent:
        if frames.shape[0] < 2:
            raise ValueError("offline encoding needs at least two frames")
        self.encode_calls += 1
        times = self.normalized_times(frames.shape[0]) if times is None else times
        return self.encoder(frames, times, **kw)

    def forward_4d(self, frames: torch.Tensor, query: int, targets) -> Forward4D:
        latent = self.encode(frames)
        return self.decode(latent, query, targets)

    def decode(self, latent: SceneLatent, query: int, targets) -> Forward4D:
        geom = self.geometry_head(latent)
        motion = self.motion_head(latent, query, targets)
        return Forward4D(latent, geom, base_points(geom), query, list(targets), motion, self.cfg.output_param)

    forward = forward_4d
