"""Pinhole cameras, ray maps, pointmaps and similarity transforms.

Conventions used throughout the package:

* camera frame is x right, y down, z forward; pixel ``(u, v)`` is (column, row)
  and pixel centers sit at half-integer coordinates ``u + 0.5``;
* depth is z-depth, and ray directions are stored with unit camera-frame z
  before rotation, so ``origin + depth * direction`` is the unprojected point;
* quaternions are scalar-first ``(w, x, y, z)`` with ``w >= 0``;
* poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation


# ---------------------------------------------------------------------------
# quaternions

def canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    # leave already-unit quaternions untouched so re-canonicalizing is bit-stable
    q = np.where(np.abs(norm - 1.0) > 4e-16, q / norm, q)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return canonical_quat(xyzw[..., [3, 0, 1, 2]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    xyzw = Rotation.from_rotvec(axis * angle).as_quat()
    return canonical_quat(xyzw[[3, 0, 1, 2]])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_angle(a, b) -> np.ndarray:
    """Geodesic angle in radians between rotations ``a`` and ``b``; ``q`` and ``-q`` coincide."""
    rel = quat_mul(quat_conj(a), b)
    vec = np.linalg.norm(rel[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec, np.abs(rel[..., 0]))


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    vertical_fov: float
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        if self.width < 8 or self.height < 8 or self.width % 2 or self.height % 2:
            raise ValueError(f"image size must be even and >= 8, got {self.height}x{self.width}")
        if not 0.0 < self.vertical_fov < np.pi:
            raise ValueError(f"vertical_fov must lie in (0, pi), got {self.vertical_fov}")
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (self.width / 2.0, self.height / 2.0))
        px, py = self.principal_point
        if not (0.0 <= px <= self.width and 0.0 <= py <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / np.tan(self.vertical_fov / 2.0)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "vertical_fov": self.vertical_fov,
                "principal_point": list(self.principal_point)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(int(d["width"]), int(d["height"]), float(d["vertical_fov"]),
                   tuple(d["principal_point"]))


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion must be unit, norm={np.linalg.norm(q)}")
        object.__setattr__(self, "rotation", canonical_quat(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "CameraPose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "CameraPose":
        R_inv = self.R.T
        return CameraPose(quat_conj(self.rotation), -R_inv @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other``: apply ``other`` first."""
        q = canonical_quat(quat_mul(self.rotation, other.rotation))
        return CameraPose(q, self.R @ other.translation + self.translation)

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.translation

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_array(cls, a) -> "CameraPose":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:4], a[4:7])


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("depth values and mask must be matching HxW arrays")
        v = self.values[self.valid]
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ValueError("valid depth must be finite and positive")


@dataclass(frozen=True)
class RayMap:
    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise ValueError("ray origins and directions must be matching (h, w, 3) arrays")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.origins, self.directions], axis=-1)


@dataclass(frozen=True)
class PointMap:
    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.points.shape[:2] != self.valid.shape or self.points.shape[-1] != 3:
            raise ValueError("pointmap must be HxWx3 with an HxW mask")


@dataclass(frozen=True)
class Sim3:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("Sim3 rotation quaternion must be unit")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", canonical_quat(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3":
        return cls()

    @classmethod
    def from_parts(cls, scale: float, R, t) -> "Sim3":
        return cls(scale, matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, pts) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.R.T) + self.translation

    def compose(self, other: "Sim3") -> "Sim3":
        """``self ∘ other``: apply ``other`` first."""
        q = canonical_quat(quat_mul(self.rotation, other.rotation))
        t = self.scale * (self.R @ other.translation) + self.translation
        return Sim3(self.scale * other.scale, q, t)

    def inverse(self) -> "Sim3":
        s_inv = 1.0 / self.scale
        return Sim3(s_inv, quat_conj(self.rotation), -s_inv * (self.R.T @ self.translation))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.translation
        return T

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}


# ---------------------------------------------------------------------------
# rays and pointmaps

def pixel_rays(intr: CameraIntrinsics, pose: CameraPose, u, v) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origin, direction) for continuous pixel coordinates ``u`` (x) and ``v`` (y)."""
    px, py = intr.principal_point
    f = intr.focal
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack([(u - px) / f, (v - py) / f, np.ones(np.broadcast(u, v).shape)], axis=-1)
    dirs = cam @ pose.R.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def pixel_grid(height: int, width: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates of a grid whose cells are ``stride`` full-res pixels wide."""
    us = (np.arange(width // stride) + 0.5) * stride
    vs = (np.arange(height // stride) + 0.5) * stride
    return np.meshgrid(us, vs)


def intrinsics_to_rays(intr: CameraIntrinsics, pose: CameraPose) -> RayMap:
    """Half-resolution ray map; each cell is the center of a 2x2 pixel block."""
    if intr.height % 2 or intr.width % 2:
        raise ValueError("ray maps need even image dimensions")
    u, v = pixel_grid(intr.height, intr.width, stride=2)
    return RayMap(*pixel_rays(intr, pose, u, v))


def full_res_rays(intr: CameraIntrinsics, pose: CameraPose) -> RayMap:
    u, v = pixel_grid(intr.height, intr.width)
    return RayMap(*pixel_rays(intr, pose, u, v))


def project(points, intr: CameraIntrinsics, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points to continuous pixel coordinates; returns ``(u, v, z)``."""
    cam = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.R
    z = cam[..., 2]
    px, py = intr.principal_point
    f = intr.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam[..., 0] / z * f + px
        v = cam[..., 1] / z * f + py
    return u, v, z


def unproject(depth: DepthMap, intr: CameraIntrinsics, pose: CameraPose) -> PointMap:
    if depth.values.shape != (intr.height, intr.width):
        raise ValueError(f"depth {depth.values.shape} does not match intrinsics "
                         f"{(intr.height, intr.width)}")
    rays = full_res_rays(intr, pose)
    pts = rays.origins + depth.values[..., None] * rays.directions
    pts = np.where(depth.valid[..., None], pts, 0.0)
    return PointMap(pts, depth.valid.copy())


def upsample_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` linear interpolation from a half-res axis to full res.

    Half-res sample ``k`` sits at full-res pixel coordinate ``2k + 1``; border pixels
    are linearly extrapolated from the two nearest samples, so affine fields are
    reproduced exactly.
    """
    if n < 2:
        raise ValueError("need at least two half-resolution samples")
    A = np.zeros((2 * n, n))
    pos = np.arange(2 * n) / 2.0 - 0.25
    lo = np.clip(np.floor(pos).astype(int), 0, n - 2)
    w = pos - lo
    A[np.arange(2 * n), lo] = 1.0 - w
    A[np.arange(2 * n), lo + 1] = w
    return A


def upsample_half(grid: np.ndarray) -> np.ndarray:
    """Bilinearly upsample an ``(h, w, c)`` grid to ``(2h, 2w, c)``."""
    Ah = upsample_matrix(grid.shape[0])
    Aw = upsample_matrix(grid.shape[1])
    return np.einsum("ih,hwc,jw->ijc", Ah, grid, Aw)


def pointmap_from_rays(depth: DepthMap, rays: RayMap) -> PointMap:
    H, W = depth.values.shape
    if rays.origins.shape[:2] != (H // 2, W // 2) or H % 2 or W % 2:
        raise ValueError(f"ray grid {rays.origins.shape[:2]} is not half of depth grid {(H, W)}")
    origins = upsample_half(rays.origins)
    dirs = upsample_half(rays.directions)
    pts = origins + depth.values[..., None] * dirs
    pts = np.where(depth.valid[..., None], pts, 0.0)
    return PointMap(pts, depth.valid.copy())


def sim3_apply(T: Sim3, pts: PointMap) -> PointMap:
    out = T.apply(pts.points.reshape(-1, 3)).reshape(pts.points.shape)
    return PointMap(out, pts.valid.copy())


def rigid_apply(pose: CameraPose, pts: PointMap) -> PointMap:
    out = pose.apply(pts.points.reshape(-1, 3)).reshape(pts.points.shape)
    return PointMap(out, pts.valid.copy())


def scene_scale(pointmaps: Sequence[PointMap]) -> float:
    """Factor that brings the mean norm of all valid points to one."""
    norms = [np.linalg.norm(pm.points[pm.valid], axis=-1) for pm in pointmaps]
    norms = np.concatenate(norms) if norms else np.zeros(0)
    if norms.size == 0:
        raise ValueError("scene has no valid points")
    mean = norms.mean()
    if not mean > 0:
        raise ValueError("all valid points sit at the origin")
    return float(1.0 / mean)


def normalize_scene(pointmaps: Sequence[PointMap], poses: Sequence[CameraPose],
                    displacements: Sequence[np.ndarray] = ()):
    """Rescale pointmaps, camera translations and displacement targets by ``s``.

    Returns ``(pointmaps, poses, displacements, s)``.
    """
    s = scene_scale(pointmaps)
    pms = [PointMap(pm.points * s, pm.valid.copy()) for pm in pointmaps]
    ps = [CameraPose(p.rotation, p.translation * s) for p in poses]
    ds = [np.asarray(d) * s for d in displacements]
    return pms, ps, ds, s
