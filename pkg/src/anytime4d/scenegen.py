"""Procedural dynamic scenes with exact ground truth.

Every pixel is resolved by analytic ray/primitive intersection with a per-pixel
z-buffer over bodies, recording the object-local surface point it hits. Since
bodies move rigidly, the displacement of that surface point to any other frame
follows from the body poses alone.

Randomness uses numpy's PCG64. A scene seed is expanded with
``SeedSequence(seed).spawn(4)`` into independent streams for layout, camera
path, body motion and textures, in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (CameraIntrinsics, CameraPose, DepthMap, PointMap, RayMap, canonical_quat,
                       intrinsics_to_rays, pixel_grid, pixel_rays, project, quat_from_axis_angle,
                       quat_mul, quat_to_matrix, unproject)
from .representation import DisplacementField, FactorizedFrame4D, Timestamp

SHAPES = ("sphere", "box", "quad")
MOTIONS = ("static", "constant_velocity", "sinusoidal", "piecewise_linear")
NEAR = 1e-6
FACING_EPS = 1e-3


def rng_streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# scene description

@dataclass
class MotionProgram:
    """Per-frame rigid poses (body-to-world), scalar-first quaternions."""
    kind: str
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        self.rotations = canonical_quat(self.rotations)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.rotations.shape[0] != self.translations.shape[0]:
            raise ValueError("rotation and translation tracks differ in length")
        if not (np.all(np.isfinite(self.rotations)) and np.all(np.isfinite(self.translations))):
            raise ValueError("non-finite motion program")

    def __len__(self) -> int:
        return len(self.translations)

    def pose(self, k: int) -> CameraPose:
        return CameraPose(self.rotations[k], self.translations[k])

    def matrices(self) -> np.ndarray:
        T = np.tile(np.eye(4), (len(self), 1, 1))
        T[:, :3, :3] = quat_to_matrix(self.rotations)
        T[:, :3, 3] = self.translations
        return T

    @property
    def is_static(self) -> bool:
        return bool(np.all(self.rotations == self.rotations[0]) and np.all(self.translations == self.translations[0]))

    @classmethod
    def static(cls, n: int, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)) -> "MotionProgram":
        return cls("static", np.tile(np.asarray(rotation, float), (n, 1)),
                   np.tile(np.asarray(translation, float), (n, 1)))

    @classmethod
    def constant_velocity(cls, n: int, rotation, translation, velocity, axis=(0, 1, 0),
                          angular_velocity: float = 0.0) -> "MotionProgram":
        k = np.arange(n, dtype=np.float64)
        trans = np.asarray(translation, float) + k[:, None] * np.asarray(velocity, float)
        rots = np.stack([quat_mul(quat_from_axis_angle(axis, angular_velocity * i), rotation) for i in k])
        return cls("constant_velocity", rots, trans)

    @classmethod
    def sinusoidal(cls, n: int, rotation, translation, amplitude, period: float, phase: float,
                   axis=(0, 1, 0), angular_amplitude: float = 0.0) -> "MotionProgram":
        k = np.arange(n, dtype=np.float64)
        wave = np.sin(2 * np.pi * k / period + phase) - np.sin(phase)
        trans = np.asarray(translation, float) + wave[:, None] * np.asarray(amplitude, float)
        rots = np.stack([quat_mul(quat_from_axis_angle(axis, angular_amplitude * w), rotation) for w in wave])
        return cls("sinusoidal", rots, trans)

    @classmethod
    def piecewise_linear(cls, n: int, rotation, waypoints, knots) -> "MotionProgram":
        k = np.arange(n, dtype=np.float64)
        waypoints = np.asarray(waypoints, float)
        trans = np.stack([np.interp(k, knots, waypoints[:, d]) for d in range(3)], axis=-1)
        return cls("piecewise_linear", np.tile(np.asarray(rotation, float), (n, 1)), trans)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rotations": self.rotations.tolist(),
                "translations": self.translations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionProgram":
        return cls(d["kind"], np.array(d["rotations"]), np.array(d["translations"]))


@dataclass
class Texture:
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    checker_freq: float
    noise_amp: float
    noise_freq: float
    noise_seed: int


@dataclass
class RigidBody:
    shape: str
    size: np.ndarray
    texture: Texture
    motion: MotionProgram

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if np.any(self.size <= 0):
            raise ValueError("body size must be positive")

    def to_dict(self) -> dict:
        return {"shape": self.shape, "size": self.size.tolist(), "texture": vars(self.texture),
                "motion": self.motion.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidBody":
        tex = Texture(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["texture"].items()})
        return cls(d["shape"], np.array(d["size"]), tex, MotionProgram.from_dict(d["motion"]))


@dataclass
class SceneSpec:
    seed: int
    num_frames: int
    resolution: tuple[int, int]
    vertical_fov: float
    objects: list[RigidBody]
    camera_path: MotionProgram
    background: list[RigidBody] = field(default_factory=list)

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("a scene needs at least two frames")
        for body in [*self.objects, *self.background]:
            if len(body.motion) != self.num_frames:
                raise ValueError("body motion does not cover every frame")
        if len(self.camera_path) != self.num_frames:
            raise ValueError("camera path does not cover every frame")

    @property
    def bodies(self) -> list[RigidBody]:
        return [*self.objects, *self.background]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "num_frames": self.num_frames, "resolution": list(self.resolution),
                "vertical_fov": self.vertical_fov, "objects": [b.to_dict() for b in self.objects],
                "background": [b.to_dict() for b in self.background],
                "camera_path": self.camera_path.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["seed"]), int(d["num_frames"]), tuple(d["resolution"]), float(d["vertical_fov"]),
                   [RigidBody.from_dict(b) for b in d["objects"]], MotionProgram.from_dict(d["camera_path"]),
                   [RigidBody.from_dict(b) for b in d["background"]])


@dataclass(frozen=True)
class Primitive:
    """Shape-only view of a body, enough for ray casting."""
    shape: str
    size: np.ndarray


def _random_texture(rng: np.random.Generator, freq=(1.5, 4.0)) -> Texture:
    a = rng.uniform(0.1, 0.95, 3)
    b = np.clip(1.0 - a + rng.uniform(-0.2, 0.2, 3), 0.05, 0.95)
    return Texture(tuple(a.tolist()), tuple(b.tolist()), float(rng.uniform(*freq)),
                   float(rng.uniform(0.05, 0.25)), float(rng.uniform(1.0, 3.0) * freq[0]),
                   int(rng.integers(2**31)))


def _random_motion(rng: np.random.Generator, n: int, start, speed: float) -> MotionProgram:
    rot0 = quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
    kind = MOTIONS[rng.integers(1, len(MOTIONS))]
    direction = rng.normal(size=3)
    direction[2] *= 0.5
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    if kind == "constant_velocity":
        return MotionProgram.constant_velocity(n, rot0, start, direction * speed, axis,
                                               rng.uniform(-0.15, 0.15))
    if kind == "sinusoidal":
        period = rng.uniform(max(n, 4) * 0.6, max(n, 4) * 1.5)
        amp = direction * speed * period / (2 * np.pi)
        return MotionProgram.sinusoidal(n, rot0, start, amp, period, rng.uniform(0, 2 * np.pi), axis,
                                        rng.uniform(-0.6, 0.6))
    n_knots = 3
    knots = np.linspace(0, n - 1, n_knots)
    steps = rng.normal(size=(n_knots - 1, 3))
    steps /= np.linalg.norm(steps, axis=1, keepdims=True)
    seg = (n - 1) / (n_knots - 1)
    waypoints = np.concatenate([[start], start + np.cumsum(steps * speed * seg, axis=0)])
    return MotionProgram.piecewise_linear(n, rot0, waypoints, knots)


def random_spec(seed: int, num_frames: int = 6, resolution: tuple[int, int] = (64, 64),
                num_objects: tuple[int, int] = (1, 3), object_speed: tuple[float, float] = (0.08, 0.2),
                camera_speed: float = 0.04, background: str = "plane", static: bool = False) -> SceneSpec:
    """Sample a scene: a few moving bodies in front of a textured backdrop.

    ``static=True`` freezes every body and the camera.
    """
    if background not in ("plane", "sky"):
        raise ValueError(f"background must be 'plane' or 'sky', got {background!r}")
    layout, cam_rng, motion_rng, tex_rng = rng_streams(seed)
    n = num_frames
    H, W = resolution
    fov = float(layout.uniform(np.radians(50), np.radians(70)))
    tan_v = np.tan(fov / 2)
    tan_h = tan_v * W / H

    objects = []
    for _ in range(int(layout.integers(num_objects[0], num_objects[1] + 1))):
        shape = SHAPES[layout.integers(len(SHAPES))]
        z = layout.uniform(2.5, 4.5)
        start = np.array([layout.uniform(-0.5, 0.5) * z * tan_h, layout.uniform(-0.4, 0.4) * z * tan_v, z])
        if shape == "sphere":
            size = [layout.uniform(0.45, 0.8)]
        elif shape == "box":
            size = layout.uniform(0.3, 0.6, 3)
        else:
            size = layout.uniform(0.4, 0.7, 2)
        speed = 0.0 if static else motion_rng.uniform(*object_speed)
        motion = (MotionProgram.static(n, quat_from_axis_angle(layout.normal(size=3), layout.uniform(0, np.pi)), start)
                  if static else _random_motion(motion_rng, n, start, speed))
        objects.append(RigidBody(shape, size, _random_texture(tex_rng), motion))

    if static:
        camera = MotionProgram.static(n)
    else:
        kind = ("static", "constant_velocity", "sinusoidal")[cam_rng.integers(3)]
        if kind == "static":
            camera = MotionProgram.static(n)
        elif kind == "constant_velocity":
            v = cam_rng.normal(size=3)
            v = v / np.linalg.norm(v) * camera_speed
            camera = MotionProgram.constant_velocity(n, (1, 0, 0, 0), (0, 0, 0), v, (0, 1, 0),
                                                     cam_rng.uniform(-0.02, 0.02))
        else:
            amp = cam_rng.normal(size=3)
            amp = amp / np.linalg.norm(amp) * camera_speed * n / (2 * np.pi)
            camera = MotionProgram.sinusoidal(n, (1, 0, 0, 0), (0, 0, 0), amp, float(n), 0.0,
                                              (0, 1, 0), cam_rng.uniform(-0.04, 0.04))

    # backdrop sized so that it fills the view under the camera motion
    far = 20.0 if background == "sky" else float(layout.uniform(6.0, 8.0))
    margin = 2.0 + camera_speed * n * 4
    wall = RigidBody("quad", [far * tan_h * 1.6 + margin, far * tan_v * 1.6 + margin],
                     _random_texture(tex_rng, (0.3, 0.7)), MotionProgram.static(n, translation=(0.0, 0.0, far)))
    backdrop = [wall]
    if background == "plane":
        floor_y = float(layout.uniform(1.0, 1.6))
        half_depth = far / 2 + 1.0
        floor = RigidBody("quad", [far * tan_h * 1.6 + margin, half_depth], _random_texture(tex_rng, (0.5, 1.0)),
                          MotionProgram.static(n, quat_from_axis_angle((1, 0, 0), np.pi / 2),
                                               (0.0, floor_y, far - half_depth)))
        backdrop.append(floor)
    return SceneSpec(seed, n, (H, W), fov, objects, camera, backdrop)


# ---------------------------------------------------------------------------
# ray casting

def _intersect_local(shape: str, size: np.ndarray, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Nearest ray parameter > NEAR in body-local coordinates, ``inf`` on miss."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if shape == "sphere":
            r = size[0]
            a = np.einsum("...i,...i", d, d)
            b = 2.0 * np.einsum("...i,...i", o, d)
            c = np.einsum("...i,...i", o, o) - r * r
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0.0))
            t = (-b - sq) / (2 * a)
            t = np.where((disc >= 0) & (t > NEAR), t, np.inf)
        elif shape == "box":
            t1 = (-size - o) / d
            t2 = (size - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            t = np.where((tmax >= tmin) & (tmin > NEAR), tmin, np.inf)
        else:
            t = -o[..., 2] / d[..., 2]
            p = o + t[..., None] * d
            inside = (np.abs(p[..., 0]) <= size[0]) & (np.abs(p[..., 1]) <= size[1])
            t = np.where(inside & (t > NEAR) & np.isfinite(t), t, np.inf)
    return t


def local_normal(shape: str, size: np.ndarray, p: np.ndarray) -> np.ndarray:
    if shape == "sphere":
        return p / np.linalg.norm(p, axis=-1, keepdims=True)
    if shape == "box":
        rel = np.abs(p) / size
        axis = np.argmax(rel, axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, axis[..., None], np.take_along_axis(np.sign(p), axis[..., None], -1), -1)
        return n
    n = np.zeros_like(p)
    n[..., 2] = 1.0
    return n


def cast_rays(prims: Sequence[Primitive], body_poses: np.ndarray, origins: np.ndarray,
              dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffered cast against bodies posed by ``body_poses`` ``(B, 4, 4)``.

    Returns ``(t, body_id, local_point)``; ``t`` is the ray parameter (z-depth for
    directions with unit camera z), ``body_id`` is -1 on a miss.
    """
    shape = origins.shape[:-1]
    best_t = np.full(shape, np.inf)
    best_id = np.full(shape, -1, dtype=np.int32)
    best_local = np.zeros(shape + (3,))
    for b, prim in enumerate(prims):
        R = body_poses[b, :3, :3]
        tr = body_poses[b, :3, 3]
        o_l = (origins - tr) @ R
        d_l = dirs @ R
        t = _intersect_local(prim.shape, prim.size, o_l, d_l)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, b, best_id)
        best_local = np.where(closer[..., None], o_l + t[..., None] * d_l, best_local)
    return best_t, best_id, best_local


# ---------------------------------------------------------------------------
# shading

def _value_noise(p: np.ndarray, seed: int, freq: float) -> np.ndarray:
    table = np.random.Generator(np.random.PCG64(seed)).uniform(size=(17, 17, 17))
    q = p * freq
    cell = np.floor(q)
    f = q - cell
    i = cell.astype(np.int64) % 16
    f = f * f * (3 - 2 * f)
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[..., 0] if dx else 1 - f[..., 0]) * (f[..., 1] if dy else 1 - f[..., 1])
                     * (f[..., 2] if dz else 1 - f[..., 2]))
                out = out + w * table[i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz]
    return out


def shade(body: RigidBody, local: np.ndarray, normal_world: np.ndarray) -> np.ndarray:
    tex = body.texture
    if body.shape == "sphere":
        n = local / np.linalg.norm(local, axis=-1, keepdims=True)
        uv = np.stack([np.arctan2(n[..., 1], n[..., 0]) / np.pi, np.arcsin(np.clip(n[..., 2], -1, 1)) / np.pi * 2], -1)
        parity = np.floor(uv[..., 0] * tex.checker_freq * 2) + np.floor(uv[..., 1] * tex.checker_freq)
    else:
        cells = np.floor(local * tex.checker_freq)
        parity = cells.sum(axis=-1)
    mix = (parity % 2)[..., None]
    color = (1 - mix) * np.asarray(tex.color_a) + mix * np.asarray(tex.color_b)
    noise = _value_noise(local, tex.noise_seed, tex.noise_freq)[..., None] - 0.5
    light = np.array([0.3, -0.8, -0.5])
    light = light / np.linalg.norm(light)
    lambert = np.abs(normal_world @ light)[..., None]
    return np.clip(color * (0.45 + 0.55 * lambert) + tex.noise_amp * noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# ground truth

@dataclass
class GroundTruthBundle:
    frames: np.ndarray            # (N, H, W, 3) float32 in [0, 1]
    depth: np.ndarray             # (N, H, W) z-depth, 0 where invalid
    valid: np.ndarray             # (N, H, W) bool
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    body_ids: np.ndarray          # (N, H, W) int32, -1 where invalid
    local_points: np.ndarray      # (N, H, W, 3) body-local surface points
    body_poses: np.ndarray        # (B, N, 4, 4) body-to-world
    prims: list[Primitive]
    frame_indices: np.ndarray = None  # original frame index of each frame
    seed: int = 0

    def __post_init__(self):
        if self.frame_indices is None:
            self.frame_indices = np.arange(len(self.poses))

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape[1:]

    def timestamp(self, i: int) -> Timestamp:
        return Timestamp(i, self.num_frames)

    def depth_map(self, i: int) -> DepthMap:
        return DepthMap(self.depth[i], self.valid[i])

    def base(self, i: int) -> PointMap:
        return unproject(self.depth_map(i), self.intrinsics, self.poses[i])

    def rays(self, i: int) -> RayMap:
        return intrinsics_to_rays(self.intrinsics, self.poses[i])

    def world_points_at(self, i: int, tau: int) -> np.ndarray:
        """Position at frame ``tau`` of the surface point seen by each pixel of frame ``i``."""
        ids = np.maximum(self.body_ids[i], 0)
        T = self.body_poses[ids, tau]
        return np.einsum("hwij,hwj->hwi", T[..., :3, :3], self.local_points[i]) + T[..., :3, 3]

    def displacement(self, i: int, tau: int) -> DisplacementField:
        valid = self.valid[i]
        if tau == i:
            deltas = np.zeros(self.local_points[i].shape)
        else:
            deltas = self.world_points_at(i, tau) - self.world_points_at(i, i)
            deltas = np.where(valid[..., None], deltas, 0.0)
        return DisplacementField(deltas, valid.copy(), self.timestamp(i), self.timestamp(tau))

    def factorized(self, i: int, targets: Sequence[int] | None = None) -> FactorizedFrame4D:
        targets = range(self.num_frames) if targets is None else targets
        frame = FactorizedFrame4D(self.base(i), self.timestamp(i))
        for tau in targets:
            frame.add(self.displacement(i, tau))
        return frame

    def body_moving(self) -> np.ndarray:
        return ~np.all(self.body_poses == self.body_poses[:, :1], axis=(1, 2, 3))

    def dynamic_mask(self, i: int) -> np.ndarray:
        return self.valid[i] & self.body_moving()[np.maximum(self.body_ids[i], 0)]

    def visibility(self, i: int, tau: int) -> np.ndarray:
        """Whether each surface point of frame ``i`` is in view and unoccluded at ``tau``."""
        return visible_at(self, i, tau)[0]

    # -- transforms of the whole bundle

    def subset(self, indices: Sequence[int]) -> "GroundTruthBundle":
        idx = np.asarray(indices)
        return replace(self, frames=self.frames[idx], depth=self.depth[idx], valid=self.valid[idx],
                       poses=[self.poses[i] for i in idx], body_ids=self.body_ids[idx],
                       local_points=self.local_points[idx], body_poses=self.body_poses[:, idx],
                       frame_indices=self.frame_indices[idx])

    def transformed(self, pose: CameraPose) -> "GroundTruthBundle":
        """Apply a rigid transform to the world frame."""
        poses = [pose.compose(p) for p in self.poses]
        body_poses = np.einsum("ij,bnjk->bnik", pose.matrix(), self.body_poses)
        return replace(self, poses=poses, body_poses=body_poses)

    def recentered(self) -> "GroundTruthBundle":
        """Re-express the world in the first camera's frame."""
        out = self.transformed(self.poses[0].inverse())
        out.poses[0] = CameraPose.identity()
        return out

    def scaled(self, s: float) -> "GroundTruthBundle":
        poses = [CameraPose(p.rotation, p.translation * s) for p in self.poses]
        body_poses = self.body_poses.copy()
        body_poses[..., :3, 3] *= s
        prims = [Primitive(p.shape, p.size * s) for p in self.prims]
        return replace(self, depth=self.depth * s, poses=poses, local_points=self.local_points * s,
                       body_poses=body_poses, prims=prims)

    def scene_scale(self) -> float:
        from .geometry import scene_scale
        return scene_scale([self.base(i) for i in range(self.num_frames)])

    def normalized(self) -> tuple["GroundTruthBundle", float]:
        s = self.scene_scale()
        return self.scaled(s), s


def visible_at(bundle: GroundTruthBundle, i: int, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Visibility of frame ``i``'s surface points at ``tau`` plus the re-cast world point.

    A point is visible when it projects inside frame ``tau``, faces the camera,
    and the ray through its projection hits the same body first. The second
    output is ``origin + t * direction`` of that ray (NaN where not visible).
    """
    H, W = bundle.shape
    valid = bundle.valid[i]
    X = bundle.world_points_at(i, tau)
    pose = bundle.poses[tau]
    u, v, z = project(X, bundle.intrinsics, pose)
    inside = valid & (z > NEAR) & (u >= 0) & (u < W) & (v >= 0) & (v < H)

    ids = np.maximum(bundle.body_ids[i], 0)
    T = bundle.body_poses[ids, tau]
    normals = np.zeros_like(X)
    for b, prim in enumerate(bundle.prims):
        m = bundle.body_ids[i] == b
        if m.any():
            normals[m] = local_normal(prim.shape, prim.size, bundle.local_points[i][m])
    n_world = np.einsum("hwij,hwj->hwi", T[..., :3, :3], normals)
    view = pose.translation - X
    view /= np.maximum(np.linalg.norm(view, axis=-1, keepdims=True), 1e-12)
    cos = np.einsum("hwi,hwi->hw", n_world, view)
    two_sided = np.array([p.shape == "quad" for p in bundle.prims])[ids]
    facing = np.where(two_sided, np.abs(cos), cos) > FACING_EPS

    o, d = pixel_rays(bundle.intrinsics, pose, np.where(inside, u, 0.0), np.where(inside, v, 0.0))
    t, hit, _ = cast_rays(bundle.prims, bundle.body_poses[:, tau], o, d)
    vis = inside & facing & (hit == bundle.body_ids[i])
    recast = np.where(vis[..., None], o + t[..., None] * d, np.nan)
    return vis, recast


def render_frame(spec: SceneSpec, k: int, intr: CameraIntrinsics, pose: CameraPose,
                 prims: Sequence[Primitive], body_poses: np.ndarray):
    H, W = spec.resolution
    u, v = pixel_grid(H, W)
    o, d = pixel_rays(intr, pose, u, v)
    t, ids, local = cast_rays(prims, body_poses[:, k], o, d)
    valid = ids >= 0
    image = np.zeros((H, W, 3))
    for b, body in enumerate(spec.bodies):
        m = ids == b
        if not m.any():
            continue
        n_local = local_normal(body.shape, body.size, local[m])
        n_world = n_local @ body_poses[b, k, :3, :3].T
        image[m] = shade(body, local[m], n_world)
    depth = np.where(valid, t, 0.0)
    local = np.where(valid[..., None], local, 0.0)
    return image, depth, valid, ids.astype(np.int32), local


def generate(spec: SceneSpec) -> GroundTruthBundle:
    H, W = spec.resolution
    intr = CameraIntrinsics(W, H, spec.vertical_fov)
    prims = [Primitive(b.shape, b.size) for b in spec.bodies]
    body_poses = np.stack([b.motion.matrices() for b in spec.bodies])
    cam0 = spec.camera_path.pose(0).inverse()
    # world frame = first camera
    body_poses = np.einsum("ij,bnjk->bnik", cam0.matrix(), body_poses)
    poses = [cam0.compose(spec.camera_path.pose(k)) for k in range(spec.num_frames)]
    poses[0] = CameraPose.identity()

    out = [render_frame(spec, k, intr, poses[k], prims, body_poses) for k in range(spec.num_frames)]
    frames, depth, valid, ids, local = (np.stack(x) for x in zip(*out))
    return GroundTruthBundle(frames.astype(np.float32), depth, valid, poses, intr, ids, local,
                             body_poses, prims, seed=spec.seed)


# ---------------------------------------------------------------------------
# augmentation and clip sampling

def augment(frames: np.ndarray, seed: int, p_blur: float = 0.2, p_jitter: float = 0.1,
            p_gray: float = 0.05) -> np.ndarray:
    """Photometric augmentation, each op drawn independently per frame."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = np.array(frames, dtype=np.float32, copy=True)
    for k in range(len(out)):
        img = out[k].astype(np.float64)
        draws = rng.uniform(size=3)
        sigma = rng.uniform(0.1, 1.5)
        jitter = rng.uniform(0.6, 1.4, size=3)
        if draws[0] < p_blur:
            img = gaussian_filter(img, sigma=(sigma, sigma, 0))
        if draws[1] < p_jitter:
            brightness, contrast, saturation = jitter
            img = img * brightness
            img = (img - img.mean()) * contrast + img.mean()
            gray = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
            img = (img - gray) * saturation + gray
        if draws[2] < p_gray:
            img = np.repeat((img @ np.array([0.299, 0.587, 0.114]))[..., None], 3, axis=-1)
        out[k] = np.clip(img, 0.0, 1.0)
    return out


def sample_clip(bundle: GroundTruthBundle, seed: int, length: int | None = None,
                stride: int | None = None, start: int | None = None,
                max_stride: int = 5) -> GroundTruthBundle:
    """Frames in temporal order at a random stride, re-centered on the clip's first camera."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = bundle.num_frames
    length = n if length is None else length
    if length < 1 or length > n:
        raise ValueError(f"cannot take {length} frames from a {n}-frame sequence")
    if stride is None:
        top = min(max_stride, (n - 1) // max(length - 1, 1)) if length > 1 else 1
        stride = int(rng.integers(1, max(top, 1) + 1))
    span = (length - 1) * stride
    if span >= n:
        raise ValueError(f"stride {stride} x {length} frames exceeds {n}")
    if start is None:
        start = int(rng.integers(0, n - span))
    idx = start + stride * np.arange(length)
    return bundle.subset(idx).recentered()


# ---------------------------------------------------------------------------
# persistence

def save_bundle(bundle: GroundTruthBundle, path, spec: SceneSpec | None = None):
    from .archive import write_archive
    arrays = {
        "frames": bundle.frames, "depth": bundle.depth, "valid": bundle.valid,
        "poses": np.stack([p.to_array() for p in bundle.poses]),
        "body_ids": bundle.body_ids.astype(np.int32), "local_points": bundle.local_points,
        "body_poses": bundle.body_poses, "frame_indices": bundle.frame_indices.astype(np.int32),
    }
    meta = {"intrinsics": bundle.intrinsics.to_dict(), "seed": int(bundle.seed),
            "prims": [{"shape": p.shape, "size": p.size.tolist()} for p in bundle.prims],
            "spec": spec.to_dict() if spec is not None else None}
    return write_archive(path, arrays, meta, kind="sequence")


def load_bundle(path) -> GroundTruthBundle:
    from .archive import ArchiveError, read_archive
    arrays, manifest = read_archive(path)
    if manifest.get("kind") != "sequence":
        raise ArchiveError(f"{path} holds a {manifest.get('kind')!r} archive, not a sequence")
    meta = manifest["meta"]
    return GroundTruthBundle(
        frames=arrays["frames"], depth=arrays["depth"], valid=arrays["valid"],
        poses=[CameraPose.from_array(p) for p in arrays["poses"]],
        intrinsics=CameraIntrinsics.from_dict(meta["intrinsics"]),
        body_ids=arrays["body_ids"], local_points=arrays["local_points"], body_poses=arrays["body_poses"],
        prims=[Primitive(p["shape"], np.array(p["size"], dtype=np.float64)) for p in meta["prims"]],
        frame_indices=arrays["frame_indices"].astype(np.int64), seed=meta["seed"])
