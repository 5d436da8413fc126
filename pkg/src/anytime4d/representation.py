"""Factorized 4D frames: base geometry plus displacement fields keyed by target time."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import PointMap


@dataclass(frozen=True, order=True)
class Timestamp:
    frame_index: int
    num_frames: int

    def __post_init__(self):
        if not 0 <= self.frame_index < self.num_frames:
            raise ValueError(f"frame index {self.frame_index} outside [0, {self.num_frames})")

    @property
    def normalized_time(self) -> float:
        return self.frame_index / max(self.num_frames - 1, 1)


@dataclass(frozen=True)
class DisplacementField:
    deltas: np.ndarray
    valid: np.ndarray
    source: Timestamp
    target: Timestamp

    def __post_init__(self):
        if self.deltas.shape[:2] != self.valid.shape or self.deltas.shape[-1] != 3:
            raise ValueError("displacement must be HxWx3 with an HxW mask")
        if not np.all(np.isfinite(self.deltas[self.valid])):
            raise ValueError("non-finite displacement on valid pixels")


@dataclass
class FactorizedFrame4D:
    base: PointMap
    source: Timestamp
    displacements: dict[Timestamp, DisplacementField] = field(default_factory=dict)

    def add(self, disp: DisplacementField) -> None:
        if disp.source != self.source:
            raise ValueError("displacement source does not match the frame")
        if disp.deltas.shape != self.base.points.shape:
            raise ValueError("displacement shape does not match the base pointmap")
        if np.any(disp.valid & ~self.base.valid):
            raise ValueError("displacement marks pixels valid that the base does not")
        self.displacements[disp.target] = disp

    @property
    def targets(self) -> list[Timestamp]:
        return sorted(self.displacements)


def compose(frame: FactorizedFrame4D, target: Timestamp) -> PointMap:
    """Points of the source frame as they sit at ``target``."""
    disp = frame.displacements.get(target)
    if disp is None:
        if target == frame.source:
            return frame.base
        raise KeyError(f"no displacement for target frame {target.frame_index}")
    valid = frame.base.valid & disp.valid
    pts = np.where(valid[..., None], frame.base.points + disp.deltas, 0.0)
    return PointMap(pts, valid)


@dataclass(frozen=True)
class Trajectory:
    positions: list[tuple[Timestamp, np.ndarray]]
    source_pixel: tuple[int, int]
    visibility: list[bool] | None = None

    def __post_init__(self):
        ts = [t for t, _ in self.positions]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def as_array(self) -> np.ndarray:
        return np.stack([p for _, p in self.positions])


def extract_trajectory(frames: Sequence[FactorizedFrame4D], source: Timestamp, pixel: tuple[int, int],
                       targets: Sequence[Timestamp]) -> Trajectory:
    """Track pixel ``(u, v)`` of the source frame through ``targets``.

    The source position comes first, followed by the remaining targets in time order.
    """
    frame = next((f for f in frames if f.source == source), None)
    if frame is None:
        raise KeyError(f"no factorized frame for source {source.frame_index}")
    u, v = pixel
    if not frame.base.valid[v, u]:
        raise ValueError(f"pixel {pixel} is invalid in the source frame")
    base = frame.base.points[v, u]
    positions = [(source, base.copy())]
    for t in sorted(set(targets) - {source}):
        disp = frame.displacements.get(t)
        if disp is None:
            raise KeyError(f"no displacement for target frame {t.frame_index}")
        if not disp.valid[v, u]:
            raise ValueError(f"pixel {pixel} has no displacement to frame {t.frame_index}")
        positions.append((t, base + disp.deltas[v, u]))
    positions.sort(key=lambda p: p[0])
    return Trajectory(positions, (u, v))
