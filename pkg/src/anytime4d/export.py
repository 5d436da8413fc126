"""Binary little-endian PLY export for point clouds and trajectories."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_EDGE = np.dtype([("vertex1", "<i4"), ("vertex2", "<i4")])


def _colors(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ply(path, points: np.ndarray, rgb: np.ndarray, edges: np.ndarray | None = None) -> Path:
    """``points`` (n, 3) with ``rgb`` in [0, 1]; optional ``edges`` (m, 2) vertex index pairs."""
    points = np.asarray(points).reshape(-1, 3)
    rgb = np.asarray(rgb).reshape(-1, 3)
    if len(points) != len(rgb):
        raise ValueError("one color per point")
    verts = np.empty(len(points), _VERTEX)
    for k, name in enumerate("xyz"):
        verts[name] = points[:, k]
    col = _colors(rgb)
    for k, name in enumerate(("red", "green", "blue")):
        verts[name] = col[:, k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue"]
    body = verts.tobytes()
    if edges is not None:
        e = np.empty(len(edges), _EDGE)
        e["vertex1"], e["vertex2"] = np.asarray(edges).T
        header += [f"element edge {len(e)}", "property int vertex1", "property int vertex2"]
        body += e.tobytes()
    path = Path(path)
    path.write_bytes(("\n".join(header + ["end_header"]) + "\n").encode("ascii") + body)
    return path


def read_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Inverse of :func:`write_ply`: ``(points, rgb_uint8, edges)``."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    counts = {ln.split()[1]: int(ln.split()[2]) for ln in header if ln.startswith("element")}
    nv = counts["vertex"]
    verts = np.frombuffer(raw, _VERTEX, nv, end)
    edges = None
    if "edge" in counts:
        e = np.frombuffer(raw, _EDGE, counts["edge"], end + nv * _VERTEX.itemsize)
        edges = np.stack([e["vertex1"], e["vertex2"]], axis=1)
    points = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    rgb = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1)
    return points, rgb, edges


def trajectory_polylines(tracks: np.ndarray, valid: np.ndarray, stride: int = 4):
    """Polyline vertices and edges for every ``stride``-th valid pixel's track.

    ``tracks``: (T, H, W, 3) positions ordered by target time. Colors run along a
    hue ramp from the first to the last target.
    """
    T = tracks.shape[0]
    sel = np.zeros(valid.shape, bool)
    sel[::stride, ::stride] = True
    sel &= valid
    pts = tracks[:, sel]                       # (T, P, 3)
    P = pts.shape[1]
    verts = pts.transpose(1, 0, 2).reshape(-1, 3)
    hue = np.tile(np.linspace(0.0, 1.0, T), P)
    rgb = np.stack([hue, 1.0 - np.abs(2 * hue - 1), 1.0 - hue], axis=1)
    base = np.arange(P)[:, None] * T
    edges = (base + np.arange(T - 1)[None]).reshape(-1)
    edges = np.stack([edges, edges + 1], axis=1) if T > 1 else np.zeros((0, 2), int)
    return verts, rgb, edges
