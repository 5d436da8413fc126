"""Causal, frame-by-frame encoding with a latent cache.

Global layers of the encoder see only the current and past frames. Each ingested
frame leaves behind its final tokens and, for every global layer, the keys and
values it contributed; later frames attend to those cached entries instead of
re-running the encoder over the past.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .archive import ArchiveError, read_archive, write_archive
from .model import Encoder, GeometryPrediction, Model4D, MotionPrediction, SceneLatent


class LatentCache:
    """Append-only per-frame tokens and global-layer keys/values."""

    def __init__(self, model: Model4D):
        self.model = model
        self.global_layers = [i for i in range(model.cfg.encoder_layers) if Encoder.is_global(i)]
        self._tokens: list[torch.Tensor] = []           # each (M + 2, D)
        self._kv: list[dict[int, tuple]] = []           # per frame: layer -> (k, v), each (h, M + 2, d)
        self._times: list[float] = []
        self.image_shape: tuple[int, int] | None = None
        self.grid: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def times(self) -> list[float]:
        return list(self._times)

    def tokens(self, i: int) -> torch.Tensor:
        return self._tokens[i]

    def latent(self) -> SceneLatent:
        if not self._tokens:
            raise ValueError("cache is empty")
        return SceneLatent(torch.stack(self._tokens), self.image_shape, self.grid)

    def past_kv(self, layer: int):
        if not self._kv:
            return None
        k = torch.cat([f[layer][0] for f in self._kv], dim=-2)
        v = torch.cat([f[layer][1] for f in self._kv], dim=-2)
        return k.unsqueeze(0), v.unsqueeze(0)

    def _append(self, tokens, kv, t):
        # clones keep cached entries independent of any later in-place edits by callers
        self._tokens.append(tokens.detach().clone())
        self._kv.append({l: (k.detach().clone(), v.detach().clone()) for l, (k, v) in kv.items()})
        self._times.append(float(t))

    # -- persistence

    def save(self, path) -> Path:
        if not self._tokens:
            raise ValueError("cache is empty")
        arrays = {"tokens": torch.stack(self._tokens).numpy(), "times": np.asarray(self._times)}
        for l in self.global_layers:
            arrays[f"k{l}"] = torch.stack([f[l][0] for f in self._kv]).numpy()
            arrays[f"v{l}"] = torch.stack([f[l][1] for f in self._kv]).numpy()
        meta = {"model_config": self.model.cfg.to_dict(), "image_shape": list(self.image_shape),
                "grid": list(self.grid)}
        return write_archive(path, arrays, meta, kind="latent_cache")

    @classmethod
    def load(cls, path, model: Model4D) -> "LatentCache":
        arrays, manifest = read_archive(path)
        if manifest.get("kind") != "latent_cache":
            raise ArchiveError(f"{path} is not a latent cache")
        meta = manifest["meta"]
        if meta["model_config"] != model.cfg.to_dict():
            raise ArchiveError("latent cache was produced by a different model config")
        cache = cls(model)
        cache.image_shape, cache.grid = tuple(meta["image_shape"]), tuple(meta["grid"])
        dtype = next(model.parameters()).dtype
        t = lambda a: torch.from_numpy(a.copy()).to(dtype)
        for i, time in enumerate(arrays["times"]):
            kv = {l: (t(arrays[f"k{l}"][i]), t(arrays[f"v{l}"][i])) for l in cache.global_layers}
            cache._append(t(arrays["tokens"][i]), kv, time)
        return cache


@torch.no_grad()
def ingest_frame(cache: LatentCache, frame, time: float) -> LatentCache:
    """Encode one frame against the cached past and append it; returns ``cache``.

    ``time`` is the frame's normalized timestamp and must exceed every cached one.
    """
    if cache._times and not time > cache._times[-1]:
        raise ValueError(f"timestamp {time} does not follow {cache._times[-1]}")
    enc = cache.model.encoder
    dtype = next(cache.model.parameters()).dtype
    frame = torch.as_tensor(np.asarray(frame), dtype=dtype).unsqueeze(0)
    if cache.image_shape is not None and tuple(frame.shape[1:3]) != cache.image_shape:
        raise ValueError(f"frame shape {tuple(frame.shape[1:3])} differs from cached {cache.image_shape}")
    x, grid = enc.tokenize(frame, torch.tensor([time], dtype=torch.float64))
    own_kv = {}
    for i, layer in enumerate(enc.layers):
        if enc.is_global(i):
            x, (k, v) = layer(x, past_kv=cache.past_kv(i))
            own_kv[i] = (k[0], v[0])
        else:
            x, _ = layer(x)
    tokens = enc.norm(x)[0]
    cache.image_shape, cache.grid = tuple(frame.shape[1:3]), grid
    cache._append(tokens, own_kv, time)
    return cache


@torch.no_grad()
def query_streaming(cache: LatentCache, source: int, target: int) -> MotionPrediction:
    """Motion of ``source``'s pixels at ``target`` from cached tokens only."""
    n = len(cache)
    if not (0 <= source < n and 0 <= target < n):
        raise IndexError(f"frames {source}, {target} not both ingested (have {n})")
    return cache.model.motion_head(cache.latent(), source, [target])


@torch.no_grad()
def geometry_streaming(cache: LatentCache, frames=None) -> GeometryPrediction:
    return cache.model.geometry_head(cache.latent(), frames)


@torch.no_grad()
def causal_batch_encode(model: Model4D, frames, times) -> SceneLatent:
    """Reference path: one encoder pass with block-causal global attention."""
    dtype = next(model.parameters()).dtype
    return model.encoder(torch.as_tensor(np.asarray(frames), dtype=dtype),
                         torch.as_tensor(np.asarray(times), dtype=torch.float64), causal=True)
