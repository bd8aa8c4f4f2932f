"""Optical flow: block-matching estimation, training-time perturbation and the binary flow file.

A flow field is a float32 array ``(f - 1, h, w, 2)`` holding the forward
displacement ``(dx, dy)`` in pixels/frame from frame ``i`` to ``i + 1``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from . import _flowkernel_py
from .errors import CorruptFileError, InvalidRangeError, MissingFileError, ShapeMismatchError, TooFewFramesError

try:
    if os.environ.get("VCTRANSFER_PURE_PYTHON"):
        raise ImportError("compiled kernel disabled by VCTRANSFER_PURE_PYTHON")
    from . import _flowkernel as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"

FLOW_MAGIC = b"FLOW"
_HEADER = struct.Struct("<4sIII")


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def block_match(a: np.ndarray, b: np.ndarray, block: int, radius: int,
                backend: Optional[str] = None) -> np.ndarray:
    """Per-tile integer displacement ``(nby, nbx, 2)`` taking frame ``a`` to frame ``b``."""
    backend = backend or BACKEND
    a = _as_int_frame(a)
    b = _as_int_frame(b)
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled flow kernel is not built")
        return _compiled.block_match(a, b, int(block), int(radius))
    if backend == "python":
        return _flowkernel_py.block_match(a, b, int(block), int(radius))
    raise ValueError(f"unknown backend {backend!r}")


def _as_int_frame(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[..., None]
    if not np.issubdtype(x.dtype, np.integer):
        x = np.rint(np.clip(x, 0, 255))
    return np.ascontiguousarray(x, dtype=np.int32)


def estimate_flow(video: np.ndarray, block: int = 4, search_radius: int = 3,
                  backend: Optional[str] = None) -> np.ndarray:
    """Exhaustive block matching between each adjacent pair, broadcast to pixels."""
    video = np.asarray(video)
    if video.ndim < 3 or video.shape[0] < 2:
        raise TooFewFramesError("need at least two frames to estimate flow")
    f, h, w = video.shape[:3]
    if not 0 < block <= min(h, w):
        raise InvalidRangeError(f"block must be in (0, {min(h, w)}], got {block}")
    if search_radius < 0:
        raise InvalidRangeError("search_radius must be >= 0")
    flow = np.zeros((f - 1, h, w, 2), dtype=np.float32)
    for i in range(f - 1):
        tiles = block_match(video[i], video[i + 1], block, search_radius, backend)
        dense = np.repeat(np.repeat(tiles, block, axis=0), block, axis=1)
        flow[i] = dense[:h, :w]
    return flow


def perturb_flow(flow: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with standard deviation ``sigma * std(flow)``."""
    if sigma < 0:
        raise InvalidRangeError(f"sigma must be >= 0, got {sigma}")
    flow = np.asarray(flow, dtype=np.float32)
    scale = sigma * float(np.std(flow, dtype=np.float64))
    if scale == 0.0:
        return flow.copy()
    return (flow + rng.normal(0.0, scale, size=flow.shape)).astype(np.float32)


def pad_flow(flow: np.ndarray) -> np.ndarray:
    """Repeat the last slot so a ``(f-1)``-slot field lines up with ``f`` frames."""
    return np.concatenate([flow, flow[-1:]], axis=0)


def save_flow(flow: np.ndarray, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 4 or flow.shape[-1] != 2:
        raise ShapeMismatchError(f"flow must be (pairs, h, w, 2), got {flow.shape}")
    pairs, h, w, _ = flow.shape
    data = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FLOW_MAGIC, pairs, h, w) + data)


def load_flow(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing flow file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, pairs, h, w = _HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    expected = pairs * h * w * 2 * 4
    if len(raw) - _HEADER.size != expected:
        raise CorruptFileError(f"{path}: expected {expected} payload bytes, found {len(raw) - _HEADER.size}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(pairs, h, w, 2)
    return arr.astype(np.float32)
