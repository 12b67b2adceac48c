"""Optical flow providers for the motion pathway.

Two providers fill the same slot: the generator's analytic flow (exact) and
an exhaustive-search block matcher that works from the frames alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .synthdata import FlowField


class FlowProviderKind(str, enum.Enum):
    ANALYTIC = "analytic"
    BLOCK = "block"


@dataclass(frozen=True)
class BlockParams:
    patch: int = 5
    radius: int = 4

    def validate(self) -> None:
        if self.patch < 3 or self.patch % 2 == 0:
            raise ValueError(f"patch size must be odd and >= 3, got {self.patch}")
        if self.radius < 0:
            raise ValueError(f"search radius must be non-negative, got {self.radius}")


def _candidates(radius: int) -> np.ndarray:
    """All (u, v) in the search window, ordered by the tie-break rule."""
    r = np.arange(-radius, radius + 1)
    uu, vv = np.meshgrid(r, r, indexing="ij")
    cand = np.stack([uu.ravel(), vv.ravel()], axis=1)
    # lexsort: last key is primary -> (|u|+|v|, u, v)
    order = np.lexsort((cand[:, 1], cand[:, 0], np.abs(cand).sum(axis=1)))
    return cand[order]


def estimate_flow(frame_t: np.ndarray, frame_t1: np.ndarray, params: BlockParams = BlockParams()) -> FlowField:
    """Integer block-matching flow from ``frame_t`` to ``frame_t1``.

    Non-overlapping ``patch``-sized blocks are matched by minimum SSD over
    every displacement within ``radius`` that keeps the block inside the
    second frame. Ties go to the smallest |u|+|v|, then the smallest (u, v)
    lexicographically. Pixels outside whole blocks get zero flow.
    """
    params.validate()
    a = np.asarray(frame_t, dtype=np.float64)
    b = np.asarray(frame_t1, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be equal 2-D arrays, got {a.shape} and {b.shape}")
    h, w = a.shape
    if params.radius >= min(h, w):
        raise ValueError(f"search radius {params.radius} must be smaller than the frame ({h}x{w})")
    p = params.patch
    ny, nx = h // p, w // p
    flow = FlowField.zeros(h, w)
    if ny == 0 or nx == 0:
        return flow
    blocks_a = a[: ny * p, : nx * p].reshape(ny, p, nx, p)
    best = np.full((ny, nx), np.inf)
    best_uv = np.zeros((ny, nx, 2), dtype=np.int64)
    by = np.arange(ny) * p
    bx = np.arange(nx) * p
    for u, v in _candidates(params.radius):
        # block (i, j) compares a[y:y+p, x:x+p] with b[y+v:y+v+p, x+u:x+u+p]
        valid = ((by + v >= 0) & (by + v + p <= h))[:, None] & ((bx + u >= 0) & (bx + u + p <= w))[None, :]
        if not valid.any():
            continue
        shifted = np.zeros((ny * p, nx * p))
        y0, y1 = max(0, -v), min(ny * p, h - v)
        x0, x1 = max(0, -u), min(nx * p, w - u)
        shifted[y0:y1, x0:x1] = b[y0 + v : y1 + v, x0 + u : x1 + u]
        ssd = ((blocks_a - shifted.reshape(ny, p, nx, p)) ** 2).sum(axis=(1, 3))
        ssd = np.where(valid, ssd, np.inf)
        # candidates arrive in tie-break order, so only strict improvements win
        better = ssd < best
        best = np.where(better, ssd, best)
        best_uv[better] = (u, v)
    u_img = np.repeat(np.repeat(best_uv[..., 0], p, axis=0), p, axis=1)
    v_img = np.repeat(np.repeat(best_uv[..., 1], p, axis=0), p, axis=1)
    flow.u[: ny * p, : nx * p] = u_img
    flow.v[: ny * p, : nx * p] = v_img
    return flow


def flow_to_image(flow: FlowField, bound: float) -> np.ndarray:
    """Map a flow field to a (2, H, W) float32 image in [0, 1]: clamp(x, -B, B) / 2B + 0.5."""
    if not bound > 0:
        raise ValueError(f"normalization bound must be positive, got {bound}")
    stacked = flow.stack().astype(np.float64)
    if not np.all(np.isfinite(stacked)):
        raise ValueError("flow must be finite")
    return (np.clip(stacked, -bound, bound) / (2.0 * bound) + 0.5).astype(np.float32)


def image_to_flow(image: np.ndarray, bound: float) -> FlowField:
    if not bound > 0:
        raise ValueError(f"normalization bound must be positive, got {bound}")
    img = np.asarray(image, dtype=np.float64)
    u, v = (img - 0.5) * (2.0 * bound)
    return FlowField(u, v)


def clip_flows(frames: np.ndarray, kind: FlowProviderKind | str, analytic=None,
               params: BlockParams = BlockParams()) -> list[FlowField]:
    """Flows between each adjacent pair of ``frames`` from the chosen provider."""
    kind = FlowProviderKind(kind)
    if kind is FlowProviderKind.ANALYTIC:
        if analytic is None:
            raise ValueError("analytic provider needs the generator's flow fields")
        if len(analytic) != len(frames) - 1:
            raise ValueError(f"expected {len(frames) - 1} analytic flows, got {len(analytic)}")
        return list(analytic)
    return [estimate_flow(frames[i], frames[i + 1], params) for i in range(len(frames) - 1)]
