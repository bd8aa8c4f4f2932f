"""Numpy block matching, used when the compiled kernel is unavailable.

For every ``block x block`` tile of frame ``a`` the displacement ``(dx, dy)``
within ``radius`` minimising the mean absolute difference against frame ``b``
is chosen. Only in-frame pixels count; candidates overlapping the frame by
less than half the tile are skipped. Candidates are visited in order of
increasing length and only a strictly better cost replaces the incumbent, so
ties resolve to the shortest displacement. Costs are compared as exact
integer ratios.
"""
import numpy as np


def candidate_offsets(radius: int) -> np.ndarray:
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offs.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))
    return np.asarray(offs, dtype=np.int32)


def _tile_sum(x: np.ndarray, block: int, nby: int, nbx: int) -> np.ndarray:
    h, w = x.shape
    pad = np.zeros((nby * block, nbx * block), dtype=np.int64)
    pad[:h, :w] = x
    return pad.reshape(nby, block, nbx, block).sum(axis=(1, 3))


def block_match(a: np.ndarray, b: np.ndarray, block: int, radius: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    h, w = a.shape[:2]
    nby, nbx = -(-h // block), -(-w // block)
    area = _tile_sum(np.ones((h, w), dtype=np.int64), block, nby, nbx)
    best_cost = np.full((nby, nbx), -1, dtype=np.int64)
    best_count = np.ones((nby, nbx), dtype=np.int64)
    out = np.zeros((nby, nbx, 2), dtype=np.int32)
    for dx, dy in candidate_offsets(radius):
        dx, dy = int(dx), int(dy)
        # valid target pixels: 0 <= y+dy < h, 0 <= x+dx < w
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        diff = np.zeros((h, w), dtype=np.int64)
        valid = np.zeros((h, w), dtype=np.int64)
        if ys1 > ys0 and xs1 > xs0:
            d = np.abs(a[ys0:ys1, xs0:xs1] - b[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx])
            diff[ys0:ys1, xs0:xs1] = d.sum(axis=-1)
            valid[ys0:ys1, xs0:xs1] = 1
        cost = _tile_sum(diff, block, nby, nbx)
        count = _tile_sum(valid, block, nby, nbx)
        ok = 2 * count >= area
        better = ok & ((best_cost < 0) | (cost * best_count < best_cost * count))
        best_cost = np.where(better, cost, best_cost)
        best_count = np.where(better, count, best_count)
        out[better] = (dx, dy)
    return out
