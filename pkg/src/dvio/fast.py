"""FAST-9 corner extraction on the 16-pixel Bresenham ring.

A pixel passes when some contiguous arc of at least 9 ring pixels is all
brighter than center + threshold or all darker than center - threshold
(strict). The score is the largest integer threshold at which the pixel
still passes, so candidate ordering is stable under threshold changes.
"""

from __future__ import annotations

import numpy as np

ARC_LENGTH = 9
RING = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)


def _arc_exists(flags: np.ndarray) -> np.ndarray:
    """flags: (16, N) bool. True where >= 9 contiguous (wrapping) are set."""
    bits = np.zeros(flags.shape[1], dtype=np.uint32)
    for i in range(16):
        bits |= flags[i].astype(np.uint32) << np.uint32(i)
    doubled = bits | (bits << np.uint32(16))
    run = doubled.copy()
    for shift in range(1, ARC_LENGTH):
        run &= doubled >> np.uint32(shift)
    return run != 0


def _arc_strength(diffs: np.ndarray) -> np.ndarray:
    """Max over 9-long wrapping arcs of the arc minimum, per column."""
    m = diffs
    m2 = np.minimum(m, np.roll(m, -1, axis=0))
    m4 = np.minimum(m2, np.roll(m2, -2, axis=0))
    m8 = np.minimum(m4, np.roll(m4, -4, axis=0))
    m9 = np.minimum(m8, np.roll(m, -8, axis=0))
    return m9.max(axis=0)


def detect_region(
    image: np.ndarray,
    threshold: int,
    x0: int,
    y0: int,
    x1: int,
    y1: int,
    blocked: np.ndarray | None = None,
) -> np.ndarray:
    """Corners with centers inside [x0,x1) x [y0,y1), clipped to the image
    interior (the ring needs a 3-pixel border). Masked centers are skipped.

    Returns an (N, 3) int64 array of (x, y, score) in row-major pixel order.
    """
    img = np.asarray(image)
    h, w = img.shape
    x0 = max(int(x0), 3)
    y0 = max(int(y0), 3)
    x1 = min(int(x1), w - 3)
    y1 = min(int(y1), h - 3)
    if x1 <= x0 or y1 <= y0:
        return np.empty((0, 3), dtype=np.int64)

    center = img[y0:y1, x0:x1].astype(np.int16)
    n = center.size
    diffs = np.empty((16, n), dtype=np.int16)
    for i, (dx, dy) in enumerate(RING):
        diffs[i] = (
            img[y0 + dy : y1 + dy, x0 + dx : x1 + dx].astype(np.int16) - center
        ).ravel()

    passing = _arc_exists(diffs > threshold) | _arc_exists(diffs < -threshold)
    if blocked is not None:
        passing &= ~blocked[y0:y1, x0:x1].ravel()
    idx = np.nonzero(passing)[0]
    if idx.size == 0:
        return np.empty((0, 3), dtype=np.int64)

    d = diffs[:, idx].astype(np.int32)
    strength = np.maximum(_arc_strength(d), _arc_strength(-d))
    out = np.empty((idx.size, 3), dtype=np.int64)
    out[:, 0] = x0 + idx % (x1 - x0)
    out[:, 1] = y0 + idx // (x1 - x0)
    out[:, 2] = strength - 1  # largest threshold still passing
    return out


def detect_cell(
    image: np.ndarray,
    cell: tuple[int, int, int, int],
    threshold: int,
    blocked: np.ndarray | None = None,
) -> np.ndarray:
    """Scored corners of one grid cell, best first.

    The cell rectangle bounds candidate centers; ring pixels are read from
    the shared image, so cell-edge corners see their neighbors (the padded
    halo). Ties break by (row, col) pixel order for determinism.
    """
    x0, y0, x1, y1 = cell
    cands = detect_region(image, threshold, x0, y0, x1, y1, blocked)
    if cands.shape[0] == 0:
        return cands
    order = np.lexsort((cands[:, 0], cands[:, 1], -cands[:, 2]))
    return cands[order]
