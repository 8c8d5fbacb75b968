"""Uniform grid index over axis-aligned boxes and circle/box blocking tests."""

from __future__ import annotations

import math

import numpy as np

MAX_CELLS_PER_AXIS = 256


def circle_hits_boxes(cx, cy, r, boxes):
    """Boolean mask of boxes that intersect the closed disc ``(cx, cy, r)``.

    The disc centre is clamped into each rectangle; touching counts.
    """
    px = np.clip(cx, boxes[:, 0], boxes[:, 2])
    py = np.clip(cy, boxes[:, 1], boxes[:, 3])
    return (px - cx) ** 2 + (py - cy) ** 2 <= r * r


class UniformGrid:
    """Buckets boxes (by every cell they overlap) and their centres.

    Args:
        boxes: ``(n, 4)`` array of ``x1, y1, x2, y2``.
        cell_size: defaults to the median box diagonal, floored so that the
            grid never exceeds ``MAX_CELLS_PER_AXIS`` cells per axis.
    """

    def __init__(self, boxes, cell_size=None):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.centers = np.column_stack([
            (self.boxes[:, 0] + self.boxes[:, 2]) / 2,
            (self.boxes[:, 1] + self.boxes[:, 3]) / 2,
        ]) if n else np.zeros((0, 2))
        if n:
            self.x0, self.y0 = self.boxes[:, 0].min(), self.boxes[:, 1].min()
            span = max(self.boxes[:, 2].max() - self.x0, self.boxes[:, 3].max() - self.y0)
        else:
            self.x0 = self.y0 = 0.0
            span = 1.0
        if cell_size is None:
            diag = np.hypot(self.boxes[:, 2] - self.boxes[:, 0],
                            self.boxes[:, 3] - self.boxes[:, 1]) if n else np.ones(1)
            cell_size = float(np.median(diag))
        floor = span / MAX_CELLS_PER_AXIS if span > 0 else 1.0
        self.cell = max(cell_size, floor)
        self.ncols = max(1, int(math.floor(span / self.cell)) + 1)
        self.nrows = self.ncols

        self._box_cells = {}
        lo = self._cell_of(self.boxes[:, 0], self.boxes[:, 1])
        hi = self._cell_of(self.boxes[:, 2], self.boxes[:, 3])
        for i in range(n):
            for gx in range(lo[0][i], hi[0][i] + 1):
                for gy in range(lo[1][i], hi[1][i] + 1):
                    self._box_cells.setdefault((gx, gy), []).append(i)
        self._point_cells = {}
        self.center_cell = np.column_stack(self._cell_of(self.centers[:, 0], self.centers[:, 1]))
        for i in range(n):
            self._point_cells.setdefault(tuple(self.center_cell[i]), []).append(i)

    def _cell_of(self, x, y):
        gx = np.clip(np.floor((np.asarray(x) - self.x0) / self.cell), 0, self.ncols - 1)
        gy = np.clip(np.floor((np.asarray(y) - self.y0) / self.cell), 0, self.nrows - 1)
        return gx.astype(np.int64), gy.astype(np.int64)

    def boxes_in_rect(self, x1, y1, x2, y2):
        """Indices of boxes registered in any cell overlapping the rectangle."""
        (gx1, gy1), (gx2, gy2) = self._cell_of(x1, y1), self._cell_of(x2, y2)
        if (gx2 - gx1 + 1) * (gy2 - gy1 + 1) >= len(self.boxes):
            return np.arange(len(self.boxes))
        found = []
        for gx in range(int(gx1), int(gx2) + 1):
            for gy in range(int(gy1), int(gy2) + 1):
                found.extend(self._box_cells.get((gx, gy), ()))
        return np.unique(np.asarray(found, dtype=np.int64))

    def centers_in_ring(self, gx, gy, ring):
        """Indices of centres whose cell is at Chebyshev distance ``ring``."""
        if ring == 0:
            return list(self._point_cells.get((gx, gy), ()))
        out = []
        for x in range(gx - ring, gx + ring + 1):
            if x < 0 or x >= self.ncols:
                continue
            if x in (gx - ring, gx + ring):
                ys = range(gy - ring, gy + ring + 1)
            else:
                ys = (gy - ring, gy + ring)
            for y in ys:
                out.extend(self._point_cells.get((x, y), ()))
        return out

    @property
    def max_ring(self):
        return max(self.ncols, self.nrows)
