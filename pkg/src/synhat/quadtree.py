"""Hierarchical quadrant partition for radius queries over projected meters.

The tree is bulk-built by recursive quadrant splitting and keeps point
payloads in numpy arrays at the leaves, so a radius query touches only the
leaves whose cells intersect the query circle and filters them vectorised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


def equirectangular(coords: np.ndarray, origin: tuple[float, float]) -> np.ndarray:
    """Project (lat, lon) degrees to local (x, y) meters around `origin`.

    Accurate at city scale; distances are Euclidean in the projected plane.
    """
    coords = np.asarray(coords, dtype=float)
    lat0, lon0 = origin
    lat = np.radians(coords[..., 0])
    lon = np.radians(coords[..., 1])
    x = EARTH_RADIUS_M * (lon - np.radians(lon0)) * np.cos(np.radians(lat0))
    y = EARTH_RADIUS_M * (lat - np.radians(lat0))
    return np.stack([x, y], axis=-1)


class _Node:
    __slots__ = ("x0", "y0", "x1", "y1", "children", "idx", "pts")

    def __init__(self, x0, y0, x1, y1):
        self.x0, self.y0, self.x1, self.y1 = x0, y0, x1, y1
        self.children = None  # tuple of 4 _Node when split
        self.idx = None  # (k,) int indices at a leaf
        self.pts = None  # (k, 2) leaf point coordinates

    def circle_test(self, cx, cy, r):
        """-1 cell outside circle, 1 cell fully inside, 0 partial overlap."""
        nx = min(max(cx, self.x0), self.x1)
        ny = min(max(cy, self.y0), self.y1)
        if (nx - cx) ** 2 + (ny - cy) ** 2 > r * r:
            return -1
        fx = max(abs(self.x0 - cx), abs(self.x1 - cx))
        fy = max(abs(self.y0 - cy), abs(self.y1 - cy))
        if fx * fx + fy * fy <= r * r:
            return 1
        return 0


@dataclass
class Quadtree:
    root: _Node
    size: int
    leaf_capacity: int = 64
    max_depth: int = 16

    @classmethod
    def build(cls, points: np.ndarray, leaf_capacity: int = 64, max_depth: int = 16) -> "Quadtree":
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(points) == 0:
            root = _Node(0.0, 0.0, 1.0, 1.0)
            root.idx = np.empty(0, dtype=np.int64)
            root.pts = points
            return cls(root=root, size=0, leaf_capacity=leaf_capacity, max_depth=max_depth)
        pad = 1.0
        x0, y0 = points.min(axis=0) - pad
        x1, y1 = points.max(axis=0) + pad
        root = _Node(float(x0), float(y0), float(x1), float(y1))
        _split(root, np.arange(len(points), dtype=np.int64), points, 0,
               leaf_capacity, max_depth)
        return cls(root=root, size=len(points), leaf_capacity=leaf_capacity,
                   max_depth=max_depth)

    def query_radius(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices of all points with Euclidean distance <= radius."""
        cx, cy = float(center[0]), float(center[1])
        if radius < 0:
            raise ValueError("radius must be non-negative")
        hits: list[np.ndarray] = []
        _collect(self.root, cx, cy, float(radius), hits)
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(hits))


def _split(node: _Node, idx: np.ndarray, points: np.ndarray, depth: int,
           leaf_capacity: int, max_depth: int) -> None:
    if len(idx) <= leaf_capacity or depth >= max_depth:
        node.idx = idx
        node.pts = points[idx]
        return
    mx = 0.5 * (node.x0 + node.x1)
    my = 0.5 * (node.y0 + node.y1)
    pts = points[idx]
    right = pts[:, 0] > mx
    top = pts[:, 1] > my
    quads = (
        (~right & ~top, _Node(node.x0, node.y0, mx, my)),
        (right & ~top, _Node(mx, node.y0, node.x1, my)),
        (~right & top, _Node(node.x0, my, mx, node.y1)),
        (right & top, _Node(mx, my, node.x1, node.y1)),
    )
    children = []
    for mask, child in quads:
        _split(child, idx[mask], points, depth + 1, leaf_capacity, max_depth)
        children.append(child)
    node.children = tuple(children)


def _collect(node: _Node, cx: float, cy: float, r: float, hits: list) -> None:
    state = node.circle_test(cx, cy, r)
    if state < 0:
        return
    if node.children is None:
        if len(node.idx) == 0:
            return
        if state > 0:
            hits.append(node.idx)
        else:
            d2 = (node.pts[:, 0] - cx) ** 2 + (node.pts[:, 1] - cy) ** 2
            sel = d2 <= r * r
            if sel.any():
                hits.append(node.idx[sel])
        return
    if state > 0:
        _collect_all(node, hits)
        return
    for child in node.children:
        _collect(child, cx, cy, r, hits)


def _collect_all(node: _Node, hits: list) -> None:
    if node.children is None:
        if len(node.idx):
            hits.append(node.idx)
        return
    for child in node.children:
        _collect_all(child, hits)
