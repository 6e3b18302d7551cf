"""Vector document model and parameter flattening.

A document is a stack of rounds; each round is an ordered list of filled,
closed cubic-Bezier elements. Documents are immutable: every operation here
returns a new value and the coordinate/colour arrays are marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SHAPE = "shape"
COLOR = "color"
BOTH = "both"
GROUPS = (SHAPE, COLOR, BOTH)


def _frozen(a, shape_tail=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape_tail is not None and arr.shape[1:] != shape_tail:
        raise ValueError(f"expected trailing shape {shape_tail}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in vector data")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in canvas pixels (x, y is the top-left corner)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rectangle must have positive area, got {self}")

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    def intersects(self, x0, y0, x1, y1) -> bool:
        return x0 <= self.x1 and x1 >= self.x and y0 <= self.y1 and y1 >= self.y

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True, eq=False)
class CubicPath:
    """Closed path of k cubic segments stored as m = 3k control points.

    Segment i uses points 3i, 3i+1, 3i+2 and 3(i+1) mod m, so the last
    segment ends on point 0.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points, (2,))
        if pts.ndim != 2 or len(pts) < 3 or len(pts) % 3:
            raise ValueError(f"closed cubic path needs 3k >= 3 points, got {len(pts)}")
        object.__setattr__(self, "points", pts)

    @property
    def n_segments(self) -> int:
        return len(self.points) // 3

    def segment(self, i: int) -> np.ndarray:
        m = len(self.points)
        return self.points[[3 * i, 3 * i + 1, 3 * i + 2, (3 * i + 3) % m]]

    def bbox(self):
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def __eq__(self, other):
        return isinstance(other, CubicPath) and np.array_equal(self.points, other.points)


@dataclass(frozen=True, eq=False)
class PathElement:
    path: CubicPath
    fill: np.ndarray
    id: int

    def __post_init__(self):
        fill = _frozen(self.fill)
        if fill.shape != (4,):
            raise ValueError("fill must be (r, g, b, a)")
        object.__setattr__(self, "fill", fill)

    def __eq__(self, other):
        return (
            isinstance(other, PathElement)
            and self.id == other.id
            and self.path == other.path
            and np.array_equal(self.fill, other.fill)
        )


@dataclass(frozen=True)
class Round:
    elements: tuple
    precision: int = 0
    region: Rect | None = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))


@dataclass(frozen=True)
class VectorDocument:
    rounds: tuple
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"canvas must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "rounds", tuple(self.rounds))
        seen = set()
        for el in self.elements():
            if el.id in seen:
                raise ValueError(f"duplicate element id {el.id}")
            seen.add(el.id)

    def elements(self) -> list[PathElement]:
        """All elements in paint order (back to front)."""
        return [el for rnd in self.rounds for el in rnd.elements]

    def ids(self) -> list[int]:
        return [el.id for el in self.elements()]

    def element(self, eid: int) -> PathElement:
        for el in self.elements():
            if el.id == eid:
                return el
        raise KeyError(f"no element with id {eid}")


def paint_order(doc: VectorDocument) -> list[int]:
    return doc.ids()


def all_ids(doc: VectorDocument) -> frozenset:
    return frozenset(doc.ids())


def select_intersecting(doc: VectorDocument, rect: Rect) -> frozenset:
    """Ids of elements whose control-point bounding box meets ``rect``."""
    return frozenset(el.id for el in doc.elements() if rect.intersects(*el.path.bbox()))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter values plus the layout needed to write them back.

    ``layout`` holds one ``(element id, field, index)`` triple per value where
    field is ``"pt"`` (index = 2*point + coord) or ``"rgba"`` (index = channel).
    """

    values: np.ndarray
    layout: tuple
    group: str = BOTH

    def __len__(self):
        return len(self.values)

    def with_values(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} values, got {values.shape}")
        return ParamVector(values, self.layout, self.group)

    def shape_indices(self) -> np.ndarray:
        return np.array([i for i, (_, f, _) in enumerate(self.layout) if f == "pt"], dtype=np.intp)

    def color_indices(self) -> np.ndarray:
        return np.array([i for i, (_, f, _) in enumerate(self.layout) if f == "rgba"], dtype=np.intp)


def _check_mask(doc: VectorDocument, mask) -> frozenset:
    ids = all_ids(doc)
    if mask is None:
        return ids
    mask = frozenset(mask)
    for eid in sorted(mask):
        if eid not in ids:
            raise KeyError(f"mask names unknown element id {eid}")
    return mask


def flatten_params(doc: VectorDocument, group: str = BOTH, mask: Iterable[int] | None = None) -> ParamVector:
    if group not in GROUPS:
        raise ValueError(f"unknown parameter group {group!r}")
    mask = _check_mask(doc, mask)
    values, layout = [], []
    for el in doc.elements():
        if el.id not in mask:
            continue
        if group in (SHAPE, BOTH):
            flat = el.path.points.ravel()
            values.append(flat)
            layout.extend((el.id, "pt", i) for i in range(len(flat)))
        if group in (COLOR, BOTH):
            values.append(el.fill)
            layout.extend((el.id, "rgba", c) for c in range(4))
    vals = np.concatenate(values) if values else np.zeros(0)
    return ParamVector(vals, tuple(layout), group)


def apply_params(doc: VectorDocument, p: ParamVector) -> VectorDocument:
    """Write ``p`` back into ``doc``; colour channels are clamped to [0, 1]."""
    by_id = {el.id: el for el in doc.elements()}
    points = {}
    fills = {}
    for value, (eid, fld, idx) in zip(p.values, p.layout):
        el = by_id.get(eid)
        if el is None:
            raise ValueError(f"parameter layout names unknown element id {eid}")
        if fld == "pt":
            arr = points.get(eid)
            if arr is None:
                arr = points[eid] = el.path.points.ravel().copy()
            if idx >= len(arr):
                raise ValueError(f"layout index {idx} out of range for element {eid}")
            arr[idx] = value
        elif fld == "rgba":
            arr = fills.get(eid)
            if arr is None:
                arr = fills[eid] = el.fill.copy()
            arr[idx] = min(max(value, 0.0), 1.0)
        else:
            raise ValueError(f"unknown layout field {fld!r}")

    def rebuild(el: PathElement) -> PathElement:
        if el.id not in points and el.id not in fills:
            return el
        path = CubicPath(points[el.id].reshape(-1, 2)) if el.id in points else el.path
        fill = fills.get(el.id, el.fill)
        return PathElement(path, fill, el.id)

    rounds = [Round([rebuild(el) for el in r.elements], r.precision, r.region) for r in doc.rounds]
    return VectorDocument(rounds, doc.width, doc.height)


def make_element(points: Sequence, fill: Sequence, eid: int) -> PathElement:
    return PathElement(CubicPath(np.asarray(points, dtype=np.float64)), np.asarray(fill, dtype=np.float64), eid)


def line_cubic(p0, p1) -> list:
    """Control points (without the end point) of a straight cubic from p0 to p1."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    return [p0, p0 + (p1 - p0) / 3.0, p0 + 2.0 * (p1 - p0) / 3.0]


def polygon_path(vertices) -> CubicPath:
    """Closed path whose cubic segments are the straight edges of a polygon."""
    vs = np.asarray(vertices, dtype=np.float64)
    pts = []
    for i in range(len(vs)):
        pts.extend(line_cubic(vs[i], vs[(i + 1) % len(vs)]))
    return CubicPath(np.array(pts))


def rect_path(x0, y0, x1, y1) -> CubicPath:
    return polygon_path([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def transform(doc: VectorDocument, sx: float, sy: float, width: int, height: int) -> VectorDocument:
    """Scale every control point by (sx, sy) onto a ``width`` x ``height`` canvas."""
    scale = np.array([sx, sy])
    rounds = []
    for r in doc.rounds:
        els = [PathElement(CubicPath(el.path.points * scale), el.fill, el.id) for el in r.elements]
        region = None
        if r.region is not None:
            region = Rect(r.region.x * sx, r.region.y * sy, r.region.w * sx, r.region.h * sy)
        rounds.append(Round(els, r.precision, region))
    return VectorDocument(rounds, width, height)
