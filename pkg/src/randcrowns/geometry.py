"""Pixel-grid region algebra on a georeferenced plot frame.

Shapes live in world meters; every membership test rasterizes them onto a
finite grid with a cell-center rule (a cell belongs to a shape iff its
center does, box edges treated half-open: lower edge in, upper edge out).
Regions are immutable cell sets supporting exact boolean algebra and
Euclidean-disk dilation.  Closed-form areas are provided for the
box-shaped scoring regions used on the rectangle fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

# Slack added to squared-radius thresholds so that radii which are an exact
# multiple of the resolution include the cells at exactly that distance
# despite float division noise (e.g. 0.3 m at 0.1 m/px).
_RADIUS_EPS = 1e-9


class RandCrownsError(Exception):
    """Base class for errors raised by this package."""


class FrameMismatchError(RandCrownsError):
    """Regions from different plot frames were combined."""


class DegenerateTargetError(RandCrownsError):
    """A target is too small for the requested inner boundary."""


@dataclass(frozen=True)
class PlotFrame:
    """Georeferenced pixel grid: world extent in meters plus meters-per-pixel.

    Cell (i, j) covers [x_min + i*res, x_min + (i+1)*res) x
    [y_min + j*res, y_min + (j+1)*res); its center is the sample point for
    every rasterization.  Row j of a mask is the j-th cell row from y_min.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    resolution: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max, self.resolution)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("frame extent and resolution must be finite")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("frame extent must have positive width and height")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("frame must span at least one pixel per axis")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    @property
    def cell_count(self) -> int:
        return self.width * self.height

    def x_centers(self) -> np.ndarray:
        return _x_centers(self)

    def y_centers(self) -> np.ndarray:
        return _y_centers(self)


@lru_cache(maxsize=256)
def _x_centers(frame: PlotFrame) -> np.ndarray:
    xs = frame.x_min + (np.arange(frame.width, dtype=np.float64) + 0.5) * frame.resolution
    xs.flags.writeable = False
    return xs


@lru_cache(maxsize=256)
def _y_centers(frame: PlotFrame) -> np.ndarray:
    ys = frame.y_min + (np.arange(frame.height, dtype=np.float64) + 0.5) * frame.resolution
    ys.flags.writeable = False
    return ys


@dataclass(frozen=True)
class RectShape:
    """Axis-aligned box: center coordinates plus x/y extents, in meters."""

    x_center: float
    y_center: float
    width: float
    height: float

    def __post_init__(self):
        vals = (self.x_center, self.y_center, self.width, self.height)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("box extents must be positive")

    @classmethod
    def from_bounds(cls, x_lo: float, y_lo: float, x_hi: float, y_hi: float) -> "RectShape":
        return cls((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0, x_hi - x_lo, y_hi - y_lo)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        hw, hh = self.width / 2.0, self.height / 2.0
        return (self.x_center - hw, self.y_center - hh, self.x_center + hw, self.y_center + hh)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x_center, self.y_center)

    def inset(self, dist: float) -> "RectShape":
        """Shrink by ``dist`` on every side; degenerate targets are rejected."""
        if dist < 0:
            return self.expand(-dist)
        if 2.0 * dist >= min(self.width, self.height):
            raise DegenerateTargetError(
                f"inset {dist} m leaves no interior for a {self.width} x {self.height} m box"
            )
        return RectShape(self.x_center, self.y_center, self.width - 2.0 * dist, self.height - 2.0 * dist)

    def expand(self, dist: float) -> "RectShape":
        """Grow by ``dist`` on every side."""
        if dist < 0:
            return self.inset(-dist)
        return RectShape(self.x_center, self.y_center, self.width + 2.0 * dist, self.height + 2.0 * dist)

    def as_polygon(self) -> "PolyShape":
        x_lo, y_lo, x_hi, y_hi = self.bounds
        return PolyShape(((x_lo, y_lo), (x_hi, y_lo), (x_hi, y_hi), (x_lo, y_hi)))


def _ring_normalized(ring) -> tuple[tuple[float, float], ...]:
    """Coerce a vertex sequence into an open ring of distinct consecutive points."""
    pts = [(float(x), float(y)) for x, y in ring]
    if len(pts) >= 2 and pts[0] == pts[-1]:
        pts = pts[:-1]
    out: list[tuple[float, float]] = []
    for p in pts:
        if not (math.isfinite(p[0]) and math.isfinite(p[1])):
            raise ValueError("polygon vertices must be finite")
        if out and p == out[-1]:
            continue
        out.append(p)
    if len(out) < 3:
        raise ValueError("a polygon ring needs at least 3 distinct vertices")
    return tuple(out)


def _signed_ring_area(ring) -> float:
    acc = 0.0
    n = len(ring)
    for k in range(n):
        x1, y1 = ring[k]
        x2, y2 = ring[(k + 1) % n]
        acc += x1 * y2 - x2 * y1
    return acc / 2.0


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    """True when the open segments cross or overlap collinearly."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        # Touching only at a shared endpoint is not a crossing.
        shared = {p1, p2} & {q1, q2}
        if shared:
            others = [pt for pt in (p1, p2, q1, q2) if pt not in shared]
            return any(orient(p1, p2, pt) == 0 and orient(q1, q2, pt) == 0 for pt in others)
        return True
    # Collinear overlap beyond a single shared endpoint.
    touches = 0
    for a, b, c in ((p1, p2, q1), (p1, p2, q2), (q1, q2, p1), (q1, q2, p2)):
        if orient(a, b, c) == 0 and on_segment(a, b, c) and c not in (a, b):
            return True
        if c in (a, b):
            touches += 1
    return False


def ring_is_simple(ring) -> bool:
    """Check a vertex ring for self-intersection (shared endpoints allowed)."""
    n = len(ring)
    edges = [(ring[k], ring[(k + 1) % n]) for k in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            adjacent = b == a + 1 or (a == 0 and b == n - 1)
            if adjacent:
                continue
            if _segments_properly_intersect(*edges[a], *edges[b]):
                return False
    return True


@dataclass(frozen=True)
class PolyShape:
    """Simple polygon (exterior ring plus optional holes), in meters."""

    exterior: tuple[tuple[float, float], ...]
    holes: tuple[tuple[tuple[float, float], ...], ...] = ()

    def __post_init__(self):
        ext = _ring_normalized(self.exterior)
        hls = tuple(_ring_normalized(h) for h in self.holes)
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", hls)
        if abs(_signed_ring_area(ext)) <= 0.0:
            raise ValueError("polygon exterior must have positive area")
        for ring in (ext, *hls):
            if not ring_is_simple(ring):
                raise ValueError("polygon ring is self-intersecting")

    @property
    def area(self) -> float:
        total = abs(_signed_ring_area(self.exterior))
        for hole in self.holes:
            total -= abs(_signed_ring_area(hole))
        return total

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.exterior]
        ys = [p[1] for p in self.exterior]
        return (min(xs), min(ys), max(xs), max(ys))

    @property
    def centroid(self) -> tuple[float, float]:
        ring = self.exterior
        a = _signed_ring_area(ring)
        cx = cy = 0.0
        n = len(ring)
        for k in range(n):
            x1, y1 = ring[k]
            x2, y2 = ring[(k + 1) % n]
            cross = x1 * y2 - x2 * y1
            cx += (x1 + x2) * cross
            cy += (y1 + y2) * cross
        return (cx / (6.0 * a), cy / (6.0 * a))


Shape = RectShape | PolyShape


@dataclass(frozen=True, eq=False)
class Region:
    """An immutable set of grid cells on one plot frame.

    The mask is row-major ``(height, width)`` bool; membership outside the
    frame is unrepresentable, which makes clipping structural.
    """

    frame: PlotFrame
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.dtype != np.bool_:
            mask = mask.astype(bool)
        if mask.shape != (self.frame.height, self.frame.width):
            raise ValueError(
                f"mask shape {mask.shape} does not match the "
                f"{self.frame.height} x {self.frame.width} frame grid"
            )
        mask = np.require(mask, requirements="C")
        try:
            mask.flags.writeable = False
        except ValueError:
            mask = mask.copy()
            mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, frame: PlotFrame) -> "Region":
        return cls(frame, np.zeros((frame.height, frame.width), dtype=bool))

    @classmethod
    def full(cls, frame: PlotFrame) -> "Region":
        return cls(frame, np.ones((frame.height, frame.width), dtype=bool))

    def _check_frame(self, other: "Region") -> None:
        if self.frame != other.frame:
            raise FrameMismatchError("regions live on different plot frames")

    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()

    def intersect(self, other: "Region") -> "Region":
        self._check_frame(other)
        return Region(self.frame, self.mask & other.mask)

    def union(self, other: "Region") -> "Region":
        self._check_frame(other)
        return Region(self.frame, self.mask | other.mask)

    def difference(self, other: "Region") -> "Region":
        self._check_frame(other)
        return Region(self.frame, self.mask & ~other.mask)

    def contains(self, other: "Region") -> bool:
        """True when ``other`` is a subset of this region."""
        self._check_frame(other)
        return not bool(np.any(other.mask & ~self.mask))

    def buffer(self, dist: float) -> "Region":
        """Dilate by a Euclidean disk: add every cell whose center lies
        within ``dist`` meters of a member cell's center, clipped to frame."""
        if not math.isfinite(dist) or dist < 0:
            raise ValueError("buffer distance must be finite and >= 0")
        if dist == 0 or self.is_empty:
            return self
        d2 = _squared_pixel_distances(self.mask)
        thr = (dist / self.frame.resolution) ** 2 + _RADIUS_EPS
        return Region(self.frame, d2 <= thr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Region):
            return NotImplemented
        return self.frame == other.frame and bool(np.array_equal(self.mask, other.mask))

    def __repr__(self) -> str:
        return f"Region({self.pixel_count()} of {self.frame.cell_count} cells)"


def _squared_pixel_distances(mask: np.ndarray) -> np.ndarray:
    """Exact integer squared distance (in pixels) from each cell to the
    nearest member cell, as float64 holding exact integers."""
    dt = ndimage.distance_transform_edt(~mask)
    return np.rint(dt * dt)


def rasterize(shape: Shape, frame: PlotFrame) -> Region:
    """Rasterize a shape: cells whose centers fall inside it, clipped to frame."""
    if isinstance(shape, RectShape):
        x_lo, y_lo, x_hi, y_hi = shape.bounds
        xs, ys = frame.x_centers(), frame.y_centers()
        in_x = (xs >= x_lo) & (xs < x_hi)
        in_y = (ys >= y_lo) & (ys < y_hi)
        return Region(frame, in_y[:, None] & in_x[None, :])
    if isinstance(shape, PolyShape):
        return Region(frame, _polygon_parity_mask(shape, frame))
    raise TypeError(f"cannot rasterize {type(shape).__name__}")


def _polygon_parity_mask(poly: PolyShape, frame: PlotFrame) -> np.ndarray:
    """Even-odd (crossing number) test of every cell center against all rings."""
    xs = frame.x_centers()[None, :]
    ys = frame.y_centers()[:, None]
    inside = np.zeros((frame.height, frame.width), dtype=bool)
    for ring in (poly.exterior, *poly.holes):
        n = len(ring)
        for k in range(n):
            x1, y1 = ring[k]
            x2, y2 = ring[(k + 1) % n]
            if y1 == y2:
                continue
            crosses = (y1 > ys) != (y2 > ys)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
            inside ^= crosses & (xs < x_cross)
    return inside


def intersect(a: Region, b: Region) -> Region:
    return a.intersect(b)


def union(a: Region, b: Region) -> Region:
    return a.union(b)


def difference(a: Region, b: Region) -> Region:
    return a.difference(b)


def buffer(region: Region, dist: float) -> Region:
    return region.buffer(dist)


def pixel_count(region: Region) -> int:
    return region.pixel_count()


def rect_region_areas(
    target: RectShape, alpha: float, omega: float, tau: float, gamma: float
) -> tuple[float, float, float]:
    """Closed-form areas of the three box-annulus scoring regions.

    Returns (inner area after an ``alpha`` inset, area of the ``omega``
    annulus around the target, area of the edge annulus that extends
    ``gamma * tau`` beyond the ``omega`` annulus).
    """
    if alpha < 0 or omega <= 0 or tau < 0 or gamma < 0:
        raise ValueError("expected alpha >= 0, omega > 0, tau >= 0, gamma >= 0")
    w, h = target.width, target.height
    if 2.0 * alpha >= min(w, h):
        raise DegenerateTargetError(
            f"alpha {alpha} m leaves no interior for a {w} x {h} m target"
        )
    area_a = (w - 2.0 * alpha) * (h - 2.0 * alpha)
    area_o = (w + 2.0 * omega) * (h + 2.0 * omega) - w * h
    ext = gamma * tau
    area_e = (w + 2.0 * omega + 2.0 * ext) * (h + 2.0 * omega + 2.0 * ext) - (
        (w + 2.0 * omega) * (h + 2.0 * omega)
    )
    return (area_a, area_o, area_e)
