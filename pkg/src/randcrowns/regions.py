"""Construction of the buffered scoring regions around a desired target.

For a target shape and parameters (alpha, omega, gamma) this builds:

* the true-positive core: target shrunk inward by ``alpha``;
* the ignored cushion: annulus of width ``omega`` outside the target;
* the edge annulus beyond the cushion, sized so that the true-negative
  region holds ``gamma`` times as many pixels as the core.

Boxes use exact box-annulus arithmetic (closed-form initial width from the
quadratic, then refined on pixel counts); arbitrary shapes use Euclidean
dilation of the rasterized target with the same width search.  The search
starts from the prescribed initial width, walks in ``delta`` steps toward
the requested ratio, and bisects once the ratio is bracketed.  When the
frame cannot hold enough true-negative pixels the largest attainable
region is returned and flagged as clipped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
import shapely.geometry

from .geometry import (
    DegenerateTargetError,
    PlotFrame,
    PolyShape,
    RectShape,
    Region,
    Shape,
    _squared_pixel_distances,
    rasterize,
    rect_region_areas,
)

log = logging.getLogger(__name__)

_DEFAULT_RATIO_TOL_FRACTION = 0.05


@dataclass(frozen=True)
class RcParams:
    """Tunables of the buffered metric plus solver controls.

    alpha_m    inward inset of the true-positive core (m)
    omega_m    width of the ignored cushion outside the target (m)
    gamma      target ratio of true-negative to true-positive pixel counts
    delta_m    width-search step; defaults to one pixel at build time
    ratio_tol  acceptable |achieved - gamma|; defaults to 0.05 * gamma
    """

    alpha_m: float
    omega_m: float
    gamma: float
    delta_m: float | None = None
    ratio_tol: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.alpha_m) and self.alpha_m > 0):
            raise ValueError("alpha_m must be finite and > 0")
        if not (math.isfinite(self.omega_m) and self.omega_m > 0):
            raise ValueError("omega_m must be finite and > 0")
        if not (math.isfinite(self.gamma) and self.gamma >= 1):
            raise ValueError("gamma must be finite and >= 1")
        if self.delta_m is not None and not (math.isfinite(self.delta_m) and self.delta_m > 0):
            raise ValueError("delta_m must be finite and > 0 when given")
        if self.ratio_tol is None:
            object.__setattr__(self, "ratio_tol", _DEFAULT_RATIO_TOL_FRACTION * self.gamma)
        elif not (math.isfinite(self.ratio_tol) and self.ratio_tol >= 0):
            raise ValueError("ratio_tol must be finite and >= 0")

    def resolved_delta(self, frame: PlotFrame) -> float:
        """Sub-pixel steps cannot change a rasterized region."""
        return self.delta_m if self.delta_m is not None else frame.resolution


@dataclass(frozen=True)
class RegionSet:
    """The constructed regions for one target under one parameter set.

    ``r_b`` equals ``r_e`` until :func:`finalize_true_negative` extends it
    for a specific delineation.  ``tau`` is the closed-form edge width of
    the box fast path (None in iterative mode); ``epsilon`` is the solved
    edge width actually used.
    """

    target_shape: Shape
    target: Region
    r_a: Region
    r_o: Region
    r_e: Region
    r_b: Region
    tau: float | None
    epsilon: float
    achieved_ratio: float
    clipped: bool
    mode: str

    def with_delineation(self, delineation: Region) -> "RegionSet":
        """Return a copy whose true-negative region accounts for ``delineation``."""
        r_b = finalize_true_negative(self.r_e, self.r_o, self.target, delineation)
        return replace(self, r_b=r_b)


class EdgeSolution(NamedTuple):
    r_e: Region
    epsilon: float
    achieved_ratio: float
    clipped: bool


def true_positive_region(target: Shape, alpha: float, frame: PlotFrame) -> Region:
    """Target eroded inward by ``alpha`` meters, rasterized.

    Boxes shrink exactly on every side; polygons use a negative buffer.
    An empty result means the target cannot be scored at this ``alpha``.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if isinstance(target, RectShape):
        inner = target.inset(alpha) if alpha > 0 else target
        region = rasterize(inner, frame)
    else:
        region = rasterize(_eroded_polygon(target, alpha), frame) if alpha > 0 else rasterize(target, frame)
    if region.is_empty:
        raise DegenerateTargetError(
            f"no true-positive pixels remain after a {alpha} m inset"
        )
    return region


def _eroded_polygon(poly: PolyShape, alpha: float) -> PolyShape:
    geom = shapely.geometry.Polygon(poly.exterior, [list(h) for h in poly.holes])
    shrunk = geom.buffer(-alpha)
    if shrunk.is_empty:
        raise DegenerateTargetError(f"a {alpha} m erosion consumes the polygon target")
    if shrunk.geom_type == "MultiPolygon":
        # Erosion may split a waisted polygon; keep every surviving part.
        parts = [PolyShape(tuple(g.exterior.coords), tuple(tuple(r.coords) for r in g.interiors))
                 for g in shrunk.geoms]
        return _MultiPoly(tuple(parts))
    return PolyShape(tuple(shrunk.exterior.coords), tuple(tuple(r.coords) for r in shrunk.interiors))


@dataclass(frozen=True)
class _MultiPoly:
    """Internal: several disjoint polygon pieces rasterized as their union."""

    parts: tuple[PolyShape, ...]


def _rasterize_any(shape, frame: PlotFrame) -> Region:
    if isinstance(shape, _MultiPoly):
        region = Region.empty(frame)
        for part in shape.parts:
            region = region.union(rasterize(part, frame))
        return region
    return rasterize(shape, frame)


def outer_region(target: Shape, omega: float, frame: PlotFrame) -> Region:
    """Annulus of width ``omega`` hugging the target from outside.

    Boxes expand exactly on every side (the box fast path); other shapes
    dilate by a Euclidean disk.  Cells beyond the frame are clipped.
    """
    if not omega > 0:
        raise ValueError("omega must be > 0")
    target_px = rasterize(target, frame)
    if isinstance(target, RectShape):
        return rasterize(target.expand(omega), frame).difference(target_px)
    return target_px.buffer(omega).difference(target_px)


def solve_tau(area_ra: float, length: float, height: float, omega: float) -> float:
    """Positive root of the box-annulus quadratic.

    Solves (height + 2*omega + 2*tau) * (length + 2*omega + 2*tau)
    - height*length = area_ra for tau; returns 0 when the annulus at
    tau = 0 already meets or exceeds ``area_ra``.
    """
    if area_ra <= 0 or length <= 0 or height <= 0 or omega <= 0:
        raise ValueError("all arguments must be positive")
    big_l = length + 2.0 * omega
    big_h = height + 2.0 * omega
    if big_l * big_h - length * height >= area_ra:
        return 0.0
    # 4 tau^2 + 2 tau (L + H) + (L*H - l*h - area) = 0
    b = 2.0 * (big_l + big_h)
    c = big_l * big_h - length * height - area_ra
    disc = b * b - 16.0 * c
    return (-b + math.sqrt(disc)) / 8.0


def _search_edge_width(
    count_at: Callable[[float], int],
    core_count: int,
    gamma: float,
    eps0: float,
    delta: float,
    ratio_tol: float,
    eps_max: float,
    min_step: float,
) -> tuple[float, float, bool]:
    """Find an edge width whose annulus pixel count best matches gamma * core.

    ``count_at`` must be monotone nondecreasing with count_at(0) == 0.
    Walks in ``delta`` steps from ``eps0`` toward the requested ratio (the
    prescribed linear loop), then bisects the bracketing interval down to
    ``min_step``.  Returns (eps, achieved_ratio, clipped); clipped means the
    frame cannot supply gamma * core pixels, in which case eps_max (the
    largest attainable region) is returned.
    """

    def ratio(e: float) -> float:
        return count_at(e) / core_count

    r_top = ratio(eps_max)
    if r_top < gamma - ratio_tol:
        return eps_max, r_top, True

    e = min(max(eps0, 0.0), eps_max)
    r = ratio(e)
    if abs(r - gamma) <= ratio_tol:
        return e, r, False

    if r > gamma:
        hi, r_hi = e, r
        while r > gamma and e > 0.0:
            e = max(e - delta, 0.0)
            r = ratio(e)
            if abs(r - gamma) <= ratio_tol:
                return e, r, False
            if r > gamma:
                hi, r_hi = e, r
        lo, r_lo = e, r
    else:
        lo, r_lo = e, r
        while r < gamma and e < eps_max:
            e = min(e + delta, eps_max)
            r = ratio(e)
            if abs(r - gamma) <= ratio_tol:
                return e, r, False
            if r < gamma:
                lo, r_lo = e, r
        hi, r_hi = e, r

    while hi - lo > min_step:
        mid = 0.5 * (lo + hi)
        r_mid = ratio(mid)
        if abs(r_mid - gamma) <= ratio_tol:
            return mid, r_mid, False
        if r_mid > gamma:
            hi, r_hi = mid, r_mid
        else:
            lo, r_lo = mid, r_mid

    if abs(r_hi - gamma) < abs(r_lo - gamma):
        return hi, r_hi, False
    return lo, r_lo, False


def edge_region_iterative(
    r_a: Region,
    r_o: Region,
    target: Region,
    params: RcParams,
    frame: PlotFrame,
) -> EdgeSolution:
    """Solve the edge annulus for an arbitrary rasterized target.

    The candidate at width ``e`` is buffer(target, omega + e) minus
    buffer(target, omega); the search starts at 2 * gamma * omega and
    adjusts until the pixel ratio to ``r_a`` meets gamma within tolerance.
    """
    if r_a.is_empty:
        raise DegenerateTargetError("true-positive region is empty")
    core = r_a.pixel_count()
    res = frame.resolution
    d2 = _squared_pixel_distances(target.mask)
    inner_mask = target.mask | r_o.mask

    def count_at(e: float) -> int:
        thr = ((params.omega_m + e) / res) ** 2 + 1e-9
        return int(np.count_nonzero((d2 <= thr) & ~inner_mask))

    diag = math.hypot(frame.x_max - frame.x_min, frame.y_max - frame.y_min)
    eps, achieved, clipped = _search_edge_width(
        count_at,
        core,
        params.gamma,
        eps0=2.0 * params.gamma * params.omega_m,
        delta=params.resolved_delta(frame),
        ratio_tol=params.ratio_tol,
        eps_max=diag,
        min_step=res / 8.0,
    )
    thr = ((params.omega_m + eps) / res) ** 2 + 1e-9
    r_e = Region(frame, (d2 <= thr) & ~inner_mask)
    return EdgeSolution(r_e, eps, achieved, clipped)


def _edge_region_rect(
    target: RectShape,
    r_a: Region,
    params: RcParams,
    frame: PlotFrame,
) -> tuple[EdgeSolution, float]:
    """Box fast path: annuli are expanded boxes, counts come from index math."""
    core = r_a.pixel_count()
    xs, ys = frame.x_centers(), frame.y_centers()

    def box_count(d: float) -> int:
        x_lo, y_lo, x_hi, y_hi = target.expand(d).bounds
        nx = int(np.count_nonzero((xs >= x_lo) & (xs < x_hi)))
        ny = int(np.count_nonzero((ys >= y_lo) & (ys < y_hi)))
        return nx * ny

    inner_count = box_count(params.omega_m)

    def count_at(e: float) -> int:
        return box_count(params.omega_m + e) - inner_count

    area_a, _, _ = _rect_areas_checked(target, params)
    tau = solve_tau(area_a, target.width, target.height, params.omega_m)
    eps_max = max(frame.x_max - frame.x_min, frame.y_max - frame.y_min)
    eps, achieved, clipped = _search_edge_width(
        count_at,
        core,
        params.gamma,
        eps0=params.gamma * tau,
        delta=params.resolved_delta(frame),
        ratio_tol=params.ratio_tol,
        eps_max=eps_max,
        min_step=frame.resolution / 8.0,
    )
    outer_box = rasterize(target.expand(params.omega_m), frame)
    r_e = rasterize(target.expand(params.omega_m + eps), frame).difference(outer_box)
    return EdgeSolution(r_e, eps, achieved, clipped), tau


def _rect_areas_checked(target: RectShape, params: RcParams) -> tuple[float, float, float]:
    return rect_region_areas(target, params.alpha_m, params.omega_m, 0.0, params.gamma)


def finalize_true_negative(
    r_e: Region, r_o: Region, target_region: Region, delineation: Region
) -> Region:
    """Extend the true-negative region for delineations that spill past it.

    Delineation pixels beyond the outer true-negative boundary are annexed
    so they count as false positives; the target and the ignored cushion
    stay excluded.  A delineation inside the boundary leaves r_e untouched.
    """
    within = target_region.union(r_o).union(r_e)
    if within.contains(delineation):
        return r_e
    return r_e.union(delineation).difference(r_o.union(target_region))


def build_region_set(
    target: Shape,
    params: RcParams,
    frame: PlotFrame,
    mode: str = "auto",
) -> RegionSet:
    """Construct every scoring region for one target.

    ``mode`` is "rect" (box annuli, boxes only), "iterative" (Euclidean
    dilation of the rasterized target), or "auto" which picks "rect" for
    boxes and "iterative" otherwise.
    """
    if mode == "auto":
        mode = "rect" if isinstance(target, RectShape) else "iterative"
    if mode not in ("rect", "iterative"):
        raise ValueError(f"unknown construction mode {mode!r}")
    if mode == "rect" and not isinstance(target, RectShape):
        raise ValueError("rect mode requires a box target")

    target_px = rasterize(target, frame)
    if target_px.is_empty:
        raise DegenerateTargetError("target rasterizes to no pixels on this frame")
    r_a = true_positive_region(target, params.alpha_m, frame)

    if mode == "rect":
        r_o = rasterize(target.expand(params.omega_m), frame).difference(target_px)
        solution, tau = _edge_region_rect(target, r_a, params, frame)
    else:
        r_o = target_px.buffer(params.omega_m).difference(target_px)
        solution = edge_region_iterative(r_a, r_o, target_px, params, frame)
        tau = None

    if solution.clipped:
        log.debug(
            "edge region clipped by the frame: achieved ratio %.3f < gamma %.3f",
            solution.achieved_ratio,
            params.gamma,
        )
    return RegionSet(
        target_shape=target,
        target=target_px,
        r_a=r_a,
        r_o=r_o,
        r_e=solution.r_e,
        r_b=solution.r_e,
        tau=tau,
        epsilon=solution.epsilon,
        achieved_ratio=solution.achieved_ratio,
        clipped=solution.clipped,
        mode=mode,
    )
