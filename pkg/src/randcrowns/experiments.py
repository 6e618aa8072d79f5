"""Annotator cross-validation variance, parameter sweeps, synthetic ensembles.

Leave-one-annotator-out: each annotator in turn is the desired target and
the others are sample delineations.  Within one held-out choice the
average variance is the mean over crowns of the per-crown sample variance
(denominator Z-1); reports average that figure over all held-out choices.
Sweeps evaluate a (alpha, omega, gamma) grid and record the variance of
all three scores per grid point.  The synthetic generator builds seeded
ensembles by warping base crowns per annotator (scale, rotation,
translation), for property checks in place of unavailable field data.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import (
    DegenerateTargetError,
    PlotFrame,
    PolyShape,
    RandCrownsError,
    RectShape,
    Shape,
    rasterize,
)
from .metrics import ScoreRecord, score_pair
from .regions import RcParams, build_region_set

log = logging.getLogger(__name__)

METRICS = ("rand_crowns", "iou", "iou_crowns")


@dataclass(frozen=True)
class CrownGroup:
    """One crown with a shape from every annotator."""

    plot_id: str
    crown_id: str
    shapes: Mapping[str, Shape]


@dataclass(frozen=True)
class AnnotatorEnsemble:
    """Crowns labeled by every annotator on a shared plot frame."""

    frame: PlotFrame
    annotator_ids: tuple[str, ...]
    crowns: tuple[CrownGroup, ...]

    def __post_init__(self):
        if len(self.annotator_ids) < 2:
            raise ValueError("an ensemble needs at least two annotators")
        if len(set(self.annotator_ids)) != len(self.annotator_ids):
            raise ValueError("annotator ids must be unique")
        expected = set(self.annotator_ids)
        for crown in self.crowns:
            if set(crown.shapes) != expected:
                raise ValueError(
                    f"crown {crown.crown_id!r} is not labeled by every annotator"
                )

    @property
    def plot_ids(self) -> tuple[str, ...]:
        return tuple(sorted({c.plot_id for c in self.crowns}))


@dataclass(frozen=True)
class PerCrownVariance:
    crown_id: str
    mean_score: float
    variance: float


@dataclass(frozen=True)
class VarianceReport:
    """Average per-crown sample variance of one score across annotators."""

    metric: str
    avg_variance: float
    per_crown: tuple[PerCrownVariance, ...]
    n_crowns: int
    n_delineations: int
    n_experiments: int
    n_skipped_crowns: int
    n_clipped: int


@dataclass(frozen=True)
class SweepRecord:
    """Variances of all three scores at one parameter grid point."""

    alpha_m: float
    omega_m: float
    gamma: float
    var_rand_crowns: float | None
    var_iou: float | None
    var_iou_crowns: float | None
    n_skipped: int
    n_clipped: int


def average_variance(
    per_crown_scores: Sequence[Sequence[float]],
) -> tuple[float, list[tuple[float, float]]]:
    """Mean over crowns of the per-crown sample variance for one held-out choice.

    Each inner sequence holds the scores of one crown's delineations.
    Returns (average variance, per-crown (mean, variance) pairs).
    """
    if not per_crown_scores:
        raise ValueError("need at least one crown")
    stats = []
    for scores in per_crown_scores:
        if len(scores) < 2:
            raise ValueError("each crown needs at least two delineation scores")
        mu = sum(scores) / len(scores)
        var = sum((s - mu) ** 2 for s in scores) / (len(scores) - 1)
        stats.append((mu, var))
    avg = sum(v for _, v in stats) / len(stats)
    return avg, stats


def _score_table(
    ensemble: AnnotatorEnsemble, params: RcParams, mode: str = "auto"
) -> tuple[dict[str, dict[str, list[ScoreRecord]]], int, int]:
    """Score every (held-out annotator, crown, delineation) triple.

    A crown is skipped entirely at this parameter point when any
    annotator's shape is degenerate under ``params`` (keeps the crown set
    identical across the held-out choices).
    """
    anns = ensemble.annotator_ids
    records: dict[str, dict[str, list[ScoreRecord]]] = {ann: {} for ann in anns}
    n_skipped = 0
    n_clipped = 0
    for crown in ensemble.crowns:
        try:
            sets = {
                ann: build_region_set(crown.shapes[ann], params, ensemble.frame, mode)
                for ann in anns
            }
        except DegenerateTargetError:
            n_skipped += 1
            log.debug(
                "crown %s skipped at alpha=%.3g: degenerate true-positive region",
                crown.crown_id,
                params.alpha_m,
            )
            continue
        n_clipped += sum(1 for rs in sets.values() if rs.clipped)
        rasters = {ann: rasterize(crown.shapes[ann], ensemble.frame) for ann in anns}
        for target_ann in anns:
            recs = [
                score_pair(rasters[delin_ann], sets[target_ann])
                for delin_ann in anns
                if delin_ann != target_ann
            ]
            records[target_ann][crown.crown_id] = recs
    return records, n_skipped, n_clipped


def _metric_values(recs: Sequence[ScoreRecord], metric: str) -> list[float]:
    return [getattr(r, metric) for r in recs]


def _variance_report(
    ensemble: AnnotatorEnsemble,
    records: dict[str, dict[str, list[ScoreRecord]]],
    metric: str,
    n_skipped: int,
    n_clipped: int,
) -> VarianceReport:
    anns = ensemble.annotator_ids
    surviving = [c.crown_id for c in ensemble.crowns if c.crown_id in records[anns[0]]]
    if not surviving:
        raise RandCrownsError("every crown was degenerate at these parameters")
    per_crown = []
    for crown_id in surviving:
        means, variances = [], []
        for target_ann in anns:
            scores = _metric_values(records[target_ann][crown_id], metric)
            mu = sum(scores) / len(scores)
            means.append(mu)
            variances.append(sum((s - mu) ** 2 for s in scores) / (len(scores) - 1))
        per_crown.append(
            PerCrownVariance(
                crown_id=crown_id,
                mean_score=sum(means) / len(means),
                variance=sum(variances) / len(variances),
            )
        )
    avg = sum(p.variance for p in per_crown) / len(per_crown)
    return VarianceReport(
        metric=metric,
        avg_variance=avg,
        per_crown=tuple(per_crown),
        n_crowns=len(per_crown),
        n_delineations=len(anns) - 1,
        n_experiments=len(anns),
        n_skipped_crowns=n_skipped,
        n_clipped=n_clipped,
    )


def cross_validate(
    ensemble: AnnotatorEnsemble,
    params: RcParams,
    metric: str = "rand_crowns",
    mode: str = "auto",
) -> VarianceReport:
    """Leave-one-annotator-out variance of one score over an ensemble."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if len(ensemble.annotator_ids) < 3:
        raise ValueError("variance needs at least two delineations per crown")
    records, n_skipped, n_clipped = _score_table(ensemble, params, mode)
    return _variance_report(ensemble, records, metric, n_skipped, n_clipped)


@dataclass(frozen=True)
class SweepGrid:
    """Inclusive (low, step, high) ranges for each parameter."""

    alpha: tuple[float, float, float]
    omega: tuple[float, float, float]
    gamma: tuple[float, float, float]

    def points(self) -> list[tuple[float, float, float]]:
        return [
            (a, o, g)
            for a in _range_values(*self.alpha)
            for o in _range_values(*self.omega)
            for g in _range_values(*self.gamma)
        ]


def _range_values(low: float, step: float, high: float) -> list[float]:
    if step <= 0:
        raise ValueError("range step must be positive")
    if high < low:
        raise ValueError("range upper bound is below the lower bound")
    n = int(math.floor((high - low) / step + 0.5)) + 1
    vals = [round(low + k * step, 9) for k in range(n)]
    return [v for v in vals if v <= high + 1e-9]


def _evaluate_point(
    ensemble: AnnotatorEnsemble,
    point: tuple[float, float, float],
    mode: str,
    ratio_tol: float | None,
) -> SweepRecord:
    alpha, omega, gamma = point
    params = RcParams(alpha_m=alpha, omega_m=omega, gamma=gamma, ratio_tol=ratio_tol)
    try:
        records, n_skipped, n_clipped = _score_table(ensemble, params, mode)
        variances = {
            metric: _variance_report(ensemble, records, metric, n_skipped, n_clipped).avg_variance
            for metric in METRICS
        }
    except RandCrownsError:
        return SweepRecord(alpha, omega, gamma, None, None, None, len(ensemble.crowns), 0)
    return SweepRecord(
        alpha_m=alpha,
        omega_m=omega,
        gamma=gamma,
        var_rand_crowns=variances["rand_crowns"],
        var_iou=variances["iou"],
        var_iou_crowns=variances["iou_crowns"],
        n_skipped=n_skipped,
        n_clipped=n_clipped,
    )


_WORKER_STATE: dict = {}


def _init_sweep_worker(ensemble, mode, ratio_tol) -> None:
    _WORKER_STATE["args"] = (ensemble, mode, ratio_tol)


def _sweep_worker(point):
    ensemble, mode, ratio_tol = _WORKER_STATE["args"]
    return _evaluate_point(ensemble, point, mode, ratio_tol)


def sweep(
    ensemble: AnnotatorEnsemble,
    grid: SweepGrid,
    jobs: int = 1,
    mode: str = "auto",
    ratio_tol: float | None = None,
) -> list[SweepRecord]:
    """Evaluate every grid point; records come back in grid order.

    Points are independent, so ``jobs > 1`` fans them out to worker
    processes; the merge order is the grid order either way.  No winner is
    selected: boundary sizes also need a qualitative check against the
    data, so the caller ranks the records.
    """
    points = grid.points()
    if jobs <= 1:
        return [_evaluate_point(ensemble, p, mode, ratio_tol) for p in points]
    chunk = max(1, len(points) // (jobs * 8))
    with ProcessPoolExecutor(
        max_workers=jobs,
        initializer=_init_sweep_worker,
        initargs=(ensemble, mode, ratio_tol),
    ) as pool:
        return list(pool.map(_sweep_worker, points, chunksize=chunk))


@dataclass(frozen=True)
class SynthSpec:
    """Layout and warp magnitudes for a seeded synthetic ensemble.

    Crowns sit on a regular grid per plot; each annotator's label is the
    base crown scaled, rotated, and translated by bounded amounts drawn
    from the seeded generator.  In box mode a rotated crown becomes the
    axis-aligned bounding box of the rotated shape.
    """

    n_plots: int = 4
    plot_size_m: float = 40.0
    resolution_m: float = 0.1
    crowns_per_side: int = 3
    crown_width_range: tuple[float, float] = (4.5, 6.5)
    crown_height_range: tuple[float, float] = (4.5, 6.5)
    n_annotators: int = 4
    translate_m: float = 0.35
    scale_fraction: float = 0.08
    rotate_deg: float = 0.0
    polygon_mode: bool = False
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.translate_m < 0 or self.scale_fraction < 0 or self.rotate_deg < 0:
            raise ValueError("warp magnitudes must be >= 0")
        if not (0 <= self.scale_fraction < 1):
            raise ValueError("scale_fraction must lie in [0, 1)")
        if self.n_annotators < 2:
            raise ValueError("need at least two annotators")
        if self.n_plots < 1 or self.crowns_per_side < 1:
            raise ValueError("need at least one plot and one crown per side")

    @property
    def n_crowns(self) -> int:
        return self.n_plots * self.crowns_per_side**2


def synth_ensemble(spec: SynthSpec) -> AnnotatorEnsemble:
    """Deterministic ensemble from a seed: same spec, same shapes."""
    rng = np.random.default_rng(spec.seed)
    frame = PlotFrame(0.0, 0.0, spec.plot_size_m, spec.plot_size_m, spec.resolution_m)
    annotator_ids = tuple(f"annotator{k + 1}" for k in range(spec.n_annotators))
    cell = spec.plot_size_m / spec.crowns_per_side
    crowns = []
    for p in range(spec.n_plots):
        plot_id = f"plot{p + 1}"
        index = 0
        for gy in range(spec.crowns_per_side):
            for gx in range(spec.crowns_per_side):
                index += 1
                base = RectShape(
                    x_center=(gx + 0.5) * cell,
                    y_center=(gy + 0.5) * cell,
                    width=rng.uniform(*spec.crown_width_range),
                    height=rng.uniform(*spec.crown_height_range),
                )
                shapes = {ann: _warp_crown(base, rng, spec, frame) for ann in annotator_ids}
                crowns.append(CrownGroup(plot_id, f"{plot_id}_crown{index}", shapes))
    return AnnotatorEnsemble(frame=frame, annotator_ids=annotator_ids, crowns=tuple(crowns))


def _warp_crown(base: RectShape, rng, spec: SynthSpec, frame: PlotFrame) -> Shape:
    for _ in range(spec.max_retries):
        scale = 1.0 + rng.uniform(-spec.scale_fraction, spec.scale_fraction)
        angle = math.radians(rng.uniform(-spec.rotate_deg, spec.rotate_deg))
        # Uniform draw inside the translation disk keeps center offsets
        # within translate_m in Euclidean distance.
        radius = spec.translate_m * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        dx, dy = radius * math.cos(theta), radius * math.sin(theta)
        shape = _warped_shape(base, scale, angle, dx, dy, spec.polygon_mode)
        if _touches_frame(shape, frame):
            return shape
    raise RandCrownsError(
        f"crown warp left the frame after {spec.max_retries} attempts"
    )


def _warped_shape(
    base: RectShape, scale: float, angle: float, dx: float, dy: float, polygon_mode: bool
) -> Shape:
    w, h = base.width * scale, base.height * scale
    cx, cy = base.x_center + dx, base.y_center + dy
    if polygon_mode and angle != 0.0:
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        corners = []
        for sx, sy in ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)):
            px, py = sx * w, sy * h
            corners.append((cx + px * cos_a - py * sin_a, cy + px * sin_a + py * cos_a))
        return PolyShape(tuple(corners))
    if angle != 0.0:
        w, h = (
            w * abs(math.cos(angle)) + h * abs(math.sin(angle)),
            w * abs(math.sin(angle)) + h * abs(math.cos(angle)),
        )
    return RectShape(cx, cy, w, h)


def _touches_frame(shape: Shape, frame: PlotFrame) -> bool:
    x_lo, y_lo, x_hi, y_hi = shape.bounds
    return x_hi > frame.x_min and x_lo < frame.x_max and y_hi > frame.y_min and y_lo < frame.y_max
