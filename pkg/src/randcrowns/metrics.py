"""Pair-count terms and scores for one (delineation, target) pair.

The buffered score counts squared pixel overlaps against the constructed
regions: agreement is delineation pixels inside the true-positive core
plus true-negative pixels left uncovered; disagreement is delineation
pixels inside the true-negative region plus core pixels missed.  Counts
are squared exactly as the region formulation writes them, not converted
to n*(n-1)/2 combinatorial pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .geometry import Region
from .regions import RegionSet

log = logging.getLogger(__name__)

# classic_rand_pairs enumerates implicit pixel pairs over the whole frame;
# refuse frames whose squared cell count would dwarf any sane use.
DEFAULT_PAIR_CELL_BUDGET = 1 << 22


@dataclass(frozen=True)
class ScoreRecord:
    """Four pair-count terms plus the derived scores for one pair.

    ``degenerate`` marks a vacuous denominator (scores forced to 0 so batch
    runs keep going).
    """

    a: int
    b: int
    c: int
    d: int
    rand_crowns: float
    iou: float
    iou_crowns: float
    degenerate: bool = False


def iou(delineation: Region, target: Region) -> float:
    """Plain intersection-over-union of two regions on a shared frame."""
    inter = delineation.intersect(target).pixel_count()
    union = delineation.union(target).pixel_count()
    if union == 0:
        raise ValueError("IoU of two empty regions is undefined")
    return inter / union


def rand_crowns(delineation: Region, region_set: RegionSet) -> ScoreRecord:
    """Score a delineation against a region set already finalized for it.

    Callers that have not extended the true-negative region for this
    delineation should use :func:`score_pair` instead.
    """
    r_a, r_b = region_set.r_a, region_set.r_b
    n_a = delineation.intersect(r_a).pixel_count()
    n_b = r_b.difference(delineation).pixel_count()
    n_c = delineation.intersect(r_b).pixel_count()
    n_d = r_a.difference(delineation).pixel_count()
    a, b, c, d = n_a * n_a, n_b * n_b, n_c * n_c, n_d * n_d

    denom = a + b + c + d
    degenerate = denom == 0
    if degenerate:
        log.warning("all four pair-count terms are zero; reporting score 0")
        rc = 0.0
    else:
        rc = (a + b) / denom

    denom_iouc = a + c + d
    iouc = 0.0 if denom_iouc == 0 else a / denom_iouc
    degenerate = degenerate or denom_iouc == 0

    return ScoreRecord(
        a=a,
        b=b,
        c=c,
        d=d,
        rand_crowns=rc,
        iou=iou(delineation, region_set.target),
        iou_crowns=iouc,
        degenerate=degenerate,
    )


def iou_crowns(delineation: Region, region_set: RegionSet) -> float:
    """Buffered IoU variant: drops the true-negative agreement term."""
    r_a, r_b = region_set.r_a, region_set.r_b
    n_a = delineation.intersect(r_a).pixel_count()
    n_c = delineation.intersect(r_b).pixel_count()
    n_d = r_a.difference(delineation).pixel_count()
    denom = n_a * n_a + n_c * n_c + n_d * n_d
    if denom == 0:
        log.warning("buffered IoU terms are all zero; reporting score 0")
        return 0.0
    return (n_a * n_a) / denom


def score_pair(delineation: Region, region_set: RegionSet) -> ScoreRecord:
    """Finalize the true-negative region for this delineation, then score."""
    return rand_crowns(delineation, region_set.with_delineation(delineation))


def classic_rand_pairs(
    delineation: Region,
    target: Region,
    max_cells: int = DEFAULT_PAIR_CELL_BUDGET,
) -> tuple[int, int, int, int]:
    """Reference pair counts of the unbuffered index over the whole frame.

    Both regions induce an inside/outside labeling of every frame cell.
    Following the squared-count convention of the buffered terms, each
    count is the number of (ordered) pixel pairs drawn from one agreement
    class: both inside both regions; both outside both; both in the
    delineation only; both in the target only.  For testing and
    comparison, not part of the scoring pipeline.
    """
    delineation._check_frame(target)
    n_cells = delineation.frame.cell_count
    if n_cells > max_cells:
        raise ValueError(
            f"frame has {n_cells} cells, above the pair-count budget of {max_cells}"
        )
    n_in_in = delineation.intersect(target).pixel_count()
    n_in_out = delineation.difference(target).pixel_count()
    n_out_in = target.difference(delineation).pixel_count()
    n_out_out = n_cells - n_in_in - n_in_out - n_out_in
    return (n_in_in**2, n_out_out**2, n_in_out**2, n_out_in**2)


def classic_rand_index(
    delineation: Region,
    target: Region,
    max_cells: int = DEFAULT_PAIR_CELL_BUDGET,
) -> float:
    """Agreement ratio from :func:`classic_rand_pairs` (0 when vacuous)."""
    a, b, c, d = classic_rand_pairs(delineation, target, max_cells)
    denom = a + b + c + d
    return 0.0 if denom == 0 else (a + b) / denom
