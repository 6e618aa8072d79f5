"""Assignment of candidate delineations to targets and global aggregation.

Two strategies: greedy one-to-one pairing by descending overlap, and
per-target nearest centroid (not one-to-one; distance ties keep the
delineation with the lowest score).  Global scores average per-target
scores, counting unmatched targets as zero; outputs are canonically
ordered so results are independent of input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

from .geometry import PlotFrame, Shape, rasterize
from .metrics import iou

LabeledShape = tuple[Hashable, Shape]

MIN_OF_TIES = "min_of_ties"
MEAN_DIVIDED_BY_COUNT = "mean_divided_by_count"
PENALTY_MODES = (MIN_OF_TIES, MEAN_DIVIDED_BY_COUNT)


@dataclass(frozen=True)
class MatchPair:
    target_id: Hashable
    delineation_id: Hashable
    pairing_score: float


@dataclass(frozen=True)
class MatchResult:
    """Pairs plus leftovers; pairs are sorted by target id then delineation id."""

    pairs: tuple[MatchPair, ...]
    unmatched_targets: tuple[Hashable, ...]
    unmatched_delineations: tuple[Hashable, ...]
    strategy: str


@dataclass(frozen=True)
class PerTargetScore:
    target_id: Hashable
    score: float
    n_assigned: int


@dataclass(frozen=True)
class GlobalScore:
    """Mean and spread of per-target scores under one penalty mode.

    Under the count penalty, spurious delineations matched to no target
    appear as zero-score rows (target_id None) so they drag the mean down;
    under min-of-ties they are only reported.
    """

    mean: float
    std_dev: float
    per_target: tuple[PerTargetScore, ...]
    penalty_mode: str
    n_unmatched_delineations: int = 0


def _key(identifier: Hashable) -> tuple[str, str]:
    return (type(identifier).__name__, str(identifier))


def _sorted_ids(ids) -> tuple[Hashable, ...]:
    return tuple(sorted(ids, key=_key))


def match_max_iou(
    delineations: Sequence[LabeledShape],
    targets: Sequence[LabeledShape],
    frame: PlotFrame,
) -> MatchResult:
    """Greedy one-to-one matching in descending rasterized-overlap order.

    Zero-overlap pairs never match.  Ties break on target id then
    delineation id, so shuffled inputs give identical results.
    """
    if not targets:
        raise ValueError("at least one target is required")
    target_px = {tid: rasterize(shape, frame) for tid, shape in targets}
    delin_px = {did: rasterize(shape, frame) for did, shape in delineations}

    candidates = []
    for tid, t_region in target_px.items():
        for did, d_region in delin_px.items():
            if t_region.is_empty and d_region.is_empty:
                continue
            score = iou(d_region, t_region)
            if score > 0.0:
                candidates.append((score, tid, did))
    candidates.sort(key=lambda item: (-item[0], _key(item[1]), _key(item[2])))

    taken_targets: set[Hashable] = set()
    taken_delins: set[Hashable] = set()
    pairs = []
    for score, tid, did in candidates:
        if tid in taken_targets or did in taken_delins:
            continue
        taken_targets.add(tid)
        taken_delins.add(did)
        pairs.append(MatchPair(tid, did, score))

    pairs.sort(key=lambda p: (_key(p.target_id), _key(p.delineation_id)))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_targets=_sorted_ids(tid for tid, _ in targets if tid not in taken_targets),
        unmatched_delineations=_sorted_ids(did for did, _ in delineations if did not in taken_delins),
        strategy="max_iou",
    )


def match_nearest_center(
    delineations: Sequence[LabeledShape],
    targets: Sequence[LabeledShape],
    score_fn: Callable[[Hashable, Hashable], float] | None = None,
) -> MatchResult:
    """Give every target its nearest delineation by centroid distance.

    Not one-to-one: a central delineation may serve several targets.
    Exact distance ties keep the delineation whose ``score_fn`` value is
    lowest (the recommended pessimistic choice); without a ``score_fn``
    ties fall back to id order.
    """
    if not targets:
        raise ValueError("at least one target is required")
    pairs = []
    matched_delins: set[Hashable] = set()
    unmatched_targets = []
    for tid, t_shape in targets:
        tx, ty = t_shape.centroid
        best: tuple[float, Hashable] | None = None
        tied: list[Hashable] = []
        for did, d_shape in delineations:
            dx, dy = d_shape.centroid
            dist = math.hypot(dx - tx, dy - ty)
            if best is None or dist < best[0]:
                best = (dist, did)
                tied = [did]
            elif dist == best[0]:
                tied.append(did)
        if best is None:
            unmatched_targets.append(tid)
            continue
        if len(tied) > 1:
            if score_fn is not None:
                chosen = min(tied, key=lambda did: (score_fn(tid, did), _key(did)))
            else:
                chosen = min(tied, key=_key)
        else:
            chosen = tied[0]
        matched_delins.add(chosen)
        pairs.append(MatchPair(tid, chosen, best[0]))

    pairs.sort(key=lambda p: (_key(p.target_id), _key(p.delineation_id)))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_targets=_sorted_ids(unmatched_targets),
        unmatched_delineations=_sorted_ids(
            did for did, _ in delineations if did not in matched_delins
        ),
        strategy="nearest_center",
    )


def aggregate(
    match: MatchResult,
    scores: Mapping[tuple[Hashable, Hashable], float],
    penalty_mode: str = MIN_OF_TIES,
) -> GlobalScore:
    """Fold per-pair scores into one global figure.

    Every matched pair must have an entry in ``scores`` keyed
    (target_id, delineation_id).  Unmatched targets score zero.  With
    several delineations on one target, min-of-ties keeps the worst score
    while the count penalty averages and divides by the assignment count.
    """
    if penalty_mode not in PENALTY_MODES:
        raise ValueError(f"unknown penalty mode {penalty_mode!r}")
    target_ids = {p.target_id for p in match.pairs} | set(match.unmatched_targets)
    if not target_ids:
        raise ValueError("cannot aggregate over an empty target set")

    by_target: dict[Hashable, list[float]] = {}
    for pair in match.pairs:
        key = (pair.target_id, pair.delineation_id)
        if key not in scores:
            raise ValueError(f"no score supplied for pair {key!r}")
        by_target.setdefault(pair.target_id, []).append(scores[key])

    rows = []
    for tid in _sorted_ids(target_ids):
        vals = by_target.get(tid)
        if not vals:
            rows.append(PerTargetScore(tid, 0.0, 0))
        elif penalty_mode == MIN_OF_TIES:
            rows.append(PerTargetScore(tid, min(vals), len(vals)))
        else:
            rows.append(PerTargetScore(tid, (sum(vals) / len(vals)) / len(vals), len(vals)))

    n_unmatched = len(match.unmatched_delineations)
    if penalty_mode == MEAN_DIVIDED_BY_COUNT:
        rows.extend(PerTargetScore(None, 0.0, 0) for _ in range(n_unmatched))

    values = [r.score for r in rows]
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return GlobalScore(
        mean=mean,
        std_dev=math.sqrt(var),
        per_target=tuple(rows),
        penalty_mode=penalty_mode,
        n_unmatched_delineations=n_unmatched,
    )
