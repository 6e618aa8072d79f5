"""GeoJSON annotation ingest, score/report export, run configuration.

Annotations travel as GeoJSON FeatureCollections in plot-local meters.
Axis-aligned 5-vertex rings are detected as boxes; everything else must be
a simple polygon.  A feature needs a valid geometry and an annotator_id;
plot_id, crown_id and role are optional.  Any CRS member passes through
untouched.  Scores export as CSV (fixed column order) or JSON (lossless
round trip); constructed region sets export as role-tagged GeoJSON for
inspection in GIS tools.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import shapely
import shapely.geometry
import shapely.ops

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiments import AnnotatorEnsemble, CrownGroup, SweepGrid, SweepRecord
from .geometry import (
    PlotFrame,
    PolyShape,
    RandCrownsError,
    RectShape,
    Region,
    Shape,
    rasterize,
)
from .matching import GlobalScore, PerTargetScore, PENALTY_MODES
from .metrics import ScoreRecord, iou
from .regions import RcParams, RegionSet

log = logging.getLogger(__name__)

REGION_ROLES = ("r_a", "r_o", "r_e", "r_b")

SCORE_CSV_COLUMNS = (
    "plot_id",
    "crown_id",
    "annotator_target",
    "annotator_delin",
    "a",
    "b",
    "c",
    "d",
    "rc",
    "iou",
    "iou_crowns",
    "flags",
)

SWEEP_CSV_COLUMNS = (
    "alpha_m",
    "omega_m",
    "gamma",
    "var_rc",
    "var_iou",
    "var_iouc",
    "n_skipped",
    "n_clipped",
)


class AnnotationParseError(RandCrownsError):
    """The file is not readable as GeoJSON."""


class AnnotationValidationError(RandCrownsError):
    """The GeoJSON parsed but violates the annotation schema."""


class EmptyEnsembleError(RandCrownsError):
    """No crown group is labeled by every annotator."""


@dataclass(frozen=True)
class AnnotationFeature:
    index: int
    shape: Shape
    annotator_id: str
    plot_id: str | None = None
    crown_id: str | None = None
    role: str | None = None


@dataclass(frozen=True)
class AnnotationFile:
    features: tuple[AnnotationFeature, ...]
    crs: Any = None
    path: str | None = None


def load_annotations(path: str | Path) -> AnnotationFile:
    """Parse and validate one GeoJSON FeatureCollection of annotations."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return parse_annotations(data, source=str(path))


def parse_annotations(data: Any, source: str = "<memory>") -> AnnotationFile:
    if not isinstance(data, dict) or data.get("type") != "FeatureCollection":
        raise AnnotationValidationError(f"{source}: expected a GeoJSON FeatureCollection")
    raw_features = data.get("features")
    if not isinstance(raw_features, list):
        raise AnnotationValidationError(f"{source}: 'features' must be a list")

    features = []
    missing_annotator: list[int] = []
    problems: list[str] = []
    for index, raw in enumerate(raw_features):
        props = raw.get("properties") or {}
        annotator = props.get("annotator_id")
        if annotator is None or str(annotator) == "":
            missing_annotator.append(index)
            continue
        try:
            shape = shape_from_geojson(raw.get("geometry"))
        except (ValueError, TypeError) as exc:
            problems.append(f"feature {index}: {exc}")
            continue
        role = props.get("role")
        if role is not None and role not in ("target", "delineation"):
            problems.append(f"feature {index}: role must be 'target' or 'delineation'")
            continue
        features.append(
            AnnotationFeature(
                index=index,
                shape=shape,
                annotator_id=str(annotator),
                plot_id=None if props.get("plot_id") is None else str(props["plot_id"]),
                crown_id=None if props.get("crown_id") is None else str(props["crown_id"]),
                role=role,
            )
        )
    if missing_annotator:
        problems.insert(
            0, f"features missing annotator_id at indices {missing_annotator}"
        )
    if problems:
        raise AnnotationValidationError(f"{source}: " + "; ".join(problems))
    return AnnotationFile(features=tuple(features), crs=data.get("crs"), path=source)


def shape_from_geojson(geometry: Any) -> Shape:
    """Build a shape from a GeoJSON Polygon, detecting axis-aligned boxes."""
    if not isinstance(geometry, dict) or geometry.get("type") != "Polygon":
        raise ValueError("geometry must be a GeoJSON Polygon")
    rings = geometry.get("coordinates")
    if not isinstance(rings, list) or not rings:
        raise ValueError("polygon needs at least an exterior ring")
    for ring in rings:
        for pt in ring:
            if len(pt) < 2 or not all(math.isfinite(float(v)) for v in pt[:2]):
                raise ValueError("coordinates must be finite numbers")
    exterior = [(float(x), float(y)) for x, y, *_ in rings[0]]
    holes = tuple(tuple((float(x), float(y)) for x, y, *_ in ring) for ring in rings[1:])
    if not holes:
        box = _detect_box(exterior)
        if box is not None:
            return box
    return PolyShape(tuple(exterior), holes)


def _detect_box(ring: Sequence[tuple[float, float]]) -> RectShape | None:
    pts = list(ring)
    if len(pts) == 5 and pts[0] == pts[-1]:
        pts = pts[:-1]
    if len(pts) != 4:
        return None
    xs = sorted({p[0] for p in pts})
    ys = sorted({p[1] for p in pts})
    if len(xs) != 2 or len(ys) != 2:
        return None
    corners = {(x, y) for x in xs for y in ys}
    if set(pts) != corners:
        return None
    # Axis-aligned traversal: consecutive corners share exactly one coordinate.
    for k in range(4):
        x1, y1 = pts[k]
        x2, y2 = pts[(k + 1) % 4]
        if x1 != x2 and y1 != y2:
            return None
    return RectShape.from_bounds(xs[0], ys[0], xs[1], ys[1])


def shape_to_geojson(shape: Shape) -> dict:
    if isinstance(shape, RectShape):
        x_lo, y_lo, x_hi, y_hi = shape.bounds
        ring = [[x_lo, y_lo], [x_hi, y_lo], [x_hi, y_hi], [x_lo, y_hi], [x_lo, y_lo]]
        return {"type": "Polygon", "coordinates": [ring]}
    rings = [list(map(list, shape.exterior)) + [list(shape.exterior[0])]]
    for hole in shape.holes:
        rings.append(list(map(list, hole)) + [list(hole[0])])
    return {"type": "Polygon", "coordinates": rings}


def _feature_sort_key(feature: AnnotationFeature):
    x_lo, y_lo, x_hi, y_hi = feature.shape.bounds
    return (
        feature.annotator_id,
        round(x_lo, 9),
        round(y_lo, 9),
        round(x_hi, 9),
        round(y_hi, 9),
        feature.crown_id or "",
    )


def group_by_crown(
    files: Sequence[AnnotationFile],
    tolerance: float,
    frame: PlotFrame,
) -> AnnotatorEnsemble:
    """Assemble complete crown groups across annotators.

    When every feature carries a crown_id, groups are (plot_id, crown_id)
    buckets.  Otherwise features are clustered greedily by pairwise
    rasterized overlap at or above ``tolerance`` (deterministic and
    independent of input order).  Groups missing any annotator are dropped
    with a logged count, mirroring the pruning of unshared labels.
    """
    features = [f for file in files for f in file.features]
    annotators = tuple(sorted({f.annotator_id for f in features}))
    if len(annotators) < 2:
        raise AnnotationValidationError("grouping needs features from at least two annotators")

    if all(f.crown_id is not None for f in features):
        groups = _group_by_ids(features)
    else:
        groups = _group_by_overlap(features, tolerance, frame)

    complete = []
    dropped = 0
    for key in sorted(groups):
        members = groups[key]
        by_ann = {f.annotator_id: f for f in members}
        if len(by_ann) == len(members) and set(by_ann) == set(annotators):
            plot_id, crown_id = key
            complete.append(
                CrownGroup(
                    plot_id=plot_id,
                    crown_id=crown_id,
                    shapes={ann: by_ann[ann].shape for ann in annotators},
                )
            )
        else:
            dropped += 1
    if dropped:
        log.info("dropped %d crown group(s) not labeled by every annotator", dropped)
    if not complete:
        raise EmptyEnsembleError("no crown is labeled by every annotator")
    return AnnotatorEnsemble(frame=frame, annotator_ids=annotators, crowns=tuple(complete))


def _group_by_ids(features) -> dict[tuple[str, str], list[AnnotationFeature]]:
    groups: dict[tuple[str, str], list[AnnotationFeature]] = {}
    for f in sorted(features, key=_feature_sort_key):
        key = (f.plot_id or "plot", f.crown_id)
        groups.setdefault(key, []).append(f)
    return groups


def _group_by_overlap(
    features, tolerance: float, frame: PlotFrame
) -> dict[tuple[str, str], list[AnnotationFeature]]:
    groups: dict[tuple[str, str], list[AnnotationFeature]] = {}
    by_plot: dict[str, list[AnnotationFeature]] = {}
    for f in features:
        by_plot.setdefault(f.plot_id or "plot", []).append(f)

    for plot_id in sorted(by_plot):
        members = sorted(by_plot[plot_id], key=_feature_sort_key)
        rasters = [rasterize(f.shape, frame) for f in members]
        pairs = []
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                if members[i].annotator_id == members[j].annotator_id:
                    continue
                overlap = iou(rasters[i], rasters[j]) if not (
                    rasters[i].is_empty and rasters[j].is_empty
                ) else 0.0
                if overlap >= tolerance:
                    pairs.append((overlap, i, j))
        pairs.sort(key=lambda item: (-item[0], item[1], item[2]))

        cluster_of = list(range(len(members)))

        def find(k: int) -> int:
            while cluster_of[k] != k:
                cluster_of[k] = cluster_of[cluster_of[k]]
                k = cluster_of[k]
            return k

        cluster_annotators = [{f.annotator_id} for f in members]
        for _, i, j in pairs:
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            if cluster_annotators[ri] & cluster_annotators[rj]:
                continue  # would give one annotator two labels in a group
            cluster_of[rj] = ri
            cluster_annotators[ri] |= cluster_annotators[rj]

        clusters: dict[int, list[AnnotationFeature]] = {}
        for k, f in enumerate(members):
            clusters.setdefault(find(k), []).append(f)
        for serial, root in enumerate(sorted(clusters), start=1):
            groups[(plot_id, f"{plot_id}_crown{serial}")] = clusters[root]
    return groups


def ensemble_to_geojson(ensemble: AnnotatorEnsemble) -> dict:
    features = []
    for crown in ensemble.crowns:
        for ann in ensemble.annotator_ids:
            features.append(
                {
                    "type": "Feature",
                    "geometry": shape_to_geojson(crown.shapes[ann]),
                    "properties": {
                        "annotator_id": ann,
                        "plot_id": crown.plot_id,
                        "crown_id": crown.crown_id,
                    },
                }
            )
    return {"type": "FeatureCollection", "features": features}


def write_json(data: Any, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n",
        encoding="utf-8",
    )


@dataclass(frozen=True)
class ScoreRow:
    """One scored (delineation, target) pair plus its provenance ids."""

    plot_id: str
    crown_id: str
    annotator_target: str
    annotator_delin: str
    record: ScoreRecord
    clipped: bool = False

    @property
    def flags(self) -> str:
        parts = []
        if self.record.degenerate:
            parts.append("degenerate")
        if self.clipped:
            parts.append("clipped")
        return "|".join(parts)


def export_scores(
    rows: Sequence[ScoreRow],
    path: str | Path,
    fmt: str = "csv",
    global_score: GlobalScore | None = None,
) -> None:
    """Write score rows as CSV (fixed columns) or JSON (lossless)."""
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SCORE_CSV_COLUMNS)
            for row in rows:
                rec = row.record
                writer.writerow(
                    [
                        row.plot_id,
                        row.crown_id,
                        row.annotator_target,
                        row.annotator_delin,
                        rec.a,
                        rec.b,
                        rec.c,
                        rec.d,
                        repr(rec.rand_crowns),
                        repr(rec.iou),
                        repr(rec.iou_crowns),
                        row.flags,
                    ]
                )
    elif fmt == "json":
        payload = {
            "records": [_score_row_to_dict(row) for row in rows],
            "global": None if global_score is None else global_score_to_dict(global_score),
        }
        write_json(payload, path)
    else:
        raise ValueError(f"unknown score format {fmt!r}")


def _score_row_to_dict(row: ScoreRow) -> dict:
    data = dataclasses.asdict(row)
    data["flags"] = row.flags
    return data


def load_scores(path: str | Path) -> tuple[list[ScoreRow], GlobalScore | None]:
    """Read back a JSON score export (inverse of :func:`export_scores`)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = []
    for item in data["records"]:
        rec = item["record"]
        rows.append(
            ScoreRow(
                plot_id=item["plot_id"],
                crown_id=item["crown_id"],
                annotator_target=item["annotator_target"],
                annotator_delin=item["annotator_delin"],
                record=ScoreRecord(**rec),
                clipped=item["clipped"],
            )
        )
    glob = data.get("global")
    return rows, None if glob is None else _global_score_from_dict(glob)


def global_score_to_dict(score: GlobalScore) -> dict:
    return {
        "mean": score.mean,
        "std_dev": score.std_dev,
        "penalty_mode": score.penalty_mode,
        "n_unmatched_delineations": score.n_unmatched_delineations,
        "per_target": [
            {"target_id": row.target_id, "score": row.score, "n_assigned": row.n_assigned}
            for row in score.per_target
        ],
    }


def _global_score_from_dict(data: dict) -> GlobalScore:
    return GlobalScore(
        mean=data["mean"],
        std_dev=data["std_dev"],
        penalty_mode=data["penalty_mode"],
        n_unmatched_delineations=data["n_unmatched_delineations"],
        per_target=tuple(
            PerTargetScore(row["target_id"], row["score"], row["n_assigned"])
            for row in data["per_target"]
        ),
    )


def export_sweep_csv(records: Sequence[SweepRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    repr(rec.alpha_m),
                    repr(rec.omega_m),
                    repr(rec.gamma),
                    "" if rec.var_rand_crowns is None else repr(rec.var_rand_crowns),
                    "" if rec.var_iou is None else repr(rec.var_iou),
                    "" if rec.var_iou_crowns is None else repr(rec.var_iou_crowns),
                    rec.n_skipped,
                    rec.n_clipped,
                ]
            )


def region_to_geojson_geometry(region: Region) -> dict:
    """Polygonize a region as the union of its cell rectangles."""
    boxes = []
    frame = region.frame
    res = frame.resolution
    mask = region.mask
    for j in range(frame.height):
        row = mask[j]
        i = 0
        while i < frame.width:
            if row[i]:
                start = i
                while i < frame.width and row[i]:
                    i += 1
                boxes.append(
                    shapely.geometry.box(
                        frame.x_min + start * res,
                        frame.y_min + j * res,
                        frame.x_min + i * res,
                        frame.y_min + (j + 1) * res,
                    )
                )
            else:
                i += 1
    if not boxes:
        return {"type": "MultiPolygon", "coordinates": []}
    merged = shapely.ops.unary_union(boxes)
    if merged.geom_type == "Polygon":
        merged = shapely.geometry.MultiPolygon([merged])
    return shapely.geometry.mapping(merged)


def region_from_geojson_geometry(geometry: dict, frame: PlotFrame) -> Region:
    """Rasterize a Polygon/MultiPolygon geometry back onto a frame."""
    gtype = geometry.get("type")
    if gtype == "Polygon":
        polys = [geometry["coordinates"]]
    elif gtype == "MultiPolygon":
        polys = list(geometry["coordinates"])
    else:
        raise ValueError(f"cannot rasterize geometry type {gtype!r}")
    region = Region.empty(frame)
    for rings in polys:
        shape = PolyShape(
            tuple((float(x), float(y)) for x, y, *_ in rings[0]),
            tuple(tuple((float(x), float(y)) for x, y, *_ in ring) for ring in rings[1:]),
        )
        region = region.union(rasterize(shape, frame))
    return region


def export_regions(
    region_sets: Sequence[tuple[dict, RegionSet]],
    path: str | Path,
) -> None:
    """Write region sets as role-tagged GeoJSON features for GIS overlays."""
    features = []
    for props, rs in region_sets:
        for role, region in zip(REGION_ROLES, (rs.r_a, rs.r_o, rs.r_e, rs.r_b)):
            features.append(
                {
                    "type": "Feature",
                    "geometry": region_to_geojson_geometry(region),
                    "properties": {
                        **props,
                        "role": role,
                        "pixel_count": region.pixel_count(),
                        "edge_width_m": rs.epsilon,
                        "achieved_ratio": rs.achieved_ratio,
                        "clipped": rs.clipped,
                    },
                }
            )
    write_json({"type": "FeatureCollection", "features": features}, path)


@dataclass(frozen=True)
class RunConfig:
    """Frame, metric parameters and pipeline switches for one run."""

    frame: PlotFrame
    params: RcParams
    matching_strategy: str = "max_iou"
    penalty_mode: str = "min_of_ties"
    sweep_grid: SweepGrid | None = None
    seed: int = 0

    def __post_init__(self):
        if self.matching_strategy not in ("max_iou", "nearest_center"):
            raise ValueError(f"unknown matching strategy {self.matching_strategy!r}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"unknown penalty mode {self.penalty_mode!r}")


def load_run_config(path: str | Path) -> RunConfig:
    """Read a TOML or JSON run configuration (format picked by extension)."""
    raw = Path(path).read_bytes()
    suffix = Path(path).suffix.lower()
    try:
        if suffix == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"{path}: cannot parse config: {exc}") from exc
    return run_config_from_dict(data, source=str(path))


def run_config_from_dict(data: dict, source: str = "<memory>") -> RunConfig:
    try:
        frame_spec = data["frame"]
        frame = PlotFrame(
            x_min=float(frame_spec["x_min"]),
            y_min=float(frame_spec["y_min"]),
            x_max=float(frame_spec["x_max"]),
            y_max=float(frame_spec["y_max"]),
            resolution=float(frame_spec["resolution_m"]),
        )
        params_spec = data["params"]
        params = RcParams(
            alpha_m=float(params_spec["alpha_m"]),
            omega_m=float(params_spec["omega_m"]),
            gamma=float(params_spec["gamma"]),
            delta_m=None if params_spec.get("delta_m") is None else float(params_spec["delta_m"]),
            ratio_tol=None
            if params_spec.get("ratio_tol") is None
            else float(params_spec["ratio_tol"]),
        )
    except KeyError as exc:
        raise AnnotationValidationError(f"{source}: missing config key {exc}") from exc
    matching = data.get("matching", {})
    sweep_spec = data.get("sweep")
    grid = None
    if sweep_spec is not None:
        try:
            grid = SweepGrid(
                alpha=tuple(float(v) for v in sweep_spec["alpha"]),
                omega=tuple(float(v) for v in sweep_spec["omega"]),
                gamma=tuple(float(v) for v in sweep_spec["gamma"]),
            )
        except KeyError as exc:
            raise AnnotationValidationError(f"{source}: missing sweep key {exc}") from exc
    return RunConfig(
        frame=frame,
        params=params,
        matching_strategy=matching.get("strategy", "max_iou"),
        penalty_mode=matching.get("penalty", "min_of_ties"),
        sweep_grid=grid,
        seed=int(data.get("seed", 0)),
    )
