"""BOP-style pose scoring: MSSD, MSPD, average recall, MAE and visibility bins.

The VSD metric needs a depth renderer and is not computed; the combined
score is the mean of the MSSD and MSPD recalls and is labelled
"AR (no-VSD)" everywhere it is reported.
"""

import json
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from poselab.errors import ConfigError, DataError, EmptyInput, EmptyModel, PoseLabError
from poselab.models.dataset import ObjectModel
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose
from poselab.models.results import (
    BinStats,
    EvalRecord,
    Failure,
    ObjectScores,
    RecallCurve,
    Report,
    ThresholdGrid,
    pixel_scale,
)
from poselab.services.geometry import geodesic_angle, project_points, projective_centre
from poselab.services.storage import write_csv

logger = logging.getLogger(__name__)

VISIBILITY_BINS = 10
MIN_BOX_SIZE = 1e-3


def bbox_jitter(
    bbox: BoundingBox, magnitude: float, seed: int | Sequence[int] | np.random.Generator
) -> BoundingBox:
    """Perturb corner and size by uniform noise of up to ``magnitude`` x (w, h)."""
    if not 0.0 <= magnitude <= 0.5:
        raise ConfigError(f"jitter magnitude must lie in [0, 0.5], got {magnitude}")
    if magnitude == 0.0:
        return bbox
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dx, dy, dw, dh = rng.uniform(-magnitude, magnitude, size=4)
    return BoundingBox(
        bx=bbox.bx + dx * bbox.w,
        by=bbox.by + dy * bbox.h,
        w=max(bbox.w * (1.0 + dw), MIN_BOX_SIZE),
        h=max(bbox.h * (1.0 + dh), MIN_BOX_SIZE),
    )


def _symmetric_gt_points(gt: Pose, model: ObjectModel) -> np.ndarray:
    if model.vertices.shape[0] == 0:
        raise EmptyModel(f"object {model.object_id} has no vertices")
    # (S, N, 3): GT pose composed with every symmetry
    rotations = np.stack([gt.R @ S for S in model.symmetries])
    return np.einsum("sij,nj->sni", rotations, model.vertices) + gt.t


def mssd(est: Pose, gt: Pose, model: ObjectModel) -> float:
    """Maximum symmetry-aware surface distance (metres)."""
    gt_points = _symmetric_gt_points(gt, model)
    est_points = est.transform(model.vertices)
    return float(np.linalg.norm(est_points[None] - gt_points, axis=2).max(axis=1).min())


def mspd(est: Pose, gt: Pose, model: ObjectModel, K: CameraIntrinsics) -> float:
    """Maximum symmetry-aware projection distance (pixels)."""
    if model.vertices.shape[0] == 0:
        raise EmptyModel(f"object {model.object_id} has no vertices")
    est_proj = project_points(model.vertices, est.R, est.t, K)
    errors = []
    for S in model.symmetries:
        gt_proj = project_points(model.vertices, gt.R @ S, gt.t, K)
        errors.append(np.linalg.norm(est_proj - gt_proj, axis=1).max())
    return float(min(errors))


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray, symmetries: list[np.ndarray]) -> float:
    """Symmetry-aware geodesic rotation error in degrees."""
    return float(np.degrees(min(geodesic_angle(R_est, R_gt @ S) for S in symmetries)))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    """Euclidean translation error (metres)."""
    return float(np.linalg.norm(np.asarray(t_est) - np.asarray(t_gt)))


def centre_error_px(est: Pose, gt: Pose, K: CameraIntrinsics) -> float:
    """Mean absolute error of the projective centre over x and y (pixels)."""
    c_est = projective_centre(est.t, K)
    c_gt = projective_centre(gt.t, K)
    return 0.5 * (abs(c_est.cx - c_gt.cx) + abs(c_est.cy - c_gt.cy))


def recall_curve(errors: Sequence[float] | np.ndarray, thresholds: Sequence[float]) -> RecallCurve:
    """Recall at each threshold (fraction of errors strictly below it) and their mean."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyInput("recall of an empty error set")
    recalls = [float(np.mean(errors < th)) for th in thresholds]
    return RecallCurve(
        thresholds=[float(t) for t in thresholds], recalls=recalls, average=float(np.mean(recalls))
    )


def subsample_model(model: ObjectModel, max_points: int, seed: int = 0) -> ObjectModel:
    """Model with at most ``max_points`` vertices (fixed-seed subset)."""
    if model.vertices.shape[0] <= max_points:
        return model
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(model.vertices.shape[0], size=max_points, replace=False))
    return model.model_copy(update={"vertices": model.vertices[keep]})


def visibility_bin(visibility: float) -> int:
    """Index of the 10%-wide visibility bin; 1.0 falls in the last bin."""
    return min(int(np.floor(visibility * VISIBILITY_BINS + 1e-9)), VISIBILITY_BINS - 1)


def box_stats(values: Sequence[float] | np.ndarray, low: float, high: float) -> BinStats:
    """Quartiles and 1.5 IQR whiskers of the finite ``values``."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return BinStats(bin_low=low, bin_high=high, count=0)
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return BinStats(
        bin_low=low,
        bin_high=high,
        count=int(values.size),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
    )


def _binned(visibilities: np.ndarray, values: np.ndarray) -> list[BinStats]:
    bins = np.array([visibility_bin(v) for v in visibilities], dtype=int)
    return [
        box_stats(values[bins == b], b / VISIBILITY_BINS, (b + 1) / VISIBILITY_BINS)
        for b in range(VISIBILITY_BINS)
    ]


def _scores(frame: pd.DataFrame, grid: ThresholdGrid) -> ObjectScores:
    ar_mssd = recall_curve(frame["mssd_norm"], grid.mssd).average
    ar_mspd = recall_curve(frame["mspd_norm"], grid.mspd).average
    scored = frame[frame["ok"]]

    def mean(column: str) -> float:
        return float(scored[column].mean()) if len(scored) else float("nan")

    return ObjectScores(
        count=len(frame),
        ar_mssd=ar_mssd,
        ar_mspd=ar_mspd,
        ar=(ar_mssd + ar_mspd) / 2.0,
        mae_centre_px=mean("centre_px"),
        mae_distance_mm=mean("distance_mm"),
        mean_rotation_error_deg=mean("rotation_deg"),
        mean_translation_error_mm=mean("translation_mm"),
    )


def score_records(
    records: Sequence[EvalRecord],
    models: dict[int, ObjectModel],
    grid: ThresholdGrid | None = None,
    max_points: int = 5000,
    subsample_seed: int = 0,
) -> tuple[pd.DataFrame, list[Failure]]:
    """Per-record errors, sorted by (scene, image, object).

    A record that cannot be scored gets infinite MSSD/MSPD errors (it counts
    as a miss in every recall) and is listed as a failure.
    """
    grid = grid or ThresholdGrid()
    reduced = {k: subsample_model(m, max_points, subsample_seed) for k, m in models.items()}
    ordered = sorted(records, key=lambda r: (r.scene_id, r.image_id, r.object_id))
    rows, failures = [], []
    fine = np.asarray(grid.fine_mspd)
    for rec in ordered:
        row = {
            "scene_id": rec.scene_id,
            "image_id": rec.image_id,
            "object_id": rec.object_id,
            "visibility": rec.visibility,
        }
        try:
            if rec.est_pose is None:
                raise DataError("no estimate")
            if rec.object_id not in reduced:
                raise EmptyModel(f"no model for object {rec.object_id}")
            model = reduced[rec.object_id]
            r = pixel_scale(rec.image_width)
            mssd_err = mssd(rec.est_pose, rec.gt_pose, model)
            mspd_err = mspd(rec.est_pose, rec.gt_pose, model, rec.intrinsics)
            row.update(
                ok=True,
                mssd=mssd_err,
                mspd=mspd_err,
                mssd_norm=mssd_err / model.diameter,
                mspd_norm=mspd_err / r,
                mspd_fine_recall=float(np.mean(mspd_err / r < fine)),
                centre_px=centre_error_px(rec.est_pose, rec.gt_pose, rec.intrinsics),
                distance_mm=abs(rec.est_pose.t[2] - rec.gt_pose.t[2]) * 1000.0,
                rotation_deg=rotation_error_deg(rec.est_pose.R, rec.gt_pose.R, model.symmetries),
                translation_mm=translation_error(rec.est_pose.t, rec.gt_pose.t) * 1000.0,
            )
        except PoseLabError as exc:
            logger.warning("record %s/%s/%s not scored: %s",
                           rec.scene_id, rec.image_id, rec.object_id, exc)
            failures.append(
                Failure(scene_id=rec.scene_id, image_id=rec.image_id,
                        object_id=rec.object_id, reason=str(exc))
            )
            row.update(
                ok=False,
                mssd=np.inf,
                mspd=np.inf,
                mssd_norm=np.inf,
                mspd_norm=np.inf,
                mspd_fine_recall=0.0,
                centre_px=np.nan,
                distance_mm=np.nan,
                rotation_deg=np.nan,
                translation_mm=np.nan,
            )
        rows.append(row)
    return pd.DataFrame(rows), failures


def aggregate_report(
    records: Sequence[EvalRecord],
    models: dict[int, ObjectModel],
    grid: ThresholdGrid | None = None,
    max_points: int = 5000,
    subsample_seed: int = 0,
) -> Report:
    """Per-object and pooled scores plus visibility-binned distributions."""
    if not records:
        raise EmptyInput("no records to evaluate")
    grid = grid or ThresholdGrid()
    frame, failures = score_records(records, models, grid, max_points, subsample_seed)
    per_object = {
        int(obj_id): _scores(group, grid) for obj_id, group in frame.groupby("object_id", sort=True)
    }
    visibilities = frame["visibility"].to_numpy()
    report = Report(
        overall=_scores(frame, grid),
        per_object=per_object,
        mssd_curve=recall_curve(frame["mssd_norm"], grid.mssd),
        mspd_curve=recall_curve(frame["mspd_norm"], grid.mspd),
        visibility_bins_mspd_error=_binned(visibilities, frame["mspd"].to_numpy()),
        visibility_bins_mspd_recall=_binned(visibilities, frame["mspd_fine_recall"].to_numpy()),
        visibility_bins_centre_error=_binned(visibilities, frame["centre_px"].to_numpy()),
        failures=failures,
    )
    logger.info(
        "%d records, %d failures: AR_MSSD=%.3f AR_MSPD=%.3f %s=%.3f",
        len(frame), len(failures), report.overall.ar_mssd, report.overall.ar_mspd,
        report.ar_label, report.overall.ar,
    )
    return report


def per_object_table(report: Report) -> pd.DataFrame:
    """One row per object plus an ``all`` row."""
    rows = [{"object_id": str(k), **v.model_dump()} for k, v in sorted(report.per_object.items())]
    rows.append({"object_id": "all", **report.overall.model_dump()})
    return pd.DataFrame(rows).rename(columns={"ar": report.ar_label})


def bins_table(report: Report) -> pd.DataFrame:
    """Box-plot statistics of every visibility bin, one row per (quantity, bin)."""
    rows = []
    for quantity, bins in (
        ("mspd_error_px", report.visibility_bins_mspd_error),
        ("mspd_fine_recall", report.visibility_bins_mspd_recall),
        ("centre_error_px", report.visibility_bins_centre_error),
    ):
        rows += [{"quantity": quantity, **b.model_dump()} for b in bins]
    return pd.DataFrame(rows)


def write_report(report: Report, out_path: str | Path) -> list[Path]:
    """Write the report JSON plus per-object and box-plot CSVs beside it."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
    objects_csv = write_csv(per_object_table(report), out_path.with_suffix(".objects.csv"))
    bins_csv = write_csv(bins_table(report), out_path.with_suffix(".boxplots.csv"))
    return [out_path, objects_csv, bins_csv]


def compare_methods(reports: dict[str, Report]) -> pd.DataFrame:
    """Rotation AR_MSPD and translation MAEs side by side, one column per method."""
    rows = []
    for metric, getter in (
        ("AR_MSPD", lambda s: s.ar_mspd),
        ("MAE centre (px)", lambda s: s.mae_centre_px),
        ("MAE distance (mm)", lambda s: s.mae_distance_mm),
    ):
        row = {"metric": metric, "object_id": "all"}
        row.update({name: getter(rep.overall) for name, rep in reports.items()})
        rows.append(row)
        object_ids = sorted(set().union(*(rep.per_object for rep in reports.values())))
        for obj_id in object_ids:
            row = {"metric": metric, "object_id": str(obj_id)}
            row.update(
                {
                    name: getter(rep.per_object[obj_id]) if obj_id in rep.per_object else np.nan
                    for name, rep in reports.items()
                }
            )
            rows.append(row)
    return pd.DataFrame(rows)
