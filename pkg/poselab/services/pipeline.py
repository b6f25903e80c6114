"""End-to-end stages: inference, LUT baseline, evaluation and ablation sweeps."""

import logging
import multiprocessing
import time
from collections.abc import Iterator
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from poselab.errors import DataError, DegenerateInput, InvalidDistance, ParseError
from poselab.models.dataset import DatasetManifest, LabeledCrop, ManifestRecord
from poselab.models.geometry import BoundingBox, Pose
from poselab.models.results import AR_LABEL, EvalRecord, Report, ThresholdGrid
from poselab.models.settings import AblationAxis, LabelVariant, RunConfig
from poselab.services.crops import (
    CropDataset,
    class_index,
    filter_by_visibility,
    make_labeled_crop,
    to_tensor,
)
from poselab.services.cvae import LabelEmbeddedCVAE, encode_dataset, load_cvae, save_cvae
from poselab.services.evaluation import (
    aggregate_report,
    bbox_jitter,
    bins_table,
    compare_methods,
    write_report,
)
from poselab.services.geometry import is_rotation
from poselab.services.lut import Codebook, build_codebook, lut_estimate
from poselab.services.regression import PoseRegressor, load_heads, save_heads
from poselab.services.storage import (
    Storage,
    file_sha256,
    read_manifest,
    read_models,
    write_csv,
    write_run_manifest,
)
from poselab.services.training import train_cvae, train_heads, training_records

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]
MM_PER_M = 1000.0
RESULT_ROTATION_TOL = 1e-4


def _format_floats(values: np.ndarray) -> str:
    return " ".join(f"{float(v):.9g}" for v in np.asarray(values).reshape(-1))


def _result_row(record: ManifestRecord, pose: Pose, elapsed: float) -> dict:
    return {
        "scene_id": record.scene_id,
        "im_id": record.image_id,
        "obj_id": record.object_id,
        "score": 1.0,
        "R": _format_floats(pose.R),
        "t": _format_floats(pose.t * MM_PER_M),
        "time": elapsed,
    }


def evaluation_instances(
    manifest: DatasetManifest, config: RunConfig
) -> Iterator[tuple[ManifestRecord, BoundingBox]]:
    """Visible test records in key order, each with its (possibly jittered) box."""
    settings = config.evaluation
    records = filter_by_visibility(manifest.test, settings.visibility_threshold)
    if not records:
        raise DataError(f"no test records with visibility >= {settings.visibility_threshold}")
    for record in sorted(records, key=lambda r: r.key):
        seed = [settings.jitter_seed, record.scene_id, record.image_id, record.object_id]
        yield record, bbox_jitter(record.bbox, settings.bbox_jitter, seed)


def _checked_classes(manifest: DatasetManifest, model: LabelEmbeddedCVAE) -> dict[int, int]:
    classes = class_index(manifest.object_ids)
    if len(classes) != model.num_classes:
        raise DataError(
            f"dataset has {len(classes)} objects but the CVAE was trained on {model.num_classes}"
        )
    return classes


@torch.no_grad()
def _encode_crop(model: LabelEmbeddedCVAE, crop: LabeledCrop, device) -> np.ndarray:
    image = to_tensor(crop.image)[None].to(device)
    label = torch.from_numpy(crop.label)[None].to(device)
    return model.encode(image, label).mu.cpu().numpy()[0]


def run_inference(
    manifest: DatasetManifest,
    model: LabelEmbeddedCVAE,
    regressor: PoseRegressor,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> pd.DataFrame:
    """BOP-style results for every visible test instance.

    ``time`` is the wall time of one encoder pass plus the three head passes.
    Instances whose prediction is degenerate are skipped and logged.
    """
    classes = _checked_classes(manifest, model)
    model.eval()
    rows, skipped = [], 0
    for record, bbox in evaluation_instances(manifest, config):
        crop = make_labeled_crop(manifest, record, classes, bbox=bbox)
        start = time.perf_counter()
        try:
            mu = _encode_crop(model, crop, device)
            pose = regressor.predict(mu, crop.label, bbox, record.intrinsics)
        except (DegenerateInput, InvalidDistance) as exc:
            skipped += 1
            logger.warning("no estimate for %s: %s", record.key, exc)
            continue
        rows.append(_result_row(record, pose, time.perf_counter() - start))
    if skipped:
        logger.warning("%d instance(s) without an estimate", skipped)
    logger.info("estimated %d poses", len(rows))
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def infer(
    data_dir: str | Path,
    cvae_path: str | Path,
    heads_path: str | Path,
    out_path: str | Path,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> Path:
    """Load both checkpoints, estimate test poses and write the results CSV."""
    manifest = read_manifest(data_dir)
    model = load_cvae(cvae_path, device)
    regressor = load_heads(heads_path, file_sha256(cvae_path), device)
    return write_csv(run_inference(manifest, model, regressor, config, device), out_path)


def codebook_from_manifest(
    manifest: DatasetManifest,
    model: LabelEmbeddedCVAE,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> Codebook:
    """Encode every retained training record (unjittered) into a codebook."""
    train, _ = training_records(manifest, config.training.visibility_threshold)
    missing = [r.key for r in train if r.gt_pose is None]
    if missing:
        raise DataError(f"{len(missing)} training record(s) lack ground-truth poses")
    classes = _checked_classes(manifest, model)
    dataset = CropDataset(manifest, train, classes, with_targets=False)
    mu = encode_dataset(model, dataset, config.training.batch_size, device)
    return build_codebook(
        mu,
        np.array([r.object_id for r in train]),
        np.stack([r.gt_pose.R for r in train]),
        np.array([r.gt_pose.t[2] for r in train]),
    )


def run_lut_baseline(
    manifest: DatasetManifest,
    model: LabelEmbeddedCVAE,
    codebook: Codebook,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> pd.DataFrame:
    """Results of the nearest-neighbour baseline in the same CSV layout as inference."""
    classes = _checked_classes(manifest, model)
    rows = []
    for record, bbox in evaluation_instances(manifest, config):
        crop = make_labeled_crop(manifest, record, classes, bbox=bbox)
        start = time.perf_counter()
        mu = _encode_crop(model, crop, device)
        pose = lut_estimate(mu, record.object_id, bbox, record.intrinsics, codebook)
        rows.append(_result_row(record, pose, time.perf_counter() - start))
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def baseline_lut(
    data_dir: str | Path,
    cvae_path: str | Path,
    out_path: str | Path,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> tuple[Path, Path]:
    """Build (and store) the codebook, then write LUT results; returns (csv, codebook)."""
    manifest = read_manifest(data_dir)
    model = load_cvae(cvae_path, device)
    codebook = codebook_from_manifest(manifest, model, config, device)
    out_path = Path(out_path)
    codebook_path = codebook.save(out_path.with_suffix(".codebook"))
    results = run_lut_baseline(manifest, model, codebook, config, device)
    return write_csv(results, out_path), codebook_path


def read_results(path: str | Path) -> dict[tuple[int, int, int], Pose]:
    """Parse a BOP results CSV into poses keyed by (scene_id, im_id, obj_id)."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"R": str, "t": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"cannot read results: {exc}", path=str(path)) from exc
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", path=str(path), line=1)
    poses: dict[tuple[int, int, int], Pose] = {}
    for index, row in frame.iterrows():
        line = int(index) + 2
        try:
            R = np.array(row["R"].split(), dtype=float).reshape(3, 3)
            t = np.array(row["t"].split(), dtype=float).reshape(3) / MM_PER_M
            key = (int(row["scene_id"]), int(row["im_id"]), int(row["obj_id"]))
        except (AttributeError, ValueError) as exc:
            raise ParseError(f"bad row: {exc}", path=str(path), line=line) from exc
        if key in poses:
            logger.warning("%s:%d: duplicate estimate for %s ignored", path, line, key)
            continue
        if not (is_rotation(R, tol=RESULT_ROTATION_TOL) and np.all(np.isfinite(t)) and t[2] > 0):
            logger.warning("%s:%d: invalid pose for %s scored as missing", path, line, key)
            continue
        poses[key] = Pose.from_arrays(R, t)
    return poses


def evaluation_records(
    manifest: DatasetManifest, estimates: dict[tuple[int, int, int], Pose], config: RunConfig
) -> list[EvalRecord]:
    """Pair visible test records with their estimates; unmatched records get none."""
    records = filter_by_visibility(manifest.test, config.evaluation.visibility_threshold)
    if not records:
        raise DataError("no test records to evaluate")
    pairs = []
    for record in records:
        if record.gt_pose is None:
            raise DataError(f"test record {record.key} has no ground-truth pose")
        pairs.append(
            EvalRecord(
                scene_id=record.scene_id,
                image_id=record.image_id,
                object_id=record.object_id,
                est_pose=estimates.get(record.key),
                gt_pose=record.gt_pose,
                intrinsics=record.intrinsics,
                visibility=record.visibility,
                image_width=record.intrinsics.width,
            )
        )
    return pairs


def evaluate(
    data_dir: str | Path,
    results_path: str | Path,
    out_path: str | Path,
    config: RunConfig,
    compare_path: str | Path | None = None,
) -> tuple[Report, list[Path]]:
    """Score a results CSV; with ``compare_path`` also score the LUT results beside it."""
    manifest = read_manifest(data_dir)
    models = read_models(data_dir)
    settings = config.evaluation
    grid = ThresholdGrid()

    def score(path: str | Path) -> Report:
        records = evaluation_records(manifest, read_results(path), config)
        return aggregate_report(
            records, models, grid, settings.max_model_points, settings.subsample_seed
        )

    report = score(results_path)
    written = write_report(report, out_path)
    if compare_path is not None:
        lut = score(compare_path)
        out_path = Path(out_path)
        written.append(
            write_csv(
                compare_methods({"lut": lut, "regression": report}),
                out_path.with_suffix(".compare.csv"),
            )
        )
        bins = pd.concat(
            [
                bins_table(rep).assign(method=name)
                for name, rep in (("lut", lut), ("regression", report))
            ],
            ignore_index=True,
        )
        written.append(
            write_csv(
                bins[bins["quantity"] == "centre_error_px"],
                out_path.with_suffix(".compare_bins.csv"),
            )
        )
    return report, written


def ablation_configs(config: RunConfig, axis: AblationAxis) -> dict[str, RunConfig]:
    """One run config per value of ``axis``, keyed by the value's label."""
    settings = config.ablation
    if axis is AblationAxis.ALPHA:
        return {
            f"alpha={v:g}": config.model_copy(
                update={"cvae": config.cvae.model_copy(update={"alpha": v})}, deep=True
            )
            for v in settings.alpha_values
        }
    if axis is AblationAxis.LATENT_DIM:
        return {
            f"n={v}": config.model_copy(
                update={"cvae": config.cvae.model_copy(update={"latent_dim": v})}, deep=True
            )
            for v in settings.latent_dims
        }
    return {
        LabelVariant(v).value: config.model_copy(update={"label_variant": v}, deep=True)
        for v in settings.label_variants
    }


def train_and_evaluate(
    config: RunConfig, data_dir: str | Path, run_dir: str | Path, device: str = "cpu"
) -> dict[str, float]:
    """Fresh CVAE and heads, inference and evaluation in ``run_dir``; returns the ARs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(data_dir)
    cvae = train_cvae(manifest, config, device)
    cvae_path = save_cvae(cvae.model, run_dir / "cvae.pt", config.seed)
    write_csv(cvae.log, run_dir / "cvae.log.csv")
    heads = train_heads(manifest, cvae.model, config, device)
    save_heads(heads.regressor, run_dir / "heads.pt", file_sha256(cvae_path))
    write_csv(heads.log, run_dir / "heads.log.csv")
    results = write_csv(
        run_inference(manifest, cvae.model, heads.regressor, config, device),
        run_dir / "results.csv",
    )
    report, _ = evaluate(data_dir, results, run_dir / "report.json", config)
    for artifact in ("cvae.pt", "heads.pt", "results.csv", "report.json"):
        write_run_manifest(
            run_dir / artifact, ["ablate"], config.config_hash(), config.seed,
            config.model_dump(mode="json"),
        )
    return {
        "AR_MSSD": report.overall.ar_mssd,
        "AR_MSPD": report.overall.ar_mspd,
        AR_LABEL: report.overall.ar,
    }


def _run_entry(item: tuple[str, dict], data_dir: str, out_dir: str, device: str) -> dict:
    label, config_data = item
    config = RunConfig.model_validate(config_data)
    return train_and_evaluate(config, data_dir, Path(out_dir) / label, device)


def run_ablation(
    axis: AblationAxis | str,
    data_dir: str | Path,
    out_dir: str | Path,
    config: RunConfig,
    device: str = "cpu",
    parallel: bool | None = None,
) -> Path:
    """Train and score one run per axis value and write the comparison table.

    Every value trains from scratch in its own directory unless a stored
    summary with the same config hash is already in ``out_dir``. Rows of the
    table are AR_MSSD, AR_MSPD and AR (no-VSD); columns are the axis values.
    """
    axis = AblationAxis(axis)
    out_dir = Path(out_dir)
    configs = ablation_configs(config, axis)
    storage = Storage(out_dir)
    scores_by_label: dict[str, dict[str, float]] = {}
    for label, run_config in configs.items():
        key = f"{axis.value}_{label}"
        if not storage.exists(key):
            continue
        stored = storage.load(key)
        if isinstance(stored, dict) and stored.get("config_hash") == run_config.config_hash():
            logger.info("%s %s: reusing finished run", axis.value, label)
            scores_by_label[label] = stored["scores"]
    items = [
        (label, c.model_dump(mode="json"))
        for label, c in configs.items()
        if label not in scores_by_label
    ]
    worker = partial(_run_entry, data_dir=str(data_dir), out_dir=str(out_dir), device=device)
    parallel = config.ablation.parallel if parallel is None else parallel
    if parallel and len(items) > 1:
        with multiprocessing.get_context("spawn").Pool(len(items)) as pool:
            scores = pool.map(worker, items)
    else:
        scores = [worker(item) for item in items]

    for (label, _), values in zip(items, scores):
        storage.save(
            f"{axis.value}_{label}",
            {"config_hash": configs[label].config_hash(), "scores": values},
        )
        scores_by_label[label] = values
        logger.info("%s %s: %s", axis.value, label, values)
    table = pd.DataFrame(
        {label: scores_by_label[label] for label in configs}
    ).rename_axis("metric").reset_index()
    return write_csv(table, out_dir / f"ablation_{axis.value}.csv")
