"""Parametric multi-object scene generator.

Objects are flat-shaded, face-coloured polyhedra rendered with the painter's
algorithm. Each scene holds several objects at random poses on a cluttered
background, partly covered by random occluders. Every instance gets a full
mask, a visible mask, a visibility fraction and a clean target (the object
alone at the same pose on black). Output is written in BOP layout.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from poselab.errors import ConfigError
from poselab.models.dataset import DatasetManifest, ManifestRecord, ObjectModel, Split
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose, ProjectiveCentre
from poselab.models.settings import GeneratorConfig, parse_settings
from poselab.services.bop import write_camera, write_scene_annotations
from poselab.services.datasets import assign_train_val, model_diameter
from poselab.services.geometry import (
    axis_angle_rotation,
    backproject_centre,
    project_points,
    random_rotation,
)
from poselab.services.storage import write_manifest, write_models

logger = logging.getLogger(__name__)

IMAGES_PER_SCENE = 500
PLACEMENT_ATTEMPTS = 30
LIGHT_DIRECTION = np.array([0.3, -0.5, 1.0]) / np.linalg.norm([0.3, -0.5, 1.0])
SUBPIXEL_BITS = 4


@dataclass(frozen=True)
class ShapeSpec:
    """Polyhedral object: centred vertices (metres), outward polygons, face colours."""

    name: str
    vertices: np.ndarray
    faces: list[list[int]]
    colours: np.ndarray  # (F, 3) RGB in [0, 1]
    symmetries: list[np.ndarray] = field(default_factory=lambda: [np.eye(3)])


def _extrude(name: str, outline: np.ndarray, half_height: float, colours: np.ndarray,
             symmetries: list[np.ndarray] | None = None) -> ShapeSpec:
    """Prism over a counter-clockwise outline in the xy-plane."""
    n = len(outline)
    centre = outline.mean(axis=0)
    outline = outline - centre
    bottom = np.column_stack([outline, np.full(n, -half_height)])
    top = np.column_stack([outline, np.full(n, half_height)])
    faces = [list(range(n - 1, -1, -1)), list(range(n, 2 * n))]
    faces += [[i, (i + 1) % n, n + (i + 1) % n, n + i] for i in range(n)]
    return ShapeSpec(name, np.vstack([bottom, top]), faces, colours,
                     symmetries or [np.eye(3)])


def _z_symmetries(order: int) -> list[np.ndarray]:
    return [axis_angle_rotation([0, 0, 1], 2 * np.pi * k / order) for k in range(order)]


def _box4(size: float) -> ShapeSpec:
    a = 0.35 * size
    outline = np.array([[-a, -a], [a, -a], [a, a], [-a, a]])
    side = [0.85, 0.55, 0.15]
    colours = np.array([[0.2, 0.35, 0.9], [0.95, 0.9, 0.2]] + [side] * 4)
    return _extrude("box4", outline, 0.5 * size, colours, _z_symmetries(4))


def _wedge(size: float) -> ShapeSpec:
    outline = np.array([[-0.5, -0.4], [0.5, -0.4], [-0.1, 0.5]]) * size
    colours = np.array(
        [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.3, 0.3, 0.95], [0.95, 0.6, 0.1], [0.7, 0.2, 0.8]]
    )
    return _extrude("wedge", outline, 0.25 * size, colours)


def _lshape(size: float) -> ShapeSpec:
    outline = np.array(
        [[0, 0], [1, 0], [1, 0.35], [0.35, 0.35], [0.35, 1], [0, 1]], dtype=float
    ) * size - 0.5 * size
    colours = np.array(
        [[0.1, 0.7, 0.7], [0.9, 0.4, 0.6], [0.6, 0.9, 0.2], [0.95, 0.95, 0.95],
         [0.4, 0.2, 0.1], [0.3, 0.5, 0.95], [0.95, 0.3, 0.1], [0.5, 0.5, 0.2]]
    )
    return _extrude("lshape", outline, 0.2 * size, colours)


def _hexprism(size: float) -> ShapeSpec:
    angles = np.arange(6) * np.pi / 3
    outline = 0.45 * size * np.column_stack([np.cos(angles), np.sin(angles)])
    a, b = [0.95, 0.45, 0.45], [0.35, 0.75, 0.95]
    colours = np.array([[0.9, 0.9, 0.3], [0.4, 0.9, 0.4], a, b, a, b, a, b])
    return _extrude("hexprism", outline, 0.3 * size, colours, _z_symmetries(3))


def _tetra(size: float) -> ShapeSpec:
    s = 0.45 * size
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * s
    faces = []
    for face in ([0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]):
        p = vertices[face]
        normal = np.cross(p[1] - p[0], p[2] - p[0])
        faces.append(face if np.dot(normal, p.mean(axis=0)) > 0 else face[::-1])
    colours = np.array([[0.9, 0.3, 0.2], [0.2, 0.9, 0.5], [0.3, 0.4, 0.95], [0.95, 0.85, 0.3]])
    return ShapeSpec("tetra", vertices, faces, colours)


SHAPES: dict[str, Callable[[float], ShapeSpec]] = {
    "box4": _box4,
    "wedge": _wedge,
    "lshape": _lshape,
    "hexprism": _hexprism,
    "tetra": _tetra,
}


def build_shape(name: str, size: float) -> ShapeSpec:
    """Shape from the registry, scaled to ``size`` metres."""
    if name not in SHAPES:
        raise ConfigError(f"unknown shape '{name}'; choose from {sorted(SHAPES)}")
    return SHAPES[name](size)


def _face_normal(points: np.ndarray) -> np.ndarray:
    # Newell's method; valid for non-convex planar polygons
    normal = np.zeros(3)
    for i in range(len(points)):
        a, b = points[i], points[(i + 1) % len(points)]
        normal += [(a[1] - b[1]) * (a[2] + b[2]), (a[2] - b[2]) * (a[0] + b[0]),
                   (a[0] - b[0]) * (a[1] + b[1])]
    return normal / np.linalg.norm(normal)


def render_shape(
    shape: ShapeSpec, R: np.ndarray, t: np.ndarray, K: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Render a shape alone on black: (HxWx3 float image, HxW bool mask)."""
    image = np.zeros((K.height, K.width, 3), dtype=np.float32)
    mask = np.zeros((K.height, K.width), dtype=np.uint8)
    cam = shape.vertices @ R.T + t
    pixels = project_points(shape.vertices, R, t, K)
    scale = 1 << SUBPIXEL_BITS
    drawn = []
    for face, colour in zip(shape.faces, shape.colours):
        normal = _face_normal(cam[face])
        centroid = cam[face].mean(axis=0)
        if np.dot(normal, centroid) >= 0:
            continue
        shade = 0.35 + 0.65 * max(0.0, float(np.dot(normal, -LIGHT_DIRECTION)))
        drawn.append((centroid[2], face, np.clip(colour * shade, 0, 1)))
    for _, face, colour in sorted(drawn, key=lambda item: -item[0]):
        polygon = np.round(pixels[face] * scale).astype(np.int32)
        cv2.fillPoly(image, [polygon], colour.tolist(), lineType=cv2.LINE_8, shift=SUBPIXEL_BITS)
        cv2.fillPoly(mask, [polygon], 1, lineType=cv2.LINE_8, shift=SUBPIXEL_BITS)
    return image, mask.astype(bool)


def sample_surface(shape: ShapeSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted surface points plus all mesh vertices."""
    areas, frames = [], []
    for face in shape.faces:
        p = shape.vertices[face]
        normal = _face_normal(p)
        u = p[1] - p[0]
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        uv = np.column_stack([(p - p[0]) @ u, (p - p[0]) @ v]).astype(np.float32)
        x, y = uv[:, 0], uv[:, 1]
        areas.append(0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))
        frames.append((p[0], u, v, uv))
    weights = np.asarray(areas) / np.sum(areas)
    per_face = rng.multinomial(count, weights)
    points = [shape.vertices]
    for (origin, u, v, uv), n in zip(frames, per_face):
        if n == 0:
            continue
        lo, hi = uv.min(axis=0), uv.max(axis=0)
        kept: list[np.ndarray] = []
        while sum(len(k) for k in kept) < n:
            cand = rng.uniform(lo, hi, size=(2 * n + 4, 2))
            inside = np.array(
                [cv2.pointPolygonTest(uv, (float(a), float(b)), False) >= 0 for a, b in cand]
            )
            kept.append(cand[inside])
        samples = np.vstack(kept)[:n]
        points.append(origin + samples[:, :1] * u + samples[:, 1:] * v)
    return np.vstack(points)


def object_model(shape: ShapeSpec, object_id: int, eval_points: int, seed: int) -> ObjectModel:
    """Evaluation model of a generated shape."""
    vertices = sample_surface(shape, eval_points, np.random.default_rng([seed, object_id]))
    return ObjectModel(
        object_id=object_id,
        name=shape.name,
        vertices=vertices,
        diameter=model_diameter(vertices),
        symmetries=list(shape.symmetries),
    )


def _background(K: CameraIntrinsics, items: int, rng: np.random.Generator) -> np.ndarray:
    image = np.empty((K.height, K.width, 3), dtype=np.float32)
    image[:] = rng.uniform(0.1, 0.6, size=3)
    for _ in range(items):
        colour = rng.uniform(0, 1, size=3).tolist()
        kind = rng.integers(3)
        x, y = int(rng.integers(K.width)), int(rng.integers(K.height))
        extent = int(rng.integers(8, max(9, K.width // 6)))
        if kind == 0:
            cv2.rectangle(image, (x, y), (x + extent, y + int(rng.integers(8, extent + 9))),
                          colour, -1)
        elif kind == 1:
            cv2.circle(image, (x, y), extent // 2, colour, -1)
        else:
            end = (x + int(rng.integers(-extent, extent + 1)),
                   y + int(rng.integers(-extent, extent + 1)))
            cv2.line(image, (x, y), end, colour, int(rng.integers(1, 6)))
    return image


def _occluder(bbox: BoundingBox, K: CameraIntrinsics, rng: np.random.Generator) -> np.ndarray:
    cx, cy = bbox.centre
    centre = np.array([cx + rng.uniform(-0.6, 0.6) * bbox.w, cy + rng.uniform(-0.6, 0.6) * bbox.h])
    radius = rng.uniform(0.2, 0.5) * max(bbox.w, bbox.h)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=int(rng.integers(3, 8))))
    radii = radius * rng.uniform(0.5, 1.0, size=len(angles))
    points = centre + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    return cv2.convexHull(np.round(points).astype(np.int32))


def _overlaps(a: BoundingBox, b: BoundingBox, margin: float = 2.0) -> bool:
    return not (
        a.bx + a.w + margin <= b.bx
        or b.bx + b.w + margin <= a.bx
        or a.by + a.h + margin <= b.by
        or b.by + b.h + margin <= a.by
    )


@dataclass
class _Instance:
    object_id: int
    R: np.ndarray
    t: np.ndarray
    bbox: BoundingBox
    clean: np.ndarray
    mask: np.ndarray


def _place(
    shape: ShapeSpec, object_id: int, placed: list[_Instance], K: CameraIntrinsics,
    config: GeneratorConfig, rng: np.random.Generator,
) -> _Instance | None:
    for _ in range(PLACEMENT_ATTEMPTS):
        R = random_rotation(rng)
        tz = rng.uniform(*config.tz_range)
        centre = ProjectiveCentre(
            cx=rng.uniform(0.02, 0.98) * K.width, cy=rng.uniform(0.02, 0.98) * K.height
        )
        t = backproject_centre(centre, tz, K)
        pixels = project_points(shape.vertices, R, t, K)
        lo, hi = pixels.min(axis=0), pixels.max(axis=0)
        bbox = BoundingBox(bx=float(lo[0]), by=float(lo[1]),
                           w=float(max(hi[0] - lo[0], 1.0)), h=float(max(hi[1] - lo[1], 1.0)))
        if any(_overlaps(bbox, other.bbox) for other in placed):
            continue
        clean, mask = render_shape(shape, R, t, K)
        if mask.sum() == 0:
            continue
        return _Instance(object_id, R, t, bbox, clean, mask)
    return None


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.ndim == 3:
        data = cv2.cvtColor(np.round(image * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    else:
        data = image.astype(np.uint8) * 255
    if not cv2.imwrite(str(path), data):
        raise OSError(f"cannot write {path}")


@dataclass
class GeneratedDataset:
    """Result of :func:`generate_synthetic_dataset`."""

    manifest: DatasetManifest
    models: dict[int, ObjectModel]
    shapes: dict[int, ShapeSpec]


def _render_split(
    out_dir: Path, split_dir: str, split: Split, quota: int, shapes: dict[int, ShapeSpec],
    K: CameraIntrinsics, config: GeneratorConfig, rng: np.random.Generator,
) -> list[ManifestRecord]:
    remaining = {obj_id: quota for obj_id in shapes}
    records: list[ManifestRecord] = []
    image_index = 0
    stalled = 0
    while any(remaining.values()):
        scene_id, image_id = divmod(image_index, IMAGES_PER_SCENE)
        candidates = [obj_id for obj_id, left in remaining.items() if left > 0]
        count = min(config.objects_per_scene, len(candidates))
        chosen = rng.choice(candidates, size=count, replace=False)
        placed: list[_Instance] = []
        for obj_id in chosen:
            instance = _place(shapes[int(obj_id)], int(obj_id), placed, K, config, rng)
            if instance is not None:
                placed.append(instance)
        if not placed:
            stalled += 1
            if stalled > 100:
                raise ConfigError("objects cannot be placed; reduce object_size or tz_range")
            continue
        stalled = 0

        image = _background(K, config.clutter_items, rng)
        for inst in sorted(placed, key=lambda i: -i.t[2]):
            image[inst.mask] = inst.clean[inst.mask]
        occluded = np.zeros((K.height, K.width), dtype=np.uint8)
        for inst in placed:
            for _ in range(rng.poisson(config.occluders_per_object)):
                polygon = _occluder(inst.bbox, K, rng)
                colour = rng.uniform(0, 1, size=3).tolist()
                cv2.fillConvexPoly(image, polygon, colour)
                cv2.fillConvexPoly(occluded, polygon, 1)
        image = np.clip(image + rng.normal(0, 0.01, size=image.shape).astype(np.float32), 0, 1)

        scene = Path(split_dir) / f"{scene_id:06d}"
        rgb_path = scene / "rgb" / f"{image_id:06d}.png"
        _write_png(out_dir / rgb_path, image)
        nearer = np.zeros((K.height, K.width), dtype=bool)
        for k, inst in enumerate(sorted(placed, key=lambda i: i.t[2])):
            visible = inst.mask & ~occluded.astype(bool) & ~nearer
            nearer |= inst.mask
            stem = f"{image_id:06d}_{k:06d}.png"
            paths = {
                "target_path": scene / "clean" / stem,
                "mask_path": scene / "mask" / stem,
                "mask_visib_path": scene / "mask_visib" / stem,
            }
            _write_png(out_dir / paths["target_path"], inst.clean)
            _write_png(out_dir / paths["mask_path"], inst.mask)
            _write_png(out_dir / paths["mask_visib_path"], visible)
            records.append(
                ManifestRecord(
                    scene_id=scene_id,
                    image_id=image_id,
                    object_id=inst.object_id,
                    split=split,
                    bbox=inst.bbox,
                    intrinsics=K,
                    gt_pose=Pose.from_arrays(inst.R, inst.t),
                    visibility=float(visible.sum() / inst.mask.sum()),
                    image_path=rgb_path.as_posix(),
                    **{name: p.as_posix() for name, p in paths.items()},
                )
            )
            remaining[inst.object_id] -= 1
        image_index += 1
    return records


def generate_synthetic_dataset(
    config: GeneratorConfig | dict, out_dir: str | Path
) -> GeneratedDataset:
    """Generate train/val/test scenes, object models and manifests under ``out_dir``.

    Object ids are 1..K in the order of ``config.shapes``. Each object gets
    exactly ``images_per_object`` train+val records and
    ``test_images_per_object`` test records; the output is a function of
    the config (seed included) only.
    """
    config = parse_settings(GeneratorConfig, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    K = CameraIntrinsics(
        fx=config.fx, fy=config.fy, px=config.px, py=config.py,
        width=config.image_width, height=config.image_height,
    )
    shapes = {i + 1: build_shape(name, config.object_size) for i, name in enumerate(config.shapes)}
    rng = np.random.default_rng(config.seed)

    trainval = _render_split(out_dir, "train", Split.TRAIN, config.images_per_object,
                             shapes, K, config, rng)
    trainval = assign_train_val(trainval, config.val_fraction, config.seed)
    test = _render_split(out_dir, "test", Split.TEST, config.test_images_per_object,
                         shapes, K, config, rng)

    for split_dir, records in (("train", trainval), ("test", test)):
        by_scene: dict[int, list[ManifestRecord]] = {}
        for record in records:
            by_scene.setdefault(record.scene_id, []).append(record)
        for scene_id, scene_records in by_scene.items():
            write_scene_annotations(out_dir / split_dir / f"{scene_id:06d}", scene_records)
    write_camera(out_dir, K)

    models = {
        obj_id: object_model(shape, obj_id, config.eval_points, config.seed)
        for obj_id, shape in shapes.items()
    }
    write_models(
        out_dir,
        list(models.values()),
        {obj_id: (shape.vertices, shape.faces) for obj_id, shape in shapes.items()},
    )
    manifest = DatasetManifest(root=out_dir, records=trainval + test)
    write_manifest(manifest)
    logger.info(
        "generated %d train, %d val, %d test records for %d objects in %s",
        len(manifest.train), len(manifest.val), len(manifest.test), len(shapes), out_dir,
    )
    return GeneratedDataset(manifest=manifest, models=models, shapes=shapes)
