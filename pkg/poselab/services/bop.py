"""BOP-format readers and writers.

Layout of a BOP split directory::

    <split>/<scene_id:06d>/scene_gt.json        {im_id: [{cam_R_m2c, cam_t_m2c (mm), obj_id}]}
    <split>/<scene_id:06d>/scene_camera.json    {im_id: {cam_K, depth_scale}}
    <split>/<scene_id:06d>/scene_gt_info.json   {im_id: [{bbox_obj, visib_fract, ...}]}
    <split>/<scene_id:06d>/rgb/<im_id:06d>.png
    <split>/<scene_id:06d>/mask/<im_id:06d>_<k:06d>.png
    <split>/<scene_id:06d>/mask_visib/<im_id:06d>_<k:06d>.png

Generated datasets also carry ``clean/<im_id:06d>_<k:06d>.png``: the object
rendered alone on black, used as the reconstruction target. Models live in
``models/`` (meshes) and ``models_eval/`` (surface points), both in
millimetres, described by ``models_info.json``.
"""

import json
import logging
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from poselab.errors import MissingField, ParseError
from poselab.models.dataset import DatasetManifest, ManifestRecord, ObjectModel, Split
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose

logger = logging.getLogger(__name__)

MM_PER_M = 1000.0

PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def read_json(path: Path) -> Any:
    """Load a JSON file, reporting the failing line on syntax errors."""
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ParseError("file not found", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=str(path), line=exc.lineno) from exc


def _field(entry: dict, key: str, path: Path) -> Any:
    if key not in entry:
        raise MissingField(key, path=str(path))
    return entry[key]


def _parse_ply_header(f) -> tuple[str, list[dict], int]:
    magic = f.readline().strip()
    if magic != b"ply":
        raise ParseError("not a PLY file", line=1)
    fmt = None
    elements: list[dict] = []
    line_no = 1
    while True:
        raw = f.readline()
        line_no += 1
        if not raw:
            raise ParseError("unterminated PLY header", line=line_no)
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append({"name": tokens[1], "count": int(tokens[2]), "props": []})
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before element", line=line_no)
            if tokens[1] == "list":
                elements[-1]["props"].append(("list", tokens[-1], tokens[2], tokens[3]))
            else:
                if tokens[1] not in PLY_TYPES:
                    raise ParseError(f"unknown PLY type '{tokens[1]}'", line=line_no)
                elements[-1]["props"].append((PLY_TYPES[tokens[1]], tokens[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format '{fmt}'", line=2)
    return fmt, elements, line_no


def read_ply_vertices(path: str | Path) -> np.ndarray:
    """Vertex positions (N, 3) of an ASCII or binary little-endian PLY file.

    Only the x, y, z properties of the ``vertex`` element are read; units
    are whatever the file uses (BOP models are in millimetres).
    """
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from exc
    with f:
        try:
            fmt, elements, header_lines = _parse_ply_header(f)
        except ParseError as exc:
            raise ParseError(str(exc), path=str(path), line=exc.line) from exc
        names = [e["name"] for e in elements]
        if "vertex" not in names:
            raise MissingField("element vertex", path=str(path))
        vertex_idx = names.index("vertex")
        vertex = elements[vertex_idx]
        prop_names = [p[1] for p in vertex["props"]]
        for axis in ("x", "y", "z"):
            if axis not in prop_names:
                raise MissingField(f"vertex property {axis}", path=str(path))
        if any(p[0] == "list" for p in vertex["props"]):
            raise ParseError("list properties on vertices are not supported", path=str(path))

        if fmt == "ascii":
            skip = sum(e["count"] for e in elements[:vertex_idx])
            cols = [prop_names.index(a) for a in ("x", "y", "z")]
            lines = f.read().decode("ascii", errors="replace").splitlines()
            start = skip
            body = lines[start : start + vertex["count"]]
            if len(body) < vertex["count"]:
                raise ParseError(
                    f"expected {vertex['count']} vertices, found {len(body)}",
                    path=str(path),
                    line=header_lines + start + len(body) + 1,
                )
            out = np.empty((vertex["count"], 3))
            for i, line in enumerate(body):
                tokens = line.split()
                try:
                    out[i] = [float(tokens[c]) for c in cols]
                except (IndexError, ValueError) as exc:
                    raise ParseError(
                        "malformed vertex line", path=str(path), line=header_lines + start + i + 1
                    ) from exc
            return out

        for element in elements[:vertex_idx]:
            if any(p[0] == "list" for p in element["props"]):
                raise ParseError(
                    f"cannot skip list element '{element['name']}' before vertices",
                    path=str(path),
                )
            dtype = np.dtype([(p[1], "<" + p[0]) for p in element["props"]])
            f.seek(dtype.itemsize * element["count"], 1)
        dtype = np.dtype([(p[1], "<" + p[0]) for p in vertex["props"]])
        data = f.read(dtype.itemsize * vertex["count"])
        if len(data) < dtype.itemsize * vertex["count"]:
            raise ParseError("truncated binary vertex data", path=str(path))
        arr = np.frombuffer(data, dtype=dtype, count=vertex["count"])
        return np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(float)


def write_ply(
    path: str | Path, vertices: np.ndarray, faces: list[list[int]] | None = None
) -> None:
    """Write an ASCII PLY with vertices and optional polygon faces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    faces = faces or []
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if faces:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices, dtype=float)]
    lines += [" ".join([str(len(face))] + [str(i) for i in face]) for face in faces]
    path.write_text("\n".join(lines) + "\n")


def load_object_models(models_dir: str | Path) -> dict[int, ObjectModel]:
    """Object models from ``models_info.json`` plus per-object PLY files.

    Vertices and diameters are converted from millimetres to metres;
    ``symmetries_discrete`` (row-major 4x4) contribute their rotation part.
    A sibling ``models_eval`` directory is preferred for vertices.
    """
    models_dir = Path(models_dir)
    info_path = models_dir / "models_info.json"
    info = read_json(info_path)
    eval_dir = models_dir.parent / "models_eval"
    models: dict[int, ObjectModel] = {}
    for key in sorted(info, key=int):
        entry = info[key]
        obj_id = int(key)
        diameter_mm = float(_field(entry, "diameter", info_path))
        ply_name = f"obj_{obj_id:06d}.ply"
        ply_path = eval_dir / ply_name if (eval_dir / ply_name).exists() else models_dir / ply_name
        vertices = read_ply_vertices(ply_path) / MM_PER_M
        symmetries = [np.eye(3)]
        for sym in entry.get("symmetries_discrete", []):
            T = np.asarray(sym, dtype=float).reshape(4, 4)
            if np.linalg.norm(T[:3, 3]) > 1.0:
                logger.warning("object %d: symmetry translation %s mm ignored", obj_id, T[:3, 3])
            symmetries.append(T[:3, :3])
        if entry.get("symmetries_continuous"):
            logger.warning(
                "object %d: continuous symmetries are not supported and were ignored", obj_id
            )
        try:
            models[obj_id] = ObjectModel(
                object_id=obj_id,
                name=str(entry.get("name", "")),
                vertices=vertices,
                diameter=diameter_mm / MM_PER_M,
                symmetries=symmetries,
            )
        except ValueError as exc:
            raise ParseError(f"object {obj_id}: {exc}", path=str(info_path)) from exc
    return models


def write_object_models(
    models_dir: str | Path,
    models: list[ObjectModel],
    faces: dict[int, tuple[np.ndarray, list[list[int]]]] | None = None,
) -> None:
    """Write ``models_info.json``, evaluation point clouds and optional meshes (mm)."""
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    info = {}
    for model in models:
        name = f"obj_{model.object_id:06d}.ply"
        write_ply(models_dir.parent / "models_eval" / name, model.vertices * MM_PER_M)
        if faces and model.object_id in faces:
            mesh_vertices, mesh_faces = faces[model.object_id]
            write_ply(models_dir / name, mesh_vertices * MM_PER_M, mesh_faces)
        symmetries = []
        for S in model.symmetries[1:]:
            T = np.eye(4)
            T[:3, :3] = S
            symmetries.append([float(v) for v in T.reshape(16)])
        lo, hi = model.vertices.min(axis=0) * MM_PER_M, model.vertices.max(axis=0) * MM_PER_M
        info[str(model.object_id)] = {
            "name": model.name,
            "diameter": model.diameter * MM_PER_M,
            "min_x": lo[0],
            "min_y": lo[1],
            "min_z": lo[2],
            "size_x": hi[0] - lo[0],
            "size_y": hi[1] - lo[1],
            "size_z": hi[2] - lo[2],
            "symmetries_discrete": symmetries,
        }
    with open(models_dir / "models_info.json", "w") as f:
        json.dump(info, f, indent=2, sort_keys=True, default=float)


def _image_path(scene_dir: Path, image_id: int) -> Path:
    for ext in (".png", ".jpg"):
        candidate = scene_dir / "rgb" / f"{image_id:06d}{ext}"
        if candidate.exists():
            return candidate
    return scene_dir / "rgb" / f"{image_id:06d}.png"


def _image_size(scene_dir: Path, image_ids: list[int]) -> tuple[int, int]:
    for parent in (scene_dir.parent.parent, scene_dir.parent):
        camera = parent / "camera.json"
        if camera.exists():
            data = read_json(camera)
            return int(_field(data, "width", camera)), int(_field(data, "height", camera))
    for image_id in image_ids:
        image = cv2.imread(str(_image_path(scene_dir, image_id)), cv2.IMREAD_UNCHANGED)
        if image is not None:
            return image.shape[1], image.shape[0]
    raise ParseError("cannot determine image size (no camera.json and no readable image)",
                     path=str(scene_dir))


def load_bop_scene(
    scene_dir: str | Path,
    split: Split | str = Split.TEST,
    image_size: tuple[int, int] | None = None,
) -> DatasetManifest:
    """Records of one BOP scene directory.

    Rotations are row-major 9-tuples, translations are converted from
    millimetres to metres, visibility is ``visib_fract`` of the ground-truth
    info file.
    """
    scene_dir = Path(scene_dir)
    split = Split(split)
    try:
        scene_id = int(scene_dir.name)
    except ValueError as exc:
        raise ParseError("scene directory name must be an integer id", path=str(scene_dir)) from exc
    gt_path = scene_dir / "scene_gt.json"
    cam_path = scene_dir / "scene_camera.json"
    info_path = scene_dir / "scene_gt_info.json"
    scene_gt = read_json(gt_path)
    scene_camera = read_json(cam_path)
    scene_info = read_json(info_path)

    image_ids = sorted(int(k) for k in scene_gt)
    width, height = image_size or _image_size(scene_dir, image_ids)

    records = []
    for image_id in image_ids:
        key = str(image_id)
        if key not in scene_camera:
            raise MissingField(key, path=str(cam_path))
        if key not in scene_info:
            raise MissingField(key, path=str(info_path))
        try:
            intrinsics = CameraIntrinsics.from_matrix(
                _field(scene_camera[key], "cam_K", cam_path), width, height
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"image {image_id}: bad cam_K: {exc}", path=str(cam_path)) from exc
        infos = scene_info[key]
        for k, gt in enumerate(scene_gt[key]):
            if k >= len(infos):
                raise ParseError(f"image {image_id}: no info entry for instance {k}",
                                 path=str(info_path))
            info = infos[k]
            x, y, w, h = (float(v) for v in _field(info, "bbox_obj", info_path))
            if w <= 0 or h <= 0:
                logger.warning("scene %d image %d instance %d: empty bbox, skipped",
                               scene_id, image_id, k)
                continue
            t_mm = _field(gt, "cam_t_m2c", gt_path)
            R = _field(gt, "cam_R_m2c", gt_path)
            try:
                t = np.asarray(t_mm, dtype=float).reshape(3) / MM_PER_M
                pose = Pose.from_arrays(np.asarray(R, dtype=float).reshape(9), t)
            except (TypeError, ValueError) as exc:
                raise ParseError(
                    f"image {image_id} instance {k}: {exc}", path=str(gt_path)
                ) from exc
            stem = f"{image_id:06d}_{k:06d}.png"
            optional = {
                name: str(scene_dir / folder / stem)
                for name, folder in (
                    ("target_path", "clean"),
                    ("mask_path", "mask"),
                    ("mask_visib_path", "mask_visib"),
                )
                if (scene_dir / folder / stem).exists()
            }
            records.append(
                ManifestRecord(
                    scene_id=scene_id,
                    image_id=image_id,
                    object_id=int(_field(gt, "obj_id", gt_path)),
                    split=split,
                    bbox=BoundingBox(bx=x, by=y, w=w, h=h),
                    intrinsics=intrinsics,
                    gt_pose=pose,
                    visibility=float(np.clip(float(_field(info, "visib_fract", info_path)), 0, 1)),
                    image_path=str(_image_path(scene_dir, image_id)),
                    **optional,
                )
            )
    logger.debug("scene %s: %d records", scene_dir, len(records))
    return DatasetManifest(root=scene_dir, records=records)


def write_scene_annotations(scene_dir: str | Path, records: list[ManifestRecord]) -> None:
    """Write scene_gt / scene_camera / scene_gt_info for records of one scene.

    Instance order within an image follows the record order.
    """
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    scene_gt: dict[str, list] = {}
    scene_camera: dict[str, dict] = {}
    scene_info: dict[str, list] = {}
    for record in records:
        key = str(record.image_id)
        if record.gt_pose is None:
            raise MissingField("gt_pose", path=str(scene_dir))
        scene_gt.setdefault(key, []).append(
            {
                "cam_R_m2c": list(record.gt_pose.rotation),
                "cam_t_m2c": [float(v * MM_PER_M) for v in record.gt_pose.translation],
                "obj_id": record.object_id,
            }
        )
        scene_camera[key] = {
            "cam_K": [float(v) for v in record.intrinsics.matrix.reshape(9)],
            "depth_scale": 1.0,
        }
        scene_info.setdefault(key, []).append(
            {"bbox_obj": record.bbox.as_list(), "visib_fract": record.visibility}
        )
    for name, data in (
        ("scene_gt.json", scene_gt),
        ("scene_camera.json", scene_camera),
        ("scene_gt_info.json", scene_info),
    ):
        with open(scene_dir / name, "w") as f:
            json.dump(data, f, indent=1, sort_keys=True)


def write_camera(dataset_dir: str | Path, intrinsics: CameraIntrinsics) -> None:
    """Dataset-level ``camera.json`` in BOP form."""
    data = {
        "cx": intrinsics.px,
        "cy": intrinsics.py,
        "fx": intrinsics.fx,
        "fy": intrinsics.fy,
        "width": intrinsics.width,
        "height": intrinsics.height,
        "depth_scale": 1.0,
    }
    with open(Path(dataset_dir) / "camera.json", "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def load_bop_split(split_dir: str | Path, split: Split | str) -> list[ManifestRecord]:
    """Records of every scene directory under ``split_dir``, in scene order."""
    split_dir = Path(split_dir)
    scene_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir() and p.name.isdigit())
    records: list[ManifestRecord] = []
    for scene_dir in scene_dirs:
        records.extend(load_bop_scene(scene_dir, split).records)
    logger.info("%s: %d scenes, %d records", split_dir, len(scene_dirs), len(records))
    return records
