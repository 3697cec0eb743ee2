"""Samples, annotation files and dataset directories.

A dataset directory holds ``<id>.png`` frames, ``<id>.json`` annotations
and an optional ``manifest.json``. Annotation files look like::

    {"id": "000003",
     "polygons": {"oolemma": [[x, y], ...], "pipette": [[x, y], ...]},
     "needle_tip": [x, y],
     "image_size": [width, height]}          # optional, else read from the PNG

Operator files for the agreement tool add ``"operator"`` and ``"round"``.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .imgproc import PreprocessConfig, preprocess
from .metrics import CLASSES, AnnotationRecord, polygon_to_mask
from .nn_ops import grid_to_norm as tip_to_norm  # noqa: F401  (pixel-center -> [-1, 1])
from .nn_ops import norm_to_grid as norm_to_tip  # noqa: F401

log = logging.getLogger(__name__)

_UMASK = os.umask(0)
os.umask(_UMASK)


@dataclass
class Sample:
    image: np.ndarray  # uint8 [S, S]
    masks: np.ndarray  # uint8 [classes, S, S], binary
    tip: np.ndarray  # (x, y) pixel-center units
    id: str = ""
    polygons: dict = field(default_factory=dict, repr=False)


# --- atomic file output ------------------------------------------------------------
def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_png(path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


# --- annotations -------------------------------------------------------------------------
def annotation_dict(sample_id: str, polygons: dict, tip, image_size=None, **extra) -> dict:
    out = {
        "id": sample_id,
        "polygons": {k: [[float(x), float(y)] for x, y in v] for k, v in polygons.items()},
        "needle_tip": [float(tip[0]), float(tip[1])],
    }
    if image_size is not None:
        out["image_size"] = [int(image_size[0]), int(image_size[1])]
    out.update(extra)
    return out


def read_annotation(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            ann = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read annotation {path}: {exc}") from exc
    for key in ("polygons", "needle_tip"):
        if key not in ann:
            raise InputError(f"annotation {path} lacks required key '{key}'")
    return ann


def record_from_annotation(ann: dict, path="<memory>", default_size=(512, 512)) -> AnnotationRecord:
    for key in ("operator", "round"):
        if key not in ann:
            raise InputError(f"operator annotation {path} lacks '{key}'")
    size = tuple(ann.get("image_size", default_size))
    return AnnotationRecord(
        frame_id=str(ann.get("id", Path(str(path)).stem)),
        operator_id=str(ann["operator"]),
        round=int(ann["round"]),
        polygons={k: v for k, v in ann["polygons"].items()},
        tip=(float(ann["needle_tip"][0]), float(ann["needle_tip"][1])),
        image_size=(int(size[0]), int(size[1])),
    )


def load_records(directory, default_size=(512, 512)) -> list[AnnotationRecord]:
    files = sorted(Path(directory).rglob("*.json"))
    files = [f for f in files if f.name != "manifest.json"]
    if not files:
        raise InputError(f"no annotation files under {directory}")
    return [record_from_annotation(read_annotation(f), f, default_size) for f in files]


# --- samples ------------------------------------------------------------------------------------
def sample_from_annotation(image: np.ndarray, ann: dict, size: int, pre: PreprocessConfig | None, sample_id: str) -> Sample:
    """Preprocess a raw frame to ``size x size`` and rasterize its labels at that size."""
    h0, w0 = image.shape[:2]
    sx, sy = size / w0, size / h0
    img = preprocess(image, size, pre)
    polys = {}
    masks = []
    for cls in CLASSES:
        if cls not in ann["polygons"]:
            raise InputError(f"annotation {sample_id} lacks polygon '{cls}'")
        poly = [[x * sx, y * sy] for x, y in ann["polygons"][cls]]
        polys[cls] = poly
        masks.append(polygon_to_mask(poly, size))
    tx, ty = ann["needle_tip"]
    tip = np.array([(tx + 0.5) * sx - 0.5, (ty + 0.5) * sy - 0.5])
    return Sample(image=img, masks=np.stack(masks), tip=tip, id=sample_id, polygons=polys)


def list_sample_ids(directory, split: str | None = None) -> list[str]:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        with open(manifest, encoding="utf-8") as fh:
            entries = json.load(fh)["samples"]
        return [e["id"] for e in entries if split is None or e.get("split") == split]
    return sorted(str(p.relative_to(directory).with_suffix("")) for p in directory.rglob("*.png"))


def load_samples(directory, size: int, pre: PreprocessConfig | None = None, split: str | None = None, strict: bool = True):
    """Load every annotated frame of ``directory``.

    With ``strict=False`` frames missing an annotation are skipped; the
    second return value lists them.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"data directory does not exist: {directory}")
    samples, missing = [], []
    for sid in list_sample_ids(directory, split):
        png, js = directory / f"{sid}.png", directory / f"{sid}.json"
        if not js.exists():
            if strict:
                raise InputError(f"frame {png} has no annotation {js}")
            missing.append(sid)
            continue
        samples.append(sample_from_annotation(read_image(png), read_annotation(js), size, pre, sid))
    if missing:
        log.warning("skipped %d frame(s) without annotations in %s", len(missing), directory)
    return samples, missing
