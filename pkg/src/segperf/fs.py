"""Reading and writing rasters, masks and dataset manifests."""

import json
import logging
import warnings
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from segperf.dataset import (
    SPLIT_NAMES,
    BinaryMask,
    DatasetSplit,
    Image,
    LabeledPair,
)
from segperf.errors import IngestionError, ValidationError
from segperf.types import RgbConversion

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_LUMA = np.array([0.299, 0.587, 0.114])


def _open_raster(path: Path) -> npt.NDArray[Any]:
    if not path.is_file():
        raise IngestionError(path)
    try:
        with PILImage.open(path) as img:
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            return np.asarray(img)
    except (UnidentifiedImageError, OSError) as e:
        raise IngestionError(path, f"unreadable raster ({e})") from e


def to_grayscale(
    arr: npt.NDArray[Any], rgb: RgbConversion = "luma"
) -> npt.NDArray[np.float64]:
    """Reduce an HxW or HxWxC raster to one float channel."""
    data = np.asarray(arr, dtype=np.float64)
    if data.ndim == 2:
        return data
    if data.ndim != 3:
        raise ValidationError(f"Unsupported raster shape {data.shape}")
    if data.shape[2] in (2, 4):
        data = data[:, :, :-1]  # drop alpha
    if data.shape[2] == 1:
        return data[:, :, 0]
    match rgb:
        case "luma":
            return data[:, :, :3] @ _LUMA
        case "mean":
            return data.mean(axis=2)
        case "green":
            return data[:, :, 1]
        case _:
            raise ValidationError(f"Unknown RGB conversion {rgb!r}")


def read_image(path: Path, rgb: RgbConversion = "luma") -> Image:
    return Image.normalized(to_grayscale(_open_raster(path), rgb))


def read_wire_image(path: Path) -> Image:
    """Inverse of ``write_image``: 8-bit gray levels back to [0, 1], as written."""
    arr = _open_raster(path)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise IngestionError(path, f"expected 8-bit grayscale, got {arr.dtype} {arr.shape}")
    return Image(arr / 255.0)


def read_mask(path: Path) -> BinaryMask:
    """Any nonzero value in any channel is foreground."""
    arr = _open_raster(path)
    if arr.ndim == 3:
        arr = np.any(arr != 0, axis=2)
    return BinaryMask(arr)


def write_image(image: Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(image.to_uint8()).save(path)


def write_mask(mask: BinaryMask, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(mask.to_uint8()).save(path)


def read_mask_dir(path: Path) -> dict[str, BinaryMask]:
    """Read all PNG masks in a directory, keyed by file stem, sorted by name."""
    if not path.is_dir():
        raise IngestionError(path, "not a directory")
    masks: dict[str, BinaryMask] = {}
    for file in sorted(path.iterdir()):
        if file.is_file() and file.suffix.lower() == ".png":
            masks[file.stem] = read_mask(file)
    return masks


def read_image_dir(
    path: Path, rgb: RgbConversion = "luma", *, wire: bool = False
) -> dict[str, Image]:
    """Images keyed by file stem. ``wire`` reads files made by ``write_image``
    as they are, without stretching intensities."""
    if not path.is_dir():
        raise IngestionError(path, "not a directory")
    return {
        file.stem: read_wire_image(file) if wire else read_image(file, rgb)
        for file in sorted(path.iterdir())
        if file.is_file() and file.suffix.lower() in (".png", ".tif", ".tiff", ".jpg")
    }


def _read_manifest(path: Path) -> dict[str, list[dict[str, Any]]]:
    if not path.is_file():
        raise IngestionError(path, "missing manifest")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Invalid manifest {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError(f"Manifest {path} must be a JSON object")
    unknown = set(raw) - set(SPLIT_NAMES) - {"schema_version"}
    if unknown:
        raise ValidationError(f"Manifest {path} has unknown keys: {sorted(unknown)}")
    manifest: dict[str, list[dict[str, Any]]] = {}
    for name in SPLIT_NAMES:
        records = raw.get(name, [])
        if not isinstance(records, list):
            raise ValidationError(f"Manifest {path}: {name} must be a list")
        for i, record in enumerate(records):
            if not isinstance(record, dict) or "image_path" not in record:
                raise ValidationError(f"Manifest {path}: {name}[{i}] needs image_path")
        manifest[name] = records
    return manifest


def _load_record(
    root: Path, split: str, record: Mapping[str, Any], rgb: RgbConversion
) -> LabeledPair:
    image_path = root / record["image_path"]
    pair_id = str(record.get("id", Path(record["image_path"]).stem))
    label_path = record.get("label_path")
    if label_path is None and split != "extra_test":
        raise ValidationError(f"Pair {pair_id} in {split} needs a label_path")
    label = read_mask(root / label_path) if label_path is not None else None
    return LabeledPair(id=pair_id, image=read_image(image_path, rgb), label=label)


def load_dataset(
    root: Path,
    manifest: str = MANIFEST_NAME,
    *,
    rgb: RgbConversion = "luma",
    workers: int = 1,
) -> DatasetSplit:
    """Load every pair named in ``root/manifest``.

    Files are read in parallel when ``workers > 1``; ordering always follows the
    manifest.
    """
    records = _read_manifest(root / manifest)
    partitions: dict[str, list[LabeledPair]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for name in SPLIT_NAMES:
            partitions[name] = list(
                pool.map(partial(_load_record, root, name, rgb=rgb), records[name])
            )
    for name in ("train", "test"):
        if not partitions[name]:
            warnings.warn(f"Manifest {root / manifest} has an empty {name} partition")
    split = DatasetSplit(**partitions)
    logger.info("loaded dataset %s with sizes %s", root, split.sizes)
    return split


def write_dataset(
    split: DatasetSplit,
    root: Path,
    manifest: str = MANIFEST_NAME,
    *,
    write_labels: Optional[Sequence[str]] = None,
) -> Path:
    """Write a split as 8-bit PNGs plus a manifest that ``load_dataset`` reads back.

    ``write_labels`` limits which partitions keep their labels on disk (all by
    default); the others are written as unlabeled cohorts.
    """
    keep = set(SPLIT_NAMES if write_labels is None else write_labels)
    doc: dict[str, Any] = {"schema_version": 1}
    for name, pairs in split.partitions():
        records: list[dict[str, str]] = []
        for pair in pairs:
            image_rel = f"{name}/images/{pair.id}.png"
            write_image(pair.image, root / image_rel)
            record = {"id": pair.id, "image_path": image_rel}
            if pair.label is not None and name in keep:
                label_rel = f"{name}/labels/{pair.id}.png"
                write_mask(pair.label, root / label_rel)
                record["label_path"] = label_rel
            records.append(record)
        doc[name] = records
    path = root / manifest
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
