import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from segperf.dataset import BinaryMask, DatasetSplit, Image, LabeledPair
from segperf.errors import IngestionError, ValidationError
from segperf.fs import (
    load_dataset,
    read_image,
    read_image_dir,
    read_mask,
    read_mask_dir,
    read_wire_image,
    to_grayscale,
    write_dataset,
    write_image,
    write_mask,
)


def _quantized_image(seed: int, shape: tuple[int, int] = (12, 10)) -> Image:
    levels = np.random.default_rng(seed).integers(0, 256, size=shape)
    levels.flat[0], levels.flat[1] = 0, 255
    return Image(levels / 255.0)


def _pair(pair_id: str, seed: int, labeled: bool = True) -> LabeledPair:
    image = _quantized_image(seed)
    label = BinaryMask(image.pixels > 0.5) if labeled else None
    return LabeledPair(pair_id, image, label)


def test_image_and_mask_round_trip(tmp_path: Path) -> None:
    image = _quantized_image(0)
    mask = BinaryMask(image.pixels > 0.3)
    write_image(image, tmp_path / "img.png")
    write_mask(mask, tmp_path / "mask.png")
    assert read_image(tmp_path / "img.png") == image
    assert read_mask(tmp_path / "mask.png") == mask
    raw = np.asarray(PILImage.open(tmp_path / "mask.png"))
    assert set(np.unique(raw).tolist()) <= {0, 255}


def test_wire_images_keep_their_intensity_range(tmp_path: Path) -> None:
    dim = Image(np.linspace(0.2, 0.4, 12).reshape(3, 4).round(2))
    write_image(dim, tmp_path / "images" / "q.png")
    wire = read_wire_image(tmp_path / "images" / "q.png")
    np.testing.assert_allclose(wire.pixels, dim.pixels, atol=0.5 / 255)
    # the ingestion reader stretches to the full range instead
    assert read_image(tmp_path / "images" / "q.png").pixels.max() == 1.0
    assert read_image_dir(tmp_path / "images", wire=True)["q"] == wire
    PILImage.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(IngestionError, match="8-bit grayscale"):
        read_wire_image(tmp_path / "rgb.png")


def test_read_mask_any_channel_nonzero(tmp_path: Path) -> None:
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[0, 0, 2] = 1
    rgb[1, 1, 0] = 200
    PILImage.fromarray(rgb).save(tmp_path / "m.png")
    mask = read_mask(tmp_path / "m.png")
    assert mask.count == 2
    assert mask.bits[0, 0] and mask.bits[1, 1]


def test_to_grayscale_conversions() -> None:
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 100.0, 200.0, 50.0
    assert to_grayscale(rgb, "luma")[0, 0] == pytest.approx(0.299 * 100 + 0.587 * 200 + 0.114 * 50)
    assert to_grayscale(rgb, "mean")[0, 0] == pytest.approx(350 / 3)
    assert to_grayscale(rgb, "green")[0, 0] == 200.0
    rgba = np.concatenate([rgb, np.full((2, 2, 1), 255.0)], axis=2)
    assert to_grayscale(rgba, "green")[0, 0] == 200.0
    with pytest.raises(ValidationError):
        to_grayscale(np.zeros((2, 2, 2, 2)))


def test_missing_and_unreadable_files(tmp_path: Path) -> None:
    with pytest.raises(IngestionError):
        read_image(tmp_path / "nope.png")
    (tmp_path / "bad.png").write_text("not an image")
    with pytest.raises(IngestionError, match="bad.png"):
        read_mask(tmp_path / "bad.png")
    # ingestion problems are input validation errors
    assert IngestionError(tmp_path).exit_code == 2


def test_read_dirs_sorted_by_stem(tmp_path: Path) -> None:
    for name in ("b", "a", "c"):
        write_mask(BinaryMask.empty((3, 3)), tmp_path / "masks" / f"{name}.png")
        write_image(_quantized_image(1, (3, 3)), tmp_path / "images" / f"{name}.png")
    (tmp_path / "masks" / "notes.txt").write_text("ignored")
    assert list(read_mask_dir(tmp_path / "masks")) == ["a", "b", "c"]
    assert list(read_image_dir(tmp_path / "images")) == ["a", "b", "c"]
    with pytest.raises(IngestionError):
        read_mask_dir(tmp_path / "missing")


@pytest.mark.parametrize("workers", [1, 4])
def test_write_then_load_dataset(tmp_path: Path, workers: int) -> None:
    split = DatasetSplit(
        train=[_pair("t0", 0), _pair("t1", 1)],
        validation=[_pair("v0", 2)],
        test=[_pair("s0", 3), _pair("s1", 4), _pair("s2", 5)],
        extra_test=[_pair("e0", 6, labeled=False)],
    )
    manifest = write_dataset(split, tmp_path)
    loaded = load_dataset(manifest.parent, manifest.name, workers=workers)
    assert loaded.sizes == split.sizes
    for (_, original), (_, again) in zip(split.partitions(), loaded.partitions()):
        assert [p.id for p in again] == [p.id for p in original]
        for a, b in zip(original, again):
            assert a.image == b.image
            assert a.label == b.label


def test_write_dataset_can_withhold_labels(tmp_path: Path) -> None:
    split = DatasetSplit(train=[_pair("t0", 0)], test=[_pair("s0", 1)], extra_test=[_pair("e0", 2)])
    write_dataset(split, tmp_path, write_labels=("train", "test"))
    loaded = load_dataset(tmp_path)
    assert loaded.extra_test[0].label is None
    assert not (tmp_path / "extra_test" / "labels").exists()


def test_manifest_errors(tmp_path: Path) -> None:
    with pytest.raises(IngestionError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"training": []}))
    with pytest.raises(ValidationError, match="unknown keys"):
        load_dataset(tmp_path)
    write_image(_quantized_image(0), tmp_path / "x.png")
    (tmp_path / "manifest.json").write_text(
        json.dumps({"train": [{"id": "x", "image_path": "x.png"}]})
    )
    with pytest.raises(ValidationError, match="label_path"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(
        json.dumps({"train": [{"id": "x", "image_path": "x.png", "label_path": "gone.png"}]})
    )
    with pytest.raises(IngestionError, match="gone.png"):
        load_dataset(tmp_path)


def test_empty_partition_warns(tmp_path: Path) -> None:
    split = DatasetSplit(train=[_pair("t0", 0)])
    write_dataset(split, tmp_path)
    with pytest.warns(UserWarning, match="empty test"):
        load_dataset(tmp_path)
