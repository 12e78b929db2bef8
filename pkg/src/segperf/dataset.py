"""Images, masks, dataset splits and the preprocessing applied before evaluation."""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import numpy.typing as npt
from PIL import Image as PILImage

from segperf.errors import ValidationError
from segperf.types import REFERENCE_SHAPE

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]


def _frozen(arr: npt.NDArray[np.generic]) -> npt.NDArray[np.generic]:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def normalize_intensity(pixels: npt.ArrayLike) -> FloatArray:
    """Per-image min-max scaling to [0, 1]; constant images map to all zeros."""
    arr = np.asarray(pixels, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel image with intensities in [0, 1]."""

    pixels: FloatArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"Image must be a non-empty 2D grid, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("Image intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(arr))

    @classmethod
    def normalized(cls, raw: npt.ArrayLike) -> "Image":
        return cls(normalize_intensity(raw))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_uint8(self) -> npt.NDArray[np.uint8]:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def content_key(self) -> str:
        """Identity of the image as it survives an 8-bit round trip."""
        h = hashlib.sha1(repr(self.shape).encode())
        h.update(self.to_uint8().tobytes())
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean foreground grid."""

    bits: BoolArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"Mask must be a non-empty 2D grid, got {arr.shape}")
        object.__setattr__(self, "bits", _frozen(arr != 0))

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(np.zeros(shape, dtype=bool))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def to_uint8(self) -> npt.NDArray[np.uint8]:
        return np.where(self.bits, 255, 0).astype(np.uint8)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class LabeledPair:
    """An image with its foreground label. ``label`` is None for unlabeled cohorts."""

    id: str
    image: Image
    label: Optional[BinaryMask]

    def __post_init__(self) -> None:
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValidationError(
                f"Pair {self.id}: label shape {self.label.shape} "
                f"does not match image shape {self.image.shape}"
            )

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    def require_label(self) -> BinaryMask:
        if self.label is None:
            raise ValidationError(f"Pair {self.id} has no label")
        return self.label


SPLIT_NAMES = ("train", "validation", "test", "extra_test")


@dataclass(frozen=True)
class DatasetSplit:
    train: list[LabeledPair] = field(default_factory=list)
    validation: list[LabeledPair] = field(default_factory=list)
    test: list[LabeledPair] = field(default_factory=list)
    extra_test: list[LabeledPair] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: dict[str, str] = {}
        for name, pairs in self.partitions():
            for pair in pairs:
                if pair.id in seen:
                    raise ValidationError(
                        f"Duplicate pair id {pair.id!r} in {seen[pair.id]} and {name}"
                    )
                seen[pair.id] = name

    def partitions(self) -> Iterator[tuple[str, list[LabeledPair]]]:
        for name in SPLIT_NAMES:
            yield name, getattr(self, name)

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return (
            len(self.train),
            len(self.validation),
            len(self.test),
            len(self.extra_test),
        )


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D grid sliced along ``axis`` into 2D images."""

    voxels: npt.NDArray[np.generic]
    axis: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"Volume must be a non-empty 3D grid, got {arr.shape}")
        if self.axis not in (0, 1, 2):
            raise ValidationError(f"Slicing axis must be 0, 1 or 2, got {self.axis}")
        object.__setattr__(self, "voxels", _frozen(arr))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.voxels.shape)

    def slices(self) -> Iterator[npt.NDArray[np.generic]]:
        yield from np.moveaxis(self.voxels, self.axis, 0)


def slice_volume(
    vol: Volume,
    labels: Volume,
    min_foreground: int = 20,
    id_prefix: str = "slice",
) -> list[LabeledPair]:
    """Cut a labeled volume into 2D pairs, keeping slices with at least
    ``min_foreground`` foreground pixels. Slice order is preserved."""
    if vol.shape != labels.shape:
        raise ValidationError(
            f"Volume shape {vol.shape} does not match label shape {labels.shape}"
        )
    if vol.axis != labels.axis:
        raise ValidationError("Volume and labels must be sliced along the same axis")

    pairs: list[LabeledPair] = []
    for index, (image_slice, label_slice) in enumerate(
        zip(vol.slices(), labels.slices())
    ):
        mask = BinaryMask(label_slice)
        if mask.count < min_foreground:
            continue
        pairs.append(
            LabeledPair(
                id=f"{id_prefix}{index:04d}",
                image=Image.normalized(image_slice),
                label=mask,
            )
        )
    logger.debug("kept %d of %d slices", len(pairs), vol.shape[vol.axis])
    return pairs


def _nearest_indices(source: int, target: int) -> npt.NDArray[np.intp]:
    # pixel-center mapping: target pixel i samples source floor((i + 0.5) * s / t)
    idx = np.floor((np.arange(target) + 0.5) * source / target).astype(np.intp)
    return np.clip(idx, 0, source - 1)


def resize_mask(mask: BinaryMask, target: tuple[int, int]) -> BinaryMask:
    rows = _nearest_indices(mask.height, target[0])
    cols = _nearest_indices(mask.width, target[1])
    return BinaryMask(mask.bits[np.ix_(rows, cols)])


def resize_image(image: Image, target: tuple[int, int]) -> Image:
    if image.shape == target:
        return image
    pil = PILImage.fromarray(image.pixels.astype(np.float32))
    resized = pil.resize((target[1], target[0]), resample=PILImage.Resampling.BILINEAR)
    return Image(np.clip(np.asarray(resized, dtype=np.float64), 0.0, 1.0))


def resize_pair(
    pair: LabeledPair, target: tuple[int, int] = REFERENCE_SHAPE
) -> LabeledPair:
    """Bilinear for the image, nearest-neighbor for the label."""
    if len(target) != 2 or min(target) < 1:
        raise ValidationError(f"Invalid resize target {target}")
    target = (int(target[0]), int(target[1]))
    label = None if pair.label is None else resize_mask(pair.label, target)
    return LabeledPair(id=pair.id, image=resize_image(pair.image, target), label=label)


def resize_all(
    pairs: Sequence[LabeledPair], target: tuple[int, int] = REFERENCE_SHAPE
) -> list[LabeledPair]:
    return [resize_pair(p, target) for p in pairs]
