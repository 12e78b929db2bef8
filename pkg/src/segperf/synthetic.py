"""A synthetic world with known ground truth for checking the whole pipeline.

The world is a population of smooth images with ellipse-like foreground
masks. Checkpoints of a "model under test" are emulated by degrading the hidden
ground truth by a level in [0, 1]; the reference segmenter is emulated by a
plugin whose output quality is a known function of its support quality (the
coupling): affine in dice, or exponential in hd95.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import numpy.typing as npt
from scipy.ndimage import (
    binary_dilation,
    binary_erosion,
    distance_transform_edt,
    gaussian_filter,
    shift,
)

from segperf.dataset import BinaryMask, DatasetSplit, Image, LabeledPair
from segperf.errors import HarnessError, ValidationError
from segperf.metrics import dice, hd95
from segperf.seeding import derive_seed, rng_for
from segperf.segmenters import CheckpointRef, CheckpointSeries, SupportSet, masks_digest
from segperf.types import REFERENCE_SHAPE, CouplingLink, SupportQuality

logger = logging.getLogger(__name__)

BoolArray = npt.NDArray[np.bool_]

# Train, validation, test and extra-test proportions of a small chest X-ray set.
DEFAULT_SPLIT_PROPORTIONS = (137, 35, 49, 25)


# ---------------------------------------------------------------------------
# Degradation operators
# ---------------------------------------------------------------------------


class DegradationOp(Protocol):
    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray: ...


def _edt_inside(bits: BoolArray) -> npt.NDArray[np.float64]:
    # pad with background so the canvas edge counts as background
    padded = np.pad(bits, 1, constant_values=False)
    return np.asarray(distance_transform_edt(padded))[1:-1, 1:-1]


@dataclass(frozen=True)
class Erode:
    """Remove foreground within ``level * steps`` pixels of the background.

    The cut is dithered by the noise field, so a ring of pixels at one distance
    disappears gradually as the level rises.
    """

    steps: float

    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray:
        radius = level * self.steps
        if radius <= 0 or not bits.any():
            return bits
        return bits & (_edt_inside(bits) - noise > radius)


@dataclass(frozen=True)
class Dilate:
    """Add background within ``level * steps`` pixels of the foreground."""

    steps: float

    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray:
        radius = level * self.steps
        if radius <= 0 or not bits.any():
            return bits
        return bits | (np.asarray(distance_transform_edt(~bits)) <= radius)


@dataclass(frozen=True)
class Translate:
    """Sub-pixel shift by ``level * (dx, dy)``: bilinear resampling, then each
    pixel is kept with probability equal to its resampled coverage."""

    dx: float
    dy: float

    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray:
        offset = (level * self.dy, level * self.dx)
        if offset == (0.0, 0.0):
            return bits
        moved = shift(bits.astype(np.float64), offset, order=1, mode="constant", cval=0.0)
        return np.asarray(moved > noise)


@dataclass(frozen=True)
class BoundaryNoise:
    """Flip pixels on the one-pixel inner and outer boundary with probability
    ``level * p``."""

    p: float

    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray:
        if level * self.p <= 0 or not bits.any():
            return bits
        structure = np.ones((3, 3), dtype=bool)
        inner = bits & ~binary_erosion(bits, structure, border_value=0)
        outer = binary_dilation(bits, structure) & ~bits
        flip = (inner | outer) & (noise < level * self.p)
        return bits ^ flip


@dataclass(frozen=True)
class Dropout:
    """Drop foreground pixels with probability ``level * p``."""

    p: float

    def apply(self, bits: BoolArray, level: float, noise: npt.NDArray[np.float64]) -> BoolArray:
        if level * self.p <= 0:
            return bits
        return bits & ~(noise < level * self.p)


# Erosion, boundary noise and translation give a strictly falling quality curve;
# dropout alone can plateau and is left out.
DEFAULT_OPERATORS: tuple[DegradationOp, ...] = (
    Erode(16.0),
    BoundaryNoise(0.5),
    Translate(4.0, 3.0),
)


@dataclass(frozen=True)
class DegradationSpec:
    level: float
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.level <= 1.0:
            raise ValidationError(f"Degradation level must be in [0, 1], got {self.level}")


def degrade(mask: BinaryMask, spec: DegradationSpec) -> BinaryMask:
    """Corrupt ``mask`` by the operators of ``spec`` scaled to its level.

    Each operator draws one uniform noise field from ``spec.seed`` whatever the
    level, so corruption is nested across levels for a fixed seed.
    """
    if spec.level == 0.0:
        return mask
    rng = np.random.default_rng(spec.seed)
    bits = np.array(mask.bits)
    for op in spec.operators:
        noise = rng.random(bits.shape)
        bits = op.apply(bits, spec.level, noise)
    return BinaryMask(bits)


# ---------------------------------------------------------------------------
# Shape generator and world
# ---------------------------------------------------------------------------


def _blob(
    rng: np.random.Generator, shape: tuple[int, int], axis_range: tuple[float, float]
) -> BoolArray:
    h, w = shape
    a, b = rng.uniform(*axis_range, size=2)
    reach = max(a, b) * 1.2 + 1
    cy = rng.uniform(reach, max(reach, h - reach))
    cx = rng.uniform(reach, max(reach, w - reach))
    theta = rng.uniform(0, math.pi)
    wobble = rng.uniform(0.0, 0.15)
    lobes = int(rng.integers(2, 6))
    phase = rng.uniform(0, 2 * math.pi)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    y, x = yy + 0.5 - cy, xx + 0.5 - cx
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    radius = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    angle = np.arctan2(v / b, u / a)
    return np.asarray(radius <= 1.0 + wobble * np.sin(lobes * angle + phase))


def _intensity_field(rng: np.random.Generator, bits: BoolArray) -> npt.NDArray[np.float64]:
    background = gaussian_filter(rng.normal(size=bits.shape), sigma=8.0)
    background /= max(1e-12, float(np.abs(background).max()))
    contrast = rng.uniform(0.4, 0.8)
    field_ = (
        0.2 * background
        + contrast * gaussian_filter(bits.astype(np.float64), sigma=1.5)
        + 0.03 * rng.normal(size=bits.shape)
    )
    lo, hi = float(field_.min()), float(field_.max())
    scaled = (field_ - lo) / (hi - lo)
    # quantize so the image survives an 8-bit PNG round trip unchanged
    return np.round(scaled * 255.0) / 255.0


def generate_shapes(
    n: int,
    canvas: tuple[int, int] = REFERENCE_SHAPE,
    seed: int = 0,
    *,
    fg_fraction: tuple[float, float] = (0.01, 0.15),
    min_foreground: int = 20,
) -> list[LabeledPair]:
    """``n`` image/mask pairs with blob-shaped foreground, deterministic per seed."""
    if n < 1:
        raise ValidationError(f"Need at least one shape, got {n}")
    side = min(canvas)
    axis_range = (0.06 * side, 0.2 * side)
    total = canvas[0] * canvas[1]
    pairs: list[LabeledPair] = []
    for i in range(n):
        rng = rng_for(seed, "shape", i)
        for _ in range(1000):
            bits = _blob(rng, canvas, axis_range)
            count = int(bits.sum())
            if count >= min_foreground and fg_fraction[0] <= count / total <= fg_fraction[1]:
                break
        else:
            raise HarnessError(
                f"Could not draw a shape within {fg_fraction} of a {canvas} canvas"
            )
        pairs.append(
            LabeledPair(
                id=f"shape{i:04d}",
                image=Image(_intensity_field(rng, bits)),
                label=BinaryMask(bits),
            )
        )
    return pairs


def image_seed(seed: int, image: Image) -> int:
    """Seed for degrading the ground truth of ``image``; shared by every consumer
    so checkpoints, curves and the reference plugin corrupt an image identically."""
    return derive_seed(seed, "degrade", image.content_key())


@dataclass
class SyntheticWorld:
    """Generated pairs indexed by image content, so any component holding only
    an image can recover its hidden ground truth."""

    pairs: list[LabeledPair]
    seed: int = 0
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS
    _truth: dict[str, BinaryMask] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        for pair in self.pairs:
            key = pair.image.content_key()
            if key in self._truth:
                raise HarnessError(f"Two generated images share content ({pair.id})")
            self._truth[key] = pair.require_label()

    @classmethod
    def generate(
        cls,
        n: int,
        canvas: tuple[int, int] = REFERENCE_SHAPE,
        seed: int = 0,
        operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS,
    ) -> "SyntheticWorld":
        return cls(generate_shapes(n, canvas, seed), seed, operators)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.pairs[0].image.shape

    def ground_truth(self, image: Image) -> BinaryMask:
        try:
            return self._truth[image.content_key()]
        except KeyError:
            raise HarnessError("Image is not part of the synthetic world") from None

    def degrade_truth(self, image: Image, level: float) -> BinaryMask:
        spec = DegradationSpec(level, self.operators, image_seed(self.seed, image))
        return degrade(self.ground_truth(image), spec)

    def split(
        self, proportions: Sequence[int] = DEFAULT_SPLIT_PROPORTIONS
    ) -> DatasetSplit:
        """Partition the pairs in order by ``proportions`` (train, val, test, extra)."""
        n = len(self.pairs)
        if n < 4:
            raise ValidationError(f"Need at least 4 pairs to split, got {n}")
        total = sum(proportions)
        sizes = [max(1, round(n * p / total)) for p in proportions[1:]]
        train = n - sum(sizes)
        if train < 1:
            raise ValidationError(f"Too few pairs ({n}) for proportions {proportions}")
        bounds = np.cumsum([0, train, *sizes])
        parts = [self.pairs[bounds[i] : bounds[i + 1]] for i in range(4)]
        return DatasetSplit(*parts)


# ---------------------------------------------------------------------------
# Quality curve
# ---------------------------------------------------------------------------


def population_quality(
    level: float,
    curve_pairs: Sequence[LabeledPair],
    seed: int,
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS,
) -> float:
    """Mean dice of degraded ground truth against ground truth over a population."""
    values = []
    for pair in curve_pairs:
        gt = pair.require_label()
        spec = DegradationSpec(level, operators, image_seed(seed, pair.image))
        values.append(dice(degrade(gt, spec), gt).value)
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class QualityCurve:
    """Mean dice as a function of degradation level, sampled on a grid."""

    levels: tuple[float, ...]
    mean_dice: tuple[float, ...]
    monotone: bool
    tolerance: float
    seed: int
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS

    def quality_at(self, level: float) -> float:
        return float(np.interp(level, self.levels, self.mean_dice))

    def invert(self, quality: float) -> float:
        """Level whose interpolated mean dice equals ``quality`` (clipped to the curve)."""
        dice_desc = np.minimum.accumulate(np.asarray(self.mean_dice))
        if quality >= dice_desc[0]:
            return self.levels[0]
        if quality <= dice_desc[-1]:
            return self.levels[-1]
        return float(np.interp(quality, dice_desc[::-1], np.asarray(self.levels)[::-1]))


def build_quality_curve(
    levels: Sequence[float],
    curve_pairs: Sequence[LabeledPair],
    seed: int,
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS,
    *,
    monotone_slack: float = 0.01,
    n_validation: int = 9,
) -> QualityCurve:
    """Sample the mean-dice curve and measure how well it inverts.

    The reported tolerance is the largest gap between a target quality and the
    population quality actually reached at the inverted level, over targets
    spread across the curve's range.
    """
    grid = sorted(float(x) for x in levels)
    if len(grid) < 5:
        raise ValidationError(f"Need at least 5 grid levels, got {len(grid)}")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValidationError("Grid levels must lie in [0, 1]")
    if not curve_pairs:
        raise ValidationError("Need pairs to build a quality curve")

    qualities = [population_quality(lv, curve_pairs, seed, operators) for lv in grid]
    rises = [b - a for a, b in zip(qualities, qualities[1:])]
    if max(rises) > monotone_slack:
        raise HarnessError(
            f"Quality curve rises by {max(rises):.4f} between grid levels; "
            "degradation operators are misconfigured"
        )
    curve = QualityCurve(
        levels=tuple(grid),
        mean_dice=tuple(qualities),
        monotone=max(rises) <= 0.0,
        tolerance=0.0,
        seed=seed,
        operators=operators,
    )
    targets = np.linspace(min(qualities), max(qualities), n_validation + 2)[1:-1]
    errors = [
        abs(t - population_quality(curve.invert(t), curve_pairs, seed, operators))
        for t in targets
    ]
    tolerance = max(errors, default=0.0)
    logger.info(
        "quality curve spans [%.3f, %.3f], inversion tolerance %.4f",
        min(qualities),
        max(qualities),
        tolerance,
    )
    return QualityCurve(curve.levels, curve.mean_dice, curve.monotone, tolerance, seed, operators)


# ---------------------------------------------------------------------------
# Synthetic checkpoints and reference segmenter
# ---------------------------------------------------------------------------


class SyntheticCheckpointAdapter:
    """Model-under-test adapter whose checkpoint locator is a degradation level."""

    def __init__(self, world: SyntheticWorld) -> None:
        self.world = world

    def predict(self, ckpt: CheckpointRef, images: Sequence[Image]) -> list[BinaryMask]:
        try:
            level = float(ckpt.locator)
        except ValueError:
            raise ValidationError(
                f"Synthetic locator must be a level, got {ckpt.locator!r}"
            ) from None
        return [self.world.degrade_truth(img, level) for img in images]


def synthetic_checkpoint(epoch: int, level: float, model_id: str = "synthetic") -> CheckpointRef:
    return CheckpointRef(
        model_id=model_id, epoch=epoch, locator=f"{level:.6f}", adapter="synthetic"
    )


def synthetic_series(
    n_levels: int,
    curve_pairs: Sequence[LabeledPair],
    *,
    seed: int = 0,
    curve: Optional[QualityCurve] = None,
    quality_range: tuple[float, float] = (0.35, 0.95),
    epoch_interval: int = 5,
    model_id: str = "synthetic",
) -> CheckpointSeries:
    """Checkpoints whose quality rises evenly over ``quality_range``, one every
    ``epoch_interval`` epochs, as a training run saving weights periodically would."""
    if n_levels < 2:
        raise ValidationError(f"A synthetic series needs at least 2 levels, got {n_levels}")
    if curve is None:
        curve = build_quality_curve(np.linspace(0.0, 1.0, 41), curve_pairs, seed)
    targets = np.linspace(quality_range[0], quality_range[1], n_levels)
    return CheckpointSeries.of(
        synthetic_checkpoint(epoch_interval * (i + 1), curve.invert(float(q)), model_id)
        for i, q in enumerate(targets)
    )


# Pairs used to tabulate the hd95 curve of the log link.
DISTANCE_CURVE_PAIRS = 40


@dataclass(frozen=True)
class CouplingSpec:
    """How the reference plugin's output quality follows its support quality.

    ``linear``: output dice = clip(a * support dice + b + Normal(0, sigma)).

    ``log``: output hd95 = hmax ** (h / hmax) * exp(Normal(0, sigma)) for a
    support hd95 ``h``, where ``hmax`` is the largest hd95 on the distance curve.
    Support hd95 is then ``(hmax / log(hmax)) * log(output)``; ``a`` and ``b``
    are not used.

    With ``support="population"`` the support quality is the population quality
    at the level of the checkpoint that labeled the support set, so it does not
    depend on which pairs were drawn.
    """

    a: float = 1.0
    b: float = 0.0
    sigma: float = 0.0
    link: CouplingLink = "linear"
    support: SupportQuality = "sample"

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValidationError(f"Coupling sigma must be >= 0, got {self.sigma}")
        if self.link not in ("linear", "log"):
            raise ValidationError(f"Unknown coupling link {self.link!r} (valid: linear, log)")
        if self.support not in ("sample", "population"):
            raise ValidationError(
                f"Unknown support quality {self.support!r} (valid: sample, population)"
            )


def population_distance(
    level: float,
    curve_pairs: Sequence[LabeledPair],
    seed: int,
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS,
) -> Optional[float]:
    """Mean hd95 of degraded ground truth over the pairs where it is defined."""
    values = []
    for pair in curve_pairs:
        gt = pair.require_label()
        spec = DegradationSpec(level, operators, image_seed(seed, pair.image))
        value = hd95(degrade(gt, spec), gt)
        if value.defined:
            values.append(value.value)
    return math.fsum(values) / len(values) if values else None


@dataclass(frozen=True)
class DistanceCurve:
    """Mean hd95 as a function of degradation level, sampled on a grid."""

    levels: tuple[float, ...]
    mean_hd95: tuple[float, ...]

    @property
    def max_value(self) -> float:
        return max(self.mean_hd95)

    def value_at(self, level: float) -> float:
        return float(np.interp(level, self.levels, self.mean_hd95))

    def invert(self, distance: float) -> float:
        """Level whose interpolated mean hd95 equals ``distance`` (clipped to the curve)."""
        rising = np.maximum.accumulate(np.asarray(self.mean_hd95))
        if distance <= rising[0]:
            return self.levels[0]
        if distance >= rising[-1]:
            return self.levels[-1]
        # first crossing, so plateaus resolve to their lowest level
        return float(np.interp(distance, *_strictly_rising(rising, self.levels)))


def _strictly_rising(
    values: npt.NDArray[np.float64], levels: Sequence[float]
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    keep = np.concatenate(([True], np.diff(values) > 0))
    return values[keep], np.asarray(levels, dtype=np.float64)[keep]


def build_distance_curve(
    levels: Sequence[float],
    curve_pairs: Sequence[LabeledPair],
    seed: int,
    operators: tuple[DegradationOp, ...] = DEFAULT_OPERATORS,
) -> DistanceCurve:
    """Tabulate mean hd95 per level. Levels where every degraded mask vanished keep
    the previous level's value."""
    if not curve_pairs:
        raise ValidationError("Need pairs to build a distance curve")
    grid = sorted(float(x) for x in levels)
    values: list[float] = []
    for level in grid:
        value = population_distance(level, curve_pairs, seed, operators)
        values.append(value if value is not None else (values[-1] if values else 0.0))
    curve = DistanceCurve(tuple(grid), tuple(values))
    if curve.max_value <= 1.0:
        raise HarnessError(
            f"Distance curve peaks at hd95 {curve.max_value:.3f}; the log link needs more than 1"
        )
    return curve


class SyntheticReferencePlugin:
    """Builtin reference segmenter with a known support-to-output coupling.

    Output for a call is a pure function of the support set and queries: the
    coupling noise is seeded by their content.
    """

    kind = "builtin_synthetic"

    def __init__(
        self,
        coupling: CouplingSpec,
        curve: QualityCurve,
        world: SyntheticWorld,
        distance_curve: Optional[DistanceCurve] = None,
    ) -> None:
        self.coupling = coupling
        self.curve = curve
        self.world = world
        self.input_shape = world.canvas
        if coupling.link == "log" and distance_curve is None:
            distance_curve = build_distance_curve(
                curve.levels, world.pairs[:DISTANCE_CURVE_PAIRS], curve.seed, curve.operators
            )
        self.distance_curve = distance_curve

    @property
    def distances(self) -> DistanceCurve:
        if self.distance_curve is None:
            raise HarnessError("This reference plugin has no distance curve (linear link)")
        return self.distance_curve

    def _source_level(self, support: SupportSet) -> Optional[float]:
        source = support.source
        if self.coupling.support != "population" or source is None:
            return None
        if source.adapter != "synthetic":
            logger.debug("support source %s is not synthetic; using drawn labels", source)
            return None
        return float(source.locator)

    def support_quality(self, support: SupportSet) -> float:
        level = self._source_level(support)
        if level is not None:
            return self.curve.quality_at(level)
        scores = [
            dice(label, self.world.ground_truth(img)).value
            for img, label in zip(support.images(), support.labels())
        ]
        return math.fsum(scores) / len(scores)

    def support_distance(self, support: SupportSet) -> float:
        level = self._source_level(support)
        if level is not None:
            return self.distances.value_at(level)
        scores = [
            v.value
            for v in (
                hd95(label, self.world.ground_truth(img))
                for img, label in zip(support.images(), support.labels())
            )
            if v.defined
        ]
        if not scores:
            return self.distances.max_value
        return math.fsum(scores) / len(scores)

    def _noise(self, support: SupportSet, queries: Sequence[Image]) -> float:
        if self.coupling.sigma == 0:
            return 0.0
        rng = rng_for(
            self.curve.seed,
            "coupling",
            masks_digest(support.labels()),
            *(img.content_key() for img in support.images()),
            *(img.content_key() for img in queries),
        )
        return float(rng.normal(0.0, self.coupling.sigma))

    def target_quality(self, support: SupportSet, queries: Sequence[Image]) -> float:
        c = self.coupling
        noise = self._noise(support, queries)
        return min(1.0, max(0.0, c.a * self.support_quality(support) + c.b + noise))

    def target_distance(self, support: SupportSet, queries: Sequence[Image]) -> float:
        hmax = self.distances.max_value
        h = self.support_distance(support)
        return float(hmax ** (h / hmax) * math.exp(self._noise(support, queries)))

    def target_level(self, support: SupportSet, queries: Sequence[Image]) -> float:
        if self.coupling.link == "log":
            return self.distances.invert(self.target_distance(support, queries))
        return self.curve.invert(self.target_quality(support, queries))

    def infer(self, support: SupportSet, queries: Sequence[Image]) -> list[BinaryMask]:
        level = self.target_level(support, queries)
        return [
            degrade(
                self.world.ground_truth(img),
                DegradationSpec(level, self.curve.operators, image_seed(self.curve.seed, img)),
            )
            for img in queries
        ]


def synthetic_reference(
    coupling: CouplingSpec,
    curve: QualityCurve,
    world: SyntheticWorld,
    distance_curve: Optional[DistanceCurve] = None,
) -> SyntheticReferencePlugin:
    return SyntheticReferencePlugin(coupling, curve, world, distance_curve)
