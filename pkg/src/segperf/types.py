import math
from enum import Enum
from typing import Literal

from segperf.errors import ValidationError


class MetricId(Enum):
    """The six metrics that can be estimated."""

    DICE = "dice"
    HD95 = "hd95"
    JACCARD = "jaccard"
    PEARSON = "pearson"
    RECALL = "recall"
    PRECISION = "precision"

    @property
    def higher_is_better(self) -> bool:
        return self is not MetricId.HD95

    @property
    def value_range(self) -> tuple[float, float]:
        match self:
            case MetricId.HD95:
                return (0.0, math.inf)
            case MetricId.PEARSON:
                return (-1.0, 1.0)
            case _:
                return (0.0, 1.0)

    def clamp(self, value: float) -> float:
        lo, hi = self.value_range
        return min(hi, max(lo, value))

    @classmethod
    def parse(cls, name: str) -> "MetricId":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValidationError(f"Unknown metric {name!r} (valid: {valid})") from None


class FitFamily(Enum):
    LINEAR = "linear"
    LOG_LINEAR = "log_linear"

    @classmethod
    def parse(cls, name: str) -> "FitFamily":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ValidationError(f"Unknown fit family {name!r} (valid: {valid})") from None


# How RGB rasters are reduced to one channel on ingestion.
RgbConversion = Literal["luma", "mean", "green"]

# Canvas the reference segmenter expects; preprocessing resizes to it.
REFERENCE_SHAPE: tuple[int, int] = (128, 128)

# Largest support set the reference segmenter accepts.
MAX_SUPPORT_SIZE = 64

# Where the synthetic reference plugin takes its support quality from: the drawn
# labels, or the population quality of the checkpoint that produced them.
SupportQuality = Literal["sample", "population"]

# Shape of the synthetic coupling: affine in dice, or exponential in hd95.
CouplingLink = Literal["linear", "log"]
