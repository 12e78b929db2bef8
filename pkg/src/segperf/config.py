"""Run configuration: one YAML (or JSON) file, with command-line overrides on top."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import yaml

from segperf.errors import IngestionError, ValidationError
from segperf.types import (
    MAX_SUPPORT_SIZE,
    CouplingLink,
    FitFamily,
    MetricId,
    RgbConversion,
    SupportQuality,
)

WORKERS_ENV = "SPE_WORKERS"


@dataclass(frozen=True)
class CheckpointConfig:
    epoch: int
    locator: str
    adapter: str = "threshold"
    model_id: str = "model"


@dataclass(frozen=True)
class SyntheticConfig:
    n_shapes: int = 200
    canvas: int = 128
    n_levels: int = 20
    n_holdout: int = 5
    quality_range: tuple[float, float] = (0.35, 0.95)
    holdout_range: tuple[float, float] = (0.4, 0.9)
    coupling_a: float = 0.9
    coupling_b: float = 0.05
    coupling_sigma: float = 0.01
    coupling_link: CouplingLink = "linear"
    support_quality: SupportQuality = "sample"
    curve_levels: int = 41
    deployed_quality: float = 0.7

    def __post_init__(self) -> None:
        if self.coupling_link not in ("linear", "log"):
            raise ValidationError(
                f"coupling_link must be linear or log, got {self.coupling_link!r}"
            )
        if self.support_quality not in ("sample", "population"):
            raise ValidationError(
                f"support_quality must be sample or population, got {self.support_quality!r}"
            )


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. Every field except the worker count is echoed
    into the artifacts and reports it produces."""

    manifest: Optional[Path] = None
    metrics: tuple[MetricId, ...] = (MetricId.DICE,)
    plugin_cmd: Optional[str] = None
    plugin_timeout: float = 600.0
    support_size: int = MAX_SUPPORT_SIZE
    n_repeats: int = 6
    seed: int = 0
    checkpoints: tuple[CheckpointConfig, ...] = ()
    deployed: Optional[CheckpointConfig] = None
    model_cmd: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None
    out: Path = Path("segperf-out")
    family: Optional[FitFamily] = None
    log_linear_metrics: tuple[MetricId, ...] = (MetricId.HD95,)
    train_cap: Optional[int] = None
    rgb: RgbConversion = "luma"
    override_protocol: bool = False
    workers: int = field(default=1, compare=False)

    def __post_init__(self) -> None:
        if not 1 <= self.support_size <= MAX_SUPPORT_SIZE:
            raise ValidationError(
                f"support_size must be in [1, {MAX_SUPPORT_SIZE}], got {self.support_size}"
            )
        if self.n_repeats < 1:
            raise ValidationError(f"n_repeats must be >= 1, got {self.n_repeats}")
        if not self.metrics:
            raise ValidationError("At least one metric is required")
        if self.train_cap is not None and self.train_cap < 1:
            raise ValidationError(f"train_cap must be >= 1, got {self.train_cap}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")

    def as_dict(self) -> dict[str, Any]:
        """JSON-native echo of the configuration, without the worker count."""
        return _jsonable(
            {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "workers"}
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (MetricId, FitFamily)):
        return value.value
    if isinstance(value, Path):
        return str(value)
    return value


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        workers = int(raw)
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ValidationError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers


def run_timestamp() -> str:
    """UTC timestamp for outputs; honours SOURCE_DATE_EPOCH for reproducible runs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch
        else datetime.now(tz=timezone.utc)
    )
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def _checkpoint(raw: Any, where: str) -> CheckpointConfig:
    if not isinstance(raw, dict):
        raise ValidationError(f"{where} must be a mapping")
    return _build(CheckpointConfig, raw, where)


def _build(cls: Any, raw: dict[str, Any], where: str) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"Unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ValidationError(f"Invalid {where}: {e}") from e


def run_config_from_dict(raw: dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    raw = dict(raw)
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ValidationError(f"Unknown configuration keys: {sorted(unknown)}")

    def _path(value: Any) -> Path:
        p = Path(str(value))
        return p if p.is_absolute() or base_dir is None else base_dir / p

    if raw.get("manifest") is not None:
        raw["manifest"] = _path(raw["manifest"])
    if "out" in raw:
        raw["out"] = _path(raw["out"])
    if "metrics" in raw:
        metrics = raw["metrics"]
        if isinstance(metrics, str):
            metrics = [metrics]
        raw["metrics"] = tuple(MetricId.parse(m) for m in metrics)
    if "log_linear_metrics" in raw:
        raw["log_linear_metrics"] = tuple(MetricId.parse(m) for m in raw["log_linear_metrics"])
    if raw.get("family") is not None:
        raw["family"] = FitFamily.parse(raw["family"])
    if "checkpoints" in raw:
        raw["checkpoints"] = tuple(
            _checkpoint(c, f"checkpoints[{i}]") for i, c in enumerate(raw["checkpoints"])
        )
    if raw.get("deployed") is not None:
        raw["deployed"] = _checkpoint(raw["deployed"], "deployed")
    if raw.get("synthetic") is not None:
        synthetic = dict(raw["synthetic"])
        for key in ("quality_range", "holdout_range"):
            if key in synthetic:
                synthetic[key] = tuple(float(v) for v in synthetic[key])
        raw["synthetic"] = _build(SyntheticConfig, synthetic, "synthetic")
    try:
        return RunConfig(**raw)
    except TypeError as e:
        raise ValidationError(f"Invalid configuration: {e}") from e


def load_run_config(path: Path) -> RunConfig:
    """Read a run configuration; relative paths resolve against the file's directory."""
    if not path.is_file():
        raise IngestionError(path, "missing configuration file")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ValidationError(f"Invalid configuration {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"Configuration {path} must be a mapping")
    return run_config_from_dict(raw, base_dir=path.parent)
