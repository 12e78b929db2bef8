"""Segmenter contracts: the model under test and the support-set-conditioned
reference segmenter, plus the work-directory wire protocol shared by external
processes.

Wire protocol (one invocation)::

    <workdir>/support/images/NNNN.png   8-bit grayscale
    <workdir>/support/labels/NNNN.png   0/255
    <workdir>/query/images/NNNN.png     8-bit grayscale
    <workdir>/out/predictions/NNNN.png  written by the plugin, 0/255, one per query

Indices are zero-padded to four digits and follow list order.
"""

from __future__ import annotations

import hashlib
import logging
import shlex
import subprocess
import tempfile
import threading
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from segperf.dataset import BinaryMask, Image, LabeledPair
from segperf.errors import (
    PluginError,
    ProtocolError,
    ReferenceSegmenterError,
    ValidationError,
)
from segperf.fs import read_mask, write_image, write_mask
from segperf.types import MAX_SUPPORT_SIZE, REFERENCE_SHAPE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckpointRef:
    """One saved model. ``adapter`` names the registered adapter that runs it;
    ``locator`` is opaque to everything but that adapter."""

    model_id: str
    epoch: int
    locator: str
    adapter: str = "threshold"

    def __post_init__(self) -> None:
        if self.epoch < 1:
            raise ValidationError(f"Checkpoint epoch must be positive, got {self.epoch}")


@dataclass(frozen=True)
class CheckpointSeries:
    checkpoints: tuple[CheckpointRef, ...]

    def __post_init__(self) -> None:
        if len(self.checkpoints) < 2:
            raise ValidationError(
                f"A checkpoint series needs at least 2 checkpoints, got {self.K}"
            )
        epochs = [c.epoch for c in self.checkpoints]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValidationError(f"Epochs must be strictly increasing: {epochs}")

    @classmethod
    def of(cls, checkpoints: Iterable[CheckpointRef]) -> "CheckpointSeries":
        return cls(tuple(checkpoints))

    @property
    def K(self) -> int:
        return len(self.checkpoints)

    def __iter__(self) -> Iterator[CheckpointRef]:
        return iter(self.checkpoints)


@dataclass(frozen=True)
class SupportSet:
    """Labeled examples for the reference segmenter. ``source`` is the checkpoint
    whose predictions supplied the labels, when there is one."""

    pairs: tuple[LabeledPair, ...]
    max_size: int = MAX_SUPPORT_SIZE
    source: Optional[CheckpointRef] = None

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValidationError("Support set must not be empty")
        if len(self.pairs) > self.max_size:
            raise ValidationError(
                f"Support set has {len(self.pairs)} pairs, maximum is {self.max_size}"
            )
        shapes = {p.image.shape for p in self.pairs}
        if len(shapes) != 1:
            raise ValidationError(f"Support images must share one shape, got {shapes}")
        for p in self.pairs:
            p.require_label()

    @classmethod
    def of(
        cls, pairs: Iterable[LabeledPair], source: Optional[CheckpointRef] = None
    ) -> "SupportSet":
        return cls(tuple(pairs), source=source)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pairs[0].image.shape

    def labels(self) -> list[BinaryMask]:
        return [p.require_label() for p in self.pairs]

    def images(self) -> list[Image]:
        return [p.image for p in self.pairs]


def masks_digest(masks: Iterable[BinaryMask]) -> str:
    """Content hash of a mask sequence (shape and packed bits, in order)."""
    h = hashlib.sha256()
    for m in masks:
        h.update(repr(m.shape).encode())
        h.update(np.packbits(m.bits).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Work directory protocol
# ---------------------------------------------------------------------------


def _index_name(i: int) -> str:
    return f"{i:04d}.png"


def write_work_dir(
    workdir: Path,
    queries: Sequence[Image],
    support: Optional[SupportSet] = None,
) -> None:
    for i, image in enumerate(queries):
        write_image(image, workdir / "query" / "images" / _index_name(i))
    if support is not None:
        for i, pair in enumerate(support.pairs):
            write_image(pair.image, workdir / "support" / "images" / _index_name(i))
            write_mask(pair.require_label(), workdir / "support" / "labels" / _index_name(i))
    (workdir / "out" / "predictions").mkdir(parents=True, exist_ok=True)


def read_predictions(workdir: Path, n: int) -> list[BinaryMask]:
    out = workdir / "out" / "predictions"
    missing = [_index_name(i) for i in range(n) if not (out / _index_name(i)).is_file()]
    if missing:
        raise ProtocolError(f"Plugin did not write predictions {missing} in {out}")
    return [read_mask(out / _index_name(i)) for i in range(n)]


def run_process(
    argv: Sequence[str],
    timeout: Optional[float],
    error: type[Exception],
    what: str,
) -> None:
    try:
        proc = subprocess.run(
            list(argv), capture_output=True, text=True, timeout=timeout, check=False
        )
    except subprocess.TimeoutExpired as e:
        stderr = e.stderr if isinstance(e.stderr, str) else ""
        raise _make_error(error, f"{what} timed out after {timeout}s", stderr) from e
    except OSError as e:
        raise _make_error(error, f"{what} could not be started: {e}", "") from e
    if proc.returncode != 0:
        raise _make_error(
            error, f"{what} exited with status {proc.returncode}", proc.stderr
        )


def _make_error(error: type[Exception], message: str, stderr: str) -> Exception:
    if issubclass(error, ReferenceSegmenterError):
        return error(message, stderr)
    return error(message if not stderr else f"{message}\n{stderr.strip()}")


# ---------------------------------------------------------------------------
# Reference segmenter plugins
# ---------------------------------------------------------------------------


@runtime_checkable
class SegmenterPlugin(Protocol):
    """A support-set-conditioned segmenter."""

    kind: str
    input_shape: tuple[int, int]

    def infer(
        self, support: SupportSet, queries: Sequence[Image]
    ) -> list[BinaryMask]: ...


@dataclass
class ExternalProcessPlugin:
    """Runs ``command <workdir>`` once per inference call.

    Calls on one instance are serialized; separate instances use disjoint work
    directories and may run concurrently.
    """

    command: Sequence[str]
    timeout: Optional[float] = 600.0
    input_shape: tuple[int, int] = REFERENCE_SHAPE
    kind: str = field(default="external_process", init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    @classmethod
    def from_command_line(
        cls, command: str, timeout: Optional[float] = 600.0
    ) -> "ExternalProcessPlugin":
        argv = shlex.split(command)
        if not argv:
            raise ValidationError("Empty plugin command")
        return cls(argv, timeout)

    def infer(self, support: SupportSet, queries: Sequence[Image]) -> list[BinaryMask]:
        with self._lock, tempfile.TemporaryDirectory(prefix="segperf-ref-") as tmp:
            workdir = Path(tmp)
            write_work_dir(workdir, queries, support)
            logger.debug("running %s on %d queries", self.command, len(queries))
            run_process(
                [*self.command, str(workdir)],
                self.timeout,
                ReferenceSegmenterError,
                "reference plugin",
            )
            try:
                return read_predictions(workdir, len(queries))
            except ProtocolError as e:
                raise ReferenceSegmenterError(str(e)) from e


def reference_infer(
    plugin: SegmenterPlugin,
    support: SupportSet,
    queries: Sequence[Image],
) -> list[BinaryMask]:
    """Segment ``queries`` with ``plugin`` conditioned on ``support``."""
    if not queries:
        raise ValidationError("No query images given")
    expected = plugin.input_shape
    if support.shape != expected:
        raise ValidationError(f"Support images are {support.shape}, plugin needs {expected}")
    for q in queries:
        if q.shape != expected:
            raise ValidationError(f"Query image is {q.shape}, plugin needs {expected}")
    masks = plugin.infer(support, queries)
    if len(masks) != len(queries):
        raise ProtocolError(
            f"Reference plugin returned {len(masks)} masks for {len(queries)} queries"
        )
    for m, q in zip(masks, queries):
        if m.shape != q.shape:
            raise ProtocolError(f"Reference plugin returned a {m.shape} mask for a {q.shape} query")
    return masks


# ---------------------------------------------------------------------------
# Model-under-test adapters
# ---------------------------------------------------------------------------


class ModelAdapter(Protocol):
    def predict(self, ckpt: CheckpointRef, images: Sequence[Image]) -> list[BinaryMask]: ...


class ThresholdAdapter:
    """Segments by intensity threshold; the locator is the threshold (default 0.5)."""

    def predict(self, ckpt: CheckpointRef, images: Sequence[Image]) -> list[BinaryMask]:
        try:
            threshold = float(ckpt.locator) if ckpt.locator else 0.5
        except ValueError as e:
            raise PluginError(f"Invalid threshold locator {ckpt.locator!r}") from e
        return [BinaryMask(img.pixels >= threshold) for img in images]


@dataclass
class ProcessAdapter:
    """Runs ``command <locator> <workdir>``; the process reads ``query/images`` and
    writes ``out/predictions``, as in the reference wire protocol."""

    command: Sequence[str]
    timeout: Optional[float] = 600.0

    def predict(self, ckpt: CheckpointRef, images: Sequence[Image]) -> list[BinaryMask]:
        with tempfile.TemporaryDirectory(prefix="segperf-mut-") as tmp:
            workdir = Path(tmp)
            write_work_dir(workdir, images)
            run_process(
                [*self.command, ckpt.locator, str(workdir)],
                self.timeout,
                PluginError,
                f"checkpoint {ckpt.locator}",
            )
            return read_predictions(workdir, len(images))


class AdapterRegistry:
    """Model-under-test adapters by name."""

    def __init__(self, adapters: Optional[Mapping[str, ModelAdapter]] = None) -> None:
        self._adapters: dict[str, ModelAdapter] = {"threshold": ThresholdAdapter()}
        self._adapters.update(adapters or {})

    def register(self, name: str, adapter: ModelAdapter) -> None:
        self._adapters[name] = adapter

    def __contains__(self, name: object) -> bool:
        return name in self._adapters

    def get(self, name: str) -> ModelAdapter:
        try:
            return self._adapters[name]
        except KeyError:
            raise PluginError(
                f"No adapter registered as {name!r} (have {sorted(self._adapters)})"
            ) from None

    def predict_under_test(
        self, ckpt: CheckpointRef, images: Sequence[Image]
    ) -> list[BinaryMask]:
        """Predictions of checkpoint ``ckpt``, one mask per image in order."""
        masks = self.get(ckpt.adapter).predict(ckpt, images)
        if len(masks) != len(images):
            raise ProtocolError(
                f"Checkpoint {ckpt.model_id}@{ckpt.epoch} returned {len(masks)} masks "
                f"for {len(images)} images"
            )
        for m, img in zip(masks, images):
            if m.shape != img.shape:
                raise ProtocolError(
                    f"Checkpoint {ckpt.model_id}@{ckpt.epoch} returned a {m.shape} "
                    f"mask for a {img.shape} image"
                )
        return masks
