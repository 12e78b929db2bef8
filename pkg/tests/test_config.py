from pathlib import Path

import pytest

from segperf.config import (
    WORKERS_ENV,
    CheckpointConfig,
    RunConfig,
    SyntheticConfig,
    load_run_config,
    run_config_from_dict,
    run_timestamp,
    workers_from_env,
)
from segperf.errors import IngestionError, ValidationError
from segperf.types import FitFamily, MetricId

CONFIG = """\
manifest: data/manifest.json
metrics: [dice, hd95]
plugin_cmd: python contrib/universeg_plugin.py --device cpu
support_size: 16
n_repeats: 3
seed: 7
family: linear
checkpoints:
  - {epoch: 5, locator: "0.4"}
  - {epoch: 10, locator: "0.5", adapter: process, model_id: unet}
deployed: {epoch: 10, locator: "0.5"}
out: results
"""


def test_load_run_config(tmp_path: Path) -> None:
    path = tmp_path / "run.yaml"
    path.write_text(CONFIG)
    cfg = load_run_config(path)
    assert cfg.manifest == tmp_path / "data" / "manifest.json"
    assert cfg.out == tmp_path / "results"
    assert cfg.metrics == (MetricId.DICE, MetricId.HD95)
    assert cfg.family is FitFamily.LINEAR
    assert cfg.support_size == 16 and cfg.n_repeats == 3 and cfg.seed == 7
    assert cfg.checkpoints[1] == CheckpointConfig(10, "0.5", "process", "unet")
    assert cfg.deployed == CheckpointConfig(10, "0.5")
    assert cfg.synthetic is None


def test_empty_config_gives_defaults(tmp_path: Path) -> None:
    path = tmp_path / "run.yaml"
    path.write_text("")
    cfg = load_run_config(path)
    assert cfg == RunConfig()
    assert cfg.support_size == 64 and cfg.n_repeats == 6


def test_synthetic_section() -> None:
    cfg = run_config_from_dict(
        {"synthetic": {"n_levels": 10, "quality_range": [0.3, 0.9]}, "metrics": "jaccard"}
    )
    assert cfg.synthetic == SyntheticConfig(n_levels=10, quality_range=(0.3, 0.9))
    assert cfg.metrics == (MetricId.JACCARD,)


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"supportsize": 4}, "Unknown configuration keys"),
        ({"synthetic": {"levels": 4}}, "synthetic"),
        ({"checkpoints": [{"epoch": 5}]}, "checkpoints\\[0\\]"),
        ({"checkpoints": ["0.5"]}, "mapping"),
        ({"metrics": ["accuracy"]}, "accuracy"),
        ({"support_size": 65}, "support_size"),
        ({"n_repeats": 0}, "n_repeats"),
        ({"metrics": []}, "metric"),
    ],
)
def test_config_validation(raw: dict[str, object], match: str) -> None:
    with pytest.raises(ValidationError, match=match):
        run_config_from_dict(raw)


def test_config_file_errors(tmp_path: Path) -> None:
    with pytest.raises(IngestionError):
        load_run_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError, match="mapping"):
        load_run_config(tmp_path / "list.yaml")
    (tmp_path / "bad.yaml").write_text("seed: [1, 2\n")
    with pytest.raises(ValidationError, match="Invalid configuration"):
        load_run_config(tmp_path / "bad.yaml")


def test_overrides_skip_none() -> None:
    cfg = RunConfig(seed=3).with_overrides(seed=None, support_size=8)
    assert cfg.seed == 3 and cfg.support_size == 8


def test_as_dict_omits_workers() -> None:
    cfg = RunConfig(workers=4, synthetic=SyntheticConfig())
    doc = cfg.as_dict()
    assert "workers" not in doc
    assert doc["metrics"] == ["dice"]
    assert doc["synthetic"]["quality_range"] == [0.35, 0.95]
    assert doc == RunConfig(workers=1, synthetic=SyntheticConfig()).as_dict()
    assert cfg == RunConfig(workers=1, synthetic=SyntheticConfig())


def test_workers_from_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert workers_from_env() == 1
    monkeypatch.setenv(WORKERS_ENV, "4")
    assert workers_from_env() == 4
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(ValidationError):
        workers_from_env()
    monkeypatch.setenv(WORKERS_ENV, "0")
    with pytest.raises(ValidationError):
        workers_from_env()


def test_run_timestamp_honours_source_date_epoch(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert run_timestamp() == "1970-01-01T00:00:00Z"
    monkeypatch.delenv("SOURCE_DATE_EPOCH")
    assert run_timestamp().endswith("Z")
