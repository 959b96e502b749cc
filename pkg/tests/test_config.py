import json

import pytest
from pydantic import ValidationError

from src.config import Settings, load_config_file, resolve_run_config
from src.errors import InvalidArgumentError
from src.models import SaliencyMethod


def test_defaults():
    cfg = resolve_run_config("explain")
    assert (cfg.groupcam.groups, cfg.groupcam.theta, cfg.groupcam.ksize, cfg.groupcam.sigma) == (32, 70.0, 51, 50.0)
    assert cfg.method == SaliencyMethod.GROUPCAM
    assert cfg.groupcam.denoise is True


def test_flags_beat_file_beat_defaults():
    cfg = resolve_run_config(
        "explain",
        {"groups": 8, "theta": 50, "groupcam": {"sigma": 10}},
        {"groups": 4, "theta": None},
    )
    assert cfg.groupcam.groups == 4
    assert cfg.groupcam.theta == 50
    assert cfg.groupcam.sigma == 10
    assert cfg.groupcam.ksize == 51


def test_invalid_values_fail_validation():
    with pytest.raises(ValidationError):
        resolve_run_config("make-fixtures", {}, {"n": 0})
    with pytest.raises(ValidationError):
        resolve_run_config("explain", {}, {"ksize": 4})


def test_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 7}))
    assert load_config_file(path) == {"seed": 7}
    assert load_config_file(None) == {}
    path.write_text("[1, 2]")
    with pytest.raises(InvalidArgumentError):
        load_config_file(path)


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("GROUPCAM_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("GROUPCAM_LOG_JSON", "true")
    monkeypatch.setenv("GROUPCAM_TORCH_THREADS", "2")
    settings = Settings.from_env()
    assert settings.log_level == "DEBUG"
    assert settings.log_json is True
    assert settings.torch_threads == 2
