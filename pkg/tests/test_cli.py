import json

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from src.cli import app
from src.models import GroupCamConfig
from src.services import persistence
from src.services.fixtures import build_fixture_model
from src.services.saliency import group_cam

runner = CliRunner()


@pytest.fixture
def workspace(tmp_path, small_dataset):
    persistence.save_checkpoint(build_fixture_model(seed=0), tmp_path / "model.pt")
    persistence.save_fixture_dataset(small_dataset, tmp_path / "dataset")
    return tmp_path


def image_path(workspace):
    return workspace / "dataset" / "images" / "00001.png"


def test_make_fixtures_rejects_empty_dataset(tmp_path):
    result = runner.invoke(app, ["make-fixtures", "--n", "0", "--out", str(tmp_path / "fx")])
    assert result.exit_code != 0


def test_explain_writes_outputs_with_default_config(workspace):
    out = workspace / "explain"
    result = runner.invoke(
        app, ["explain", "--model", str(workspace / "model.pt"), "--image", str(image_path(workspace)), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    for name in ("saliency.bin", "saliency.bin.json", "saliency.png", "overlay.png", "config.json"):
        assert (out / name).exists()
    config = json.loads((out / "saliency.bin.json").read_text())["config"]
    assert (config["groups"], config["theta"], config["ksize"], config["sigma"]) == (32, 70.0, 51, 50.0)


def test_explain_is_byte_identical_across_runs(workspace):
    args = ["explain", "--model", str(workspace / "model.pt"), "--image", str(image_path(workspace)), "--class", "1"]
    runner.invoke(app, args + ["--out", str(workspace / "a"), "--seed", "3"])
    runner.invoke(app, args + ["--out", str(workspace / "b"), "--seed", "3"])
    assert (workspace / "a" / "saliency.bin").read_bytes() == (workspace / "b" / "saliency.bin").read_bytes()


def positive_single_group_case(workspace):
    adapter = persistence.load_checkpoint(workspace / "model.pt")
    for path in sorted((workspace / "dataset" / "images").glob("*.png")):
        img = persistence.load_image_png(path)
        for class_idx in range(adapter.num_classes):
            _, scores = group_cam(adapter, img, class_idx, GroupCamConfig(groups=1, denoise=False))
            if scores[0].alpha > 0:
                return path, class_idx
    return None


def test_single_group_grid_matches_grad_cam(workspace):
    case = positive_single_group_case(workspace)
    assert case is not None
    path, class_idx = case

    base = ["explain", "--model", str(workspace / "model.pt"), "--image", str(path), "--class", str(class_idx)]
    grad_run = runner.invoke(app, base + ["--method", "gradcam", "--out", str(workspace / "grad")])
    group_run = runner.invoke(app, base + ["--groups", "1", "--no-denoise", "--out", str(workspace / "group")])
    assert grad_run.exit_code == 0, grad_run.output
    assert group_run.exit_code == 0, group_run.output
    grad = (workspace / "grad" / "saliency.bin").read_bytes()
    group = (workspace / "group" / "saliency.bin").read_bytes()
    assert grad == group


def test_explain_verbose_prints_gain_table(workspace):
    result = runner.invoke(
        app,
        [
            "explain",
            "--model", str(workspace / "model.pt"),
            "--image", str(image_path(workspace)),
            "--groups", "4",
            "--verbose",
            "--out", str(workspace / "v"),
        ],
    )
    assert result.exit_code == 0
    assert "alpha" in result.output


@pytest.mark.parametrize(
    "extra",
    [["--class", "5"], ["--image", "missing.png"], ["--groups", "65"], ["--ksize", "4"]],
)
def test_explain_failures_exit_nonzero(workspace, extra):
    args = ["explain", "--model", str(workspace / "model.pt"), "--image", str(image_path(workspace))]
    result = runner.invoke(app, args + extra + ["--out", str(workspace / "bad")])
    assert result.exit_code == 1


def run_evaluate(workspace, out, *extra):
    return runner.invoke(
        app,
        [
            "evaluate",
            "--model", str(workspace / "model.pt"),
            "--dataset", str(workspace / "dataset"),
            "--metrics", "auc,pointing",
            "--step-fraction", "0.25",
            "--groups", "4",
            "--out", str(out),
            *extra,
        ],
    )


def test_evaluate_reports(workspace):
    out = workspace / "eval"
    result = run_evaluate(workspace, out)
    assert result.exit_code == 0, result.output

    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["overall"] - (summary["insertion_auc"] - summary["deletion_auc"])) <= 1e-9

    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 8
    assert summary["insertion_auc"] == pytest.approx(metrics["insertion_auc"].mean(), abs=1e-8)

    pointing = pd.read_csv(out / "pointing.csv")
    per_category = pointing[pointing["category"] != "mean"]
    mean_row = pointing[pointing["category"] == "mean"].iloc[0]
    assert mean_row["accuracy"] == pytest.approx(per_category["accuracy"].mean(), abs=1e-9)
    assert summary["pointing_accuracy"] == pytest.approx(mean_row["accuracy"], abs=1e-9)
    assert (out / "metrics.csv").read_bytes().count(b"\r\n") == 9


def test_evaluate_rerun_is_identical(workspace):
    run_evaluate(workspace, workspace / "r1", "--jobs", "2")
    run_evaluate(workspace, workspace / "r2")
    for name in ("metrics.csv", "pointing.csv"):
        assert (workspace / "r1" / name).read_bytes() == (workspace / "r2" / name).read_bytes()


def test_evaluate_without_annotations_fails(workspace):
    result = run_evaluate(workspace, workspace / "x", "--annotations", str(workspace / "none.json"))
    assert result.exit_code == 1


def test_finetune_zero_epochs(workspace):
    out = workspace / "ft0"
    result = runner.invoke(
        app,
        ["finetune", "--model", str(workspace / "model.pt"), "--dataset", str(workspace / "dataset"),
         "--epochs", "0", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "finetune_report.json").read_text())
    assert len(report["augmented"]) == len(report["control"]) == 1
    assert report["augmented"][0]["accuracy"] == report["initial_accuracy"]


def test_finetune_renders_epochs(workspace):
    out = workspace / "ft"
    result = runner.invoke(
        app,
        ["finetune", "--model", str(workspace / "model.pt"), "--dataset", str(workspace / "dataset"),
         "--epochs", "1", "--groups", "4", "--render-epochs", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    curves = pd.read_csv(out / "finetune_curves.csv")
    assert list(curves["epoch"]) == [0, 1]
    assert curves["augmented_accuracy"].notna().all() and curves["control_accuracy"].notna().all()
    assert (out / "epochs" / "epoch_000.png").exists()
    assert (out / "epochs" / "epoch_001.png").exists()
    assert (out / "augmented.pt").exists()


def test_ablate_writes_grid(workspace):
    out = workspace / "abl"
    result = runner.invoke(
        app,
        ["ablate", "--model", str(workspace / "model.pt"), "--dataset", str(workspace / "dataset"),
         "--groups-list", "1,2", "--thetas", "0,70", "--step-fraction", "0.5", "--limit", "2",
         "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "ablation.csv")
    assert list(table.columns) == ["groups", "theta", "insertion_auc", "deletion_auc", "overall"]
    assert len(table) == 4
    np.testing.assert_allclose(table["overall"], table["insertion_auc"] - table["deletion_auc"], atol=1e-9)
