"""
Experiment-scale checks on the trained fixture classifier.

Run with ``pytest -m slow``; the session fixture trains the model once.
"""
import json

import numpy as np
import pytest
from typer.testing import CliRunner

from src.cli import app
from src.imgproc import gaussian_blur2d, minmax_normalize
from src.models import FixtureDatasetSpec, GroupCamConfig, MetricKind, RandomizationMode, SaliencyMethod
from src.services import persistence
from src.services.evaluation import (
    deletion_curve,
    evaluate_dataset,
    insertion_curve,
    pointing_game,
    sanity_check,
    summarize_curves,
)
from src.services.finetune import FinetuneRunner
from src.services.fixtures import evaluate_accuracy, generate_fixture_dataset
from src.services.model_adapter import gradient_check
from src.services.saliency import confidence_gain, grad_cam, group_cam

pytestmark = pytest.mark.slow


def test_held_out_accuracy(trained_fixture):
    adapter, held_out = trained_fixture
    assert evaluate_accuracy(adapter, held_out) >= 0.95


def test_trained_gradients_match_finite_differences(trained_fixture):
    adapter, held_out = trained_fixture
    report = gradient_check(adapter, held_out[3].image, held_out[3].label, n_cells=200)
    assert report.pass_fraction >= 0.99


def test_shape_mask_beats_background_mask(trained_fixture):
    adapter, held_out = trained_fixture
    wins = 0
    for sample in held_out[:100]:
        box = sample.bbox
        shape_mask = np.zeros((64, 64))
        shape_mask[box.y : box.y + box.h, box.x : box.x + box.w] = 1.0
        baseline = gaussian_blur2d(sample.image, 51, 50.0)
        gain_shape = confidence_gain(adapter, sample.image, baseline, shape_mask, sample.label)
        gain_background = confidence_gain(adapter, sample.image, baseline, 1.0 - shape_mask, sample.label)
        wins += gain_shape > gain_background
    assert wins >= 90


def test_pointing_accuracy(trained_fixture):
    adapter, held_out = trained_fixture
    groupcam_hits = gradcam_hits = 0
    for sample in held_out:
        saliency, _ = group_cam(adapter, sample.image, sample.label)
        groupcam_hits += pointing_game(saliency, [(sample.category, sample.bbox)]).hits.get(sample.category, 0)
        reference = grad_cam(adapter, sample.image, sample.label)
        gradcam_hits += pointing_game(reference, [(sample.category, sample.bbox)]).hits.get(sample.category, 0)
    groupcam_acc = groupcam_hits / len(held_out)
    gradcam_acc = gradcam_hits / len(held_out)
    assert groupcam_acc >= 0.8
    assert gradcam_acc >= 0.75
    assert groupcam_acc >= gradcam_acc - 0.05


def test_grad_cam_reduction_on_twenty_images(trained_fixture):
    adapter, held_out = trained_fixture
    config = GroupCamConfig(groups=1, denoise=False)
    compared = 0
    for sample in held_out:
        saliency, scores = group_cam(adapter, sample.image, sample.label, config)
        if scores[0].alpha <= 0:
            continue
        reference = grad_cam(adapter, sample.image, sample.label)
        np.testing.assert_allclose(
            minmax_normalize(saliency.data), minmax_normalize(reference.data), atol=1e-6
        )
        compared += 1
        if compared == 20:
            break
    assert compared == 20


def test_curve_endpoints_and_query_counts(trained_fixture):
    adapter, held_out = trained_fixture
    for sample in held_out[:50]:
        saliency, _ = group_cam(adapter, sample.image, sample.label, GroupCamConfig(groups=8))
        original, blurred = adapter.class_scores(
            [sample.image, gaussian_blur2d(sample.image, 51, 50.0)]
        )[:, sample.label]
        before = adapter.query_count
        deletion = deletion_curve(adapter, sample.image, saliency, sample.label, 0.1)
        assert adapter.query_count - before == 11
        insertion = insertion_curve(adapter, sample.image, saliency, sample.label, 0.1)
        assert insertion.scores[-1] == original == deletion.scores[0]
        assert insertion.scores[0] == deletion.scores[-1] == blurred


def test_group_cam_overall_keeps_up_with_grad_cam(trained_fixture):
    adapter, held_out = trained_fixture
    metrics = [MetricKind.AUC]
    groupcam = evaluate_dataset(adapter, held_out, SaliencyMethod.GROUPCAM, metrics=metrics)
    gradcam = evaluate_dataset(adapter, held_out, SaliencyMethod.GRADCAM, metrics=metrics)
    assert summarize_curves(groupcam.rows)["overall"] >= summarize_curves(gradcam.rows)["overall"] - 0.02


def test_cubing_the_map_changes_no_outcome(trained_fixture):
    adapter, held_out = trained_fixture
    for sample in held_out[:20]:
        saliency, _ = group_cam(adapter, sample.image, sample.label)
        cubed = saliency.data ** 3
        boxes = [(sample.category, sample.bbox)]
        assert pointing_game(saliency, boxes) == pointing_game(cubed, boxes)
        for curve in (deletion_curve, insertion_curve):
            a = curve(adapter, sample.image, saliency, sample.label, 0.05)
            b = curve(adapter, sample.image, cubed, sample.label, 0.05)
            assert a.auc == b.auc


def test_cascade_randomisation_destroys_saliency(trained_fixture):
    adapter, held_out = trained_fixture
    finals = []
    for sample in held_out[:20]:
        report = sanity_check(adapter, sample.image, sample.label, mode=RandomizationMode.CASCADE, seed=0)
        finals.append(report.layers[-1].similarity)
    assert float(np.mean(np.abs(finals))) < 0.5


def test_augmented_finetune_keeps_up_with_control(trained_fixture, fixture_spec):
    adapter, held_out = trained_fixture
    train = generate_fixture_dataset(fixture_spec, 400)
    report = FinetuneRunner(adapter, train, held_out, epochs=5, seed=0).run()
    assert len(report.augmented) == len(report.control) == 6
    assert report.augmented[-1].accuracy >= report.control[-1].accuracy - 0.02


def test_make_fixtures_command(tmp_path):
    runner = CliRunner()
    first = runner.invoke(app, ["make-fixtures", "--seed", "0", "--n", "800", "--out", str(tmp_path / "a")])
    assert first.exit_code == 0, first.output
    report = json.loads((tmp_path / "a" / "training_report.json").read_text())
    assert report["held_out_accuracy"] >= 0.95
    assert (tmp_path / "a" / "model.pt").exists()

    again = persistence.save_fixture_dataset(
        generate_fixture_dataset(FixtureDatasetSpec(seed=0), 800), tmp_path / "b"
    )
    assert (tmp_path / "a" / "dataset" / "index.json").read_bytes() == again.read_bytes()
