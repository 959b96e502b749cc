import json

import numpy as np
import pytest

from src.errors import InvalidArgumentError
from src.models import CurveRow, SaliencyMap, SaliencyMethod
from src.services import persistence


def test_saliency_grid_layout(tmp_path, rng):
    data = rng.random((5, 7))
    sal = SaliencyMap(data=data, class_index=1, method=SaliencyMethod.GRADCAM)
    path = persistence.save_saliency(tmp_path / "map.bin", sal, {"groups": 1})
    raw = path.read_bytes()
    assert len(raw) == 8 + 5 * 7 * 4
    assert np.frombuffer(raw[:8], dtype="<u4").tolist() == [5, 7]
    meta = json.loads((tmp_path / "map.bin.json").read_text())
    assert meta == {"class_index": 1, "config": {"groups": 1}, "method": "gradcam"}

    loaded = persistence.load_saliency(path)
    np.testing.assert_allclose(loaded.data, data, atol=1e-7)
    assert loaded.method == SaliencyMethod.GRADCAM


def test_truncated_grid_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(np.array([4, 4], dtype="<u4").tobytes() + b"\x00" * 8)
    (tmp_path / "bad.bin.json").write_text('{"method": "groupcam", "class_index": 0}')
    with pytest.raises(InvalidArgumentError):
        persistence.load_saliency(path)


def test_png_is_lossless_for_fixture_images(tmp_path, small_dataset):
    img = small_dataset[0].image
    persistence.save_png_rgb(tmp_path / "a.png", img)
    np.testing.assert_allclose(persistence.load_image_png(tmp_path / "a.png"), img, atol=1e-12)


def test_gray_png_replicates_channels(tmp_path):
    persistence.save_png_gray(tmp_path / "g.png", np.linspace(0, 1, 12).reshape(3, 4))
    img = persistence.load_image_png(tmp_path / "g.png")
    assert img.shape == (3, 3, 4)
    np.testing.assert_array_equal(img[0], img[2])


def test_dataset_round_trip(tmp_path, small_dataset):
    persistence.save_fixture_dataset(small_dataset, tmp_path / "ds")
    loaded = persistence.load_fixture_dataset(tmp_path / "ds")
    assert [s.sample_id for s in loaded] == [s.sample_id for s in small_dataset]
    for a, b in zip(loaded, small_dataset):
        assert a.bbox == b.bbox and a.label == b.label and a.category == b.category
        np.testing.assert_allclose(a.image, b.image, atol=1e-12)


def test_index_is_deterministic(tmp_path, small_dataset):
    first = persistence.save_fixture_dataset(small_dataset, tmp_path / "a").read_bytes()
    second = persistence.save_fixture_dataset(small_dataset, tmp_path / "b").read_bytes()
    assert first == second


def test_coco_subset_annotations(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(
        json.dumps({"img1": [{"category": "dog", "bbox": [1, 2, 3, 4]}, {"category": "cat", "bbox": [0, 0, 2, 2]}]})
    )
    annotations = persistence.load_annotations(path)
    assert [c for c, _ in annotations["img1"]] == ["dog", "cat"]
    assert annotations["img1"][0][1].as_list() == [1, 2, 3, 4]


def test_checkpoint_round_trip(tmp_path, untrained_adapter, small_dataset):
    persistence.save_checkpoint(untrained_adapter, tmp_path / "m.pt")
    restored = persistence.load_checkpoint(tmp_path / "m.pt")
    images = [s.image for s in small_dataset[:3]]
    np.testing.assert_allclose(
        restored.class_scores(images), untrained_adapter.class_scores(images), atol=1e-6
    )
    assert restored.default_target_layer == "conv3"


def test_csv_uses_crlf(tmp_path):
    row = CurveRow(image_id="00001", method=SaliencyMethod.GROUPCAM, insertion_auc=0.5, deletion_auc=0.25, overall=0.25)
    path = persistence.write_csv(tmp_path / "m.csv", [row], ["image_id", "method", "overall"])
    assert path.read_bytes() == b"image_id,method,overall\r\n00001,groupcam,0.25\r\n"
