import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
import torch
from PIL import Image
from pydantic import BaseModel

from ..errors import InvalidArgumentError
from ..models import CLASS_NAMES, BoundingBox, FixtureSample, SaliencyMap, SaliencyMethod
from .fixtures import FixtureCNN
from .model_adapter import TorchModelAdapter

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]
GRID_HEADER = np.dtype("<u4")
GRID_VALUES = np.dtype("<f4")


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_saliency(path: PathLike, saliency: SaliencyMap, config: Dict[str, Any]) -> Path:
    """
    Binary grid: H and W as little-endian u32, then H*W little-endian
    float32 values in row-major order. A sidecar JSON records the method,
    class and config.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = saliency.shape
    with open(path, "wb") as f:
        f.write(np.array([height, width], dtype=GRID_HEADER).tobytes())
        f.write(np.ascontiguousarray(saliency.data, dtype=GRID_VALUES).tobytes())
    sidecar = {
        "method": saliency.method.value,
        "class_index": saliency.class_index,
        "config": config,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_saliency(path: PathLike) -> SaliencyMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise InvalidArgumentError(f"{path} is too short for a saliency grid")
    height, width = (int(v) for v in np.frombuffer(raw[:8], dtype=GRID_HEADER))
    values = np.frombuffer(raw[8:], dtype=GRID_VALUES)
    if values.size != height * width:
        raise InvalidArgumentError(f"{path}: header says {height}x{width}, found {values.size} values")
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    return SaliencyMap(
        data=values.reshape(height, width).astype(np.float64),
        class_index=int(meta["class_index"]),
        method=SaliencyMethod(meta["method"]),
    )


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png_rgb(path: PathLike, img: np.ndarray) -> Path:
    """Write a C x H x W image in [0, 1] as 8-bit RGB"""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"expected C x H x W, got {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.transpose(arr[:3], (1, 2, 0))), mode="RGB").save(path, format="PNG")
    return path


def save_png_gray(path: PathLike, saliency: np.ndarray) -> Path:
    """Saliency as a grey image, stored as 8-bit RGB"""
    data = np.asarray(saliency, dtype=np.float64)
    return save_png_rgb(path, np.repeat(data[None, :, :], 3, axis=0))


def load_image_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1)).copy()


def save_fixture_dataset(samples: Sequence[FixtureSample], out_dir: PathLike) -> Path:
    """PNG per sample under images/ plus index.json {id: {label, bbox}}"""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    index = {}
    for sample in samples:
        save_png_rgb(out_dir / "images" / f"{sample.sample_id}.png", sample.image)
        index[sample.sample_id] = {"label": sample.label, "bbox": sample.bbox.as_list()}
    index_path = out_dir / "index.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("fixture_dataset_saved", path=str(out_dir), samples=len(samples))
    return index_path


def load_annotations(path: PathLike) -> Dict[str, List[Tuple[str, BoundingBox]]]:
    """
    Read either the fixture index {id: {label, bbox}} or a COCO-subset file
    {image_id: [{category, bbox}, ...]}.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    annotations: Dict[str, List[Tuple[str, BoundingBox]]] = {}
    for image_id, entry in data.items():
        if isinstance(entry, dict):
            annotations[image_id] = [(CLASS_NAMES[int(entry["label"])], BoundingBox.from_list(entry["bbox"]))]
        elif isinstance(entry, list):
            annotations[image_id] = [
                (str(obj["category"]), BoundingBox.from_list(obj["bbox"])) for obj in entry
            ]
        else:
            raise InvalidArgumentError(f"unrecognised annotation entry for {image_id!r}")
    return annotations


def load_fixture_dataset(dataset_dir: PathLike) -> List[FixtureSample]:
    dataset_dir = Path(dataset_dir)
    index_path = dataset_dir / "index.json"
    if not index_path.exists():
        raise InvalidArgumentError(f"{dataset_dir} has no index.json")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    samples = []
    for sample_id in sorted(index):
        entry = index[sample_id]
        label = int(entry["label"])
        samples.append(
            FixtureSample(
                sample_id=sample_id,
                image=load_image_png(dataset_dir / "images" / f"{sample_id}.png"),
                label=label,
                category=CLASS_NAMES[label],
                bbox=BoundingBox.from_list(entry["bbox"]),
            )
        )
    return samples


def save_checkpoint(adapter: TorchModelAdapter, path: PathLike) -> Path:
    if not isinstance(adapter.model, FixtureCNN):
        raise InvalidArgumentError("only fixture models can be checkpointed")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "architecture": adapter.model.architecture(),
            "state_dict": adapter.model.state_dict(),
            "target_layer": adapter.default_target_layer,
        },
        path,
    )
    return path


def load_checkpoint(path: PathLike) -> TorchModelAdapter:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    arch = payload["architecture"]
    model = FixtureCNN(
        in_channels=arch["in_channels"],
        image_size=arch["image_size"],
        num_classes=arch["num_classes"],
        widths=tuple(arch["widths"]),
    ).double()
    model.load_state_dict(payload["state_dict"])
    return TorchModelAdapter(model, target_layer=payload.get("target_layer"))


def write_csv(path: PathLike, rows: Sequence[Union[BaseModel, Dict[str, Any]]], columns: Sequence[str]) -> Path:
    records = [r.model_dump(mode="json") if isinstance(r, BaseModel) else dict(r) for r in rows]
    frame = pd.DataFrame(records).reindex(columns=list(columns))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\r\n", float_format="%.10g")
    return path


def write_json(path: PathLike, payload: Union[BaseModel, Dict[str, Any], List[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path
