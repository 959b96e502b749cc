from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgumentError, TrainingFailureError
from ..imgproc import bilinear_upsample, blend, gaussian_blur2d, minmax_normalize
from ..models import BoundingBox, FixtureDatasetSpec, FixtureSample, TrainingReport
from .model_adapter import ModelAdapter, TorchModelAdapter, gradient_check

logger = structlog.get_logger(__name__)

FIXTURE_EPOCHS = 16


class ConvStage(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(),
        )


class FixtureCNN(nn.Module):
    """
    Small classifier for the synthetic shape dataset.

    Three 3x3 conv stages with 2x2 max-pooling in between, then global
    average pooling and a linear head. ``conv3`` (64 channels, 16 x 16 for
    64 x 64 inputs) is the default explanation layer.
    """

    def __init__(
        self,
        in_channels: int = 3,
        image_size: int = 64,
        num_classes: int = 2,
        widths: Tuple[int, int, int] = (16, 32, 64),
    ):
        super().__init__()
        self.input_shape = (in_channels, image_size, image_size)
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.layer_ids = ("conv1", "conv2", "conv3", "fc")

        self.conv1 = ConvStage(in_channels, widths[0])
        self.pool1 = nn.MaxPool2d(2)
        self.conv2 = ConvStage(widths[0], widths[1])
        self.pool2 = nn.MaxPool2d(2)
        self.conv3 = ConvStage(widths[1], widths[2])
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[2], num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool1(self.conv1(x))
        x = self.pool2(self.conv2(x))
        x = self.gap(self.conv3(x))
        return self.fc(torch.flatten(x, 1))

    def architecture(self) -> dict:
        return {
            "in_channels": self.input_shape[0],
            "image_size": self.input_shape[1],
            "num_classes": self.num_classes,
            "widths": list(self.widths),
        }


def build_fixture_model(seed: int, spec: Optional[FixtureDatasetSpec] = None) -> TorchModelAdapter:
    """Freshly initialised (untrained) float64 fixture classifier"""
    spec = spec or FixtureDatasetSpec()
    torch.manual_seed(seed)
    model = FixtureCNN(
        in_channels=spec.channels,
        image_size=spec.image_size,
        num_classes=len(spec.class_names),
    ).double()
    return TorchModelAdapter(model)


def render_sample(spec: FixtureDatasetSpec, index: int) -> FixtureSample:
    """
    Render one sample as a pure function of (seed, index).

    Intensities are drawn as 8-bit levels so a PNG round trip is lossless:
    background 0..76 (at most 0.298), shape 179..255 (at least 0.702).
    """
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    label = index % len(spec.class_names)

    background = rng.integers(0, 77, size=(spec.channels, size, size))
    level = rng.integers(179, 256, size=spec.channels)
    side = int(rng.integers(spec.min_shape_size, spec.max_shape_size + 1))
    x0 = int(rng.integers(0, size - side + 1))
    y0 = int(rng.integers(0, size - side + 1))

    yy, xx = np.mgrid[0:size, 0:size]
    if spec.class_names[label] == "circle":
        radius = side / 2.0
        cx, cy = x0 + radius, y0 + radius
        mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= radius * radius
    else:
        mask = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)

    image = np.where(mask[None, :, :], level[:, None, None], background) / 255.0
    ys, xs = np.nonzero(mask)
    bbox = BoundingBox(
        x=int(xs.min()),
        y=int(ys.min()),
        w=int(xs.max() - xs.min() + 1),
        h=int(ys.max() - ys.min() + 1),
    )
    return FixtureSample(
        sample_id=f"{index:05d}",
        image=image.astype(np.float64),
        label=label,
        category=spec.class_names[label],
        bbox=bbox,
    )


def generate_fixture_dataset(spec: FixtureDatasetSpec, n: int) -> List[FixtureSample]:
    if n < 1:
        raise InvalidArgumentError(f"dataset size must be at least 1, got {n}")
    return [render_sample(spec, spec.start_index + i) for i in range(n)]


def held_out_spec(spec: FixtureDatasetSpec, train_size: int) -> FixtureDatasetSpec:
    """Spec for the indices right after a training range"""
    return spec.model_copy(update={"start_index": spec.start_index + train_size})


def stack_samples(samples: Sequence[FixtureSample], dtype=torch.float64):
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    labels = torch.as_tensor([s.label for s in samples], dtype=torch.long)
    return images, labels


def evaluate_accuracy(adapter: ModelAdapter, samples: Sequence[FixtureSample]) -> float:
    if not samples:
        raise InvalidArgumentError("accuracy of an empty sample set")
    scores = adapter.class_scores([s.image for s in samples])
    predictions = scores.argmax(axis=1)
    labels = np.asarray([s.label for s in samples])
    return float(np.mean(predictions == labels))


def train_epoch(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    labels: torch.Tensor,
    order: torch.Tensor,
    batch_size: int,
) -> float:
    """One pass over ``order``; returns the mean training loss"""
    model.train()
    total, count = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        optimizer.zero_grad()
        loss = F.cross_entropy(model(images[batch]), labels[batch])
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"training diverged: loss is {loss.item()}")
        loss.backward()
        optimizer.step()
        total += loss.item() * len(batch)
        count += len(batch)
    model.eval()
    return total / count


def random_occlusion_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """
    Random keep-mask for occlusion training.

    One of: a smooth random field used as a soft mask, the same field
    thresholded at a random quantile, or an axis-aligned box that is either
    kept or hidden.
    """
    kind = int(rng.integers(3))
    if kind < 2:
        cells = int(rng.integers(3, 9))
        field = minmax_normalize(bilinear_upsample(rng.random((cells, cells)), size, size))
        if kind == 0:
            return field
        return (field > np.quantile(field, rng.uniform(0.05, 0.95))).astype(np.float64)
    w, h = (int(v) for v in rng.integers(size // 8, size + 1, size=2))
    x = int(rng.integers(0, size - w + 1))
    y = int(rng.integers(0, size - h + 1))
    mask = np.zeros((size, size))
    mask[y : y + h, x : x + w] = 1.0
    return 1.0 - mask if rng.random() < 0.5 else mask


class FixtureTrainer:
    """
    Trains the fixture classifier and enforces the held-out accuracy gate.

    A share of every epoch's images is shown partly replaced by the blurred
    baseline under a random mask. The labels stay, so the model's confidence
    follows how much of the shape is visible, which is what confidence
    gains and deletion/insertion curves measure.
    """

    def __init__(
        self,
        epochs: int = FIXTURE_EPOCHS,
        seed: int = 0,
        learning_rate: float = 2e-3,
        batch_size: int = 32,
        min_accuracy: float = 0.95,
        occlusion_probability: float = 0.5,
        blur_ksize: int = 51,
        blur_sigma: float = 50.0,
    ):
        if not 0.0 <= occlusion_probability <= 1.0:
            raise InvalidArgumentError(
                f"occlusion probability must lie in [0, 1], got {occlusion_probability}"
            )
        self.epochs = epochs
        self.seed = seed
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.min_accuracy = min_accuracy
        self.occlusion_probability = occlusion_probability
        self.blur_ksize = blur_ksize
        self.blur_sigma = blur_sigma
        self.report: Optional[TrainingReport] = None

    def occluded_images(
        self, clean: np.ndarray, blurred: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """One epoch's inputs: each image occluded with ``occlusion_probability``"""
        images = clean.copy()
        size = clean.shape[-1]
        for i in range(len(clean)):
            if rng.random() < self.occlusion_probability:
                mask = random_occlusion_mask(rng, size)
                images[i] = blend(clean[i], blurred[i], mask)
        return images

    def fit(
        self,
        dataset: Sequence[FixtureSample],
        held_out: Sequence[FixtureSample],
        spec: Optional[FixtureDatasetSpec] = None,
        check_gradients: bool = True,
    ) -> TorchModelAdapter:
        if not dataset or not held_out:
            raise InvalidArgumentError("training and held-out sets must be non-empty")

        adapter = build_fixture_model(self.seed, spec)
        model = adapter.model
        clean = np.stack([s.image for s in dataset])
        blurred = np.stack([gaussian_blur2d(s.image, self.blur_ksize, self.blur_sigma) for s in dataset])
        labels = torch.as_tensor([s.label for s in dataset], dtype=torch.long)
        optimizer = torch.optim.Adam(model.parameters(), lr=self.learning_rate)
        generator = torch.Generator().manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)

        losses: List[float] = []
        for epoch in range(self.epochs):
            images = torch.as_tensor(self.occluded_images(clean, blurred, rng), dtype=adapter.dtype)
            order = torch.randperm(len(dataset), generator=generator)
            loss = train_epoch(model, optimizer, images, labels, order, self.batch_size)
            losses.append(loss)
            logger.info("fixture_epoch_done", epoch=epoch + 1, loss=round(loss, 5))

        accuracy = evaluate_accuracy(adapter, held_out)
        check = None
        if check_gradients:
            check = gradient_check(adapter, held_out[0].image, held_out[0].label, seed=self.seed)

        self.report = TrainingReport(
            seed=self.seed,
            epochs=self.epochs,
            train_size=len(dataset),
            held_out_size=len(held_out),
            epoch_losses=losses,
            held_out_accuracy=accuracy,
            gradient_check=check,
        )
        logger.info("fixture_training_done", held_out_accuracy=accuracy, epochs=self.epochs)

        if accuracy < self.min_accuracy:
            logger.error(
                "fixture_accuracy_gate_failed", accuracy=accuracy, required=self.min_accuracy
            )
            raise TrainingFailureError(
                f"held-out accuracy {accuracy:.4f} below required {self.min_accuracy:.2f}"
            )
        return adapter


def held_out_after(
    dataset: Sequence[FixtureSample], spec: FixtureDatasetSpec, n: int = 200
) -> List[FixtureSample]:
    """``n`` samples whose indices follow the highest index in ``dataset``"""
    last = max(int(s.sample_id) for s in dataset)
    return generate_fixture_dataset(spec.model_copy(update={"start_index": last + 1}), n)


def train_fixture_model(
    dataset: Sequence[FixtureSample],
    epochs: int = FIXTURE_EPOCHS,
    seed: int = 0,
    held_out: Optional[Sequence[FixtureSample]] = None,
    spec: Optional[FixtureDatasetSpec] = None,
    min_accuracy: float = 0.95,
) -> TorchModelAdapter:
    """
    Train the fixture classifier on ``dataset``.

    When no held-out set is given, 200 samples following the highest
    training index are generated for the accuracy gate.
    """
    if not dataset:
        raise InvalidArgumentError("training set must be non-empty")
    spec = spec or FixtureDatasetSpec()
    if held_out is None:
        held_out = held_out_after(dataset, spec)
    trainer = FixtureTrainer(epochs=epochs, seed=seed, min_accuracy=min_accuracy)
    return trainer.fit(dataset, held_out, spec=spec)
