from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch

from ..errors import InvalidArgumentError
from ..imgproc import blend, gaussian_blur2d
from ..models import AugmentConfig, EpochRecord, FinetuneReport, FixtureSample
from .fixtures import evaluate_accuracy, stack_samples, train_epoch
from .model_adapter import ModelAdapter, TorchModelAdapter
from .saliency import finetune_mask

logger = structlog.get_logger(__name__)

EpochCallback = Callable[[int, ModelAdapter], None]

FINETUNE_LEARNING_RATE = 1e-3


def apply_mask(img: np.ndarray, mask: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Keep the image where mask == 1 and use its blurred copy elsewhere"""
    blurred = gaussian_blur2d(img, cfg.ksize, cfg.sigma)
    return np.clip(blend(img, blurred, mask), 0.0, 1.0)


def augment_mask(adapter: ModelAdapter, img: np.ndarray, label: int, cfg: AugmentConfig) -> np.ndarray:
    return finetune_mask(adapter, img, label, cfg.groups, cfg.ksize, cfg.sigma, cfg.layer_id)


def augment_image(
    adapter: ModelAdapter,
    img: np.ndarray,
    label: int,
    cfg: Optional[AugmentConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Blur the regions the current model does not rely on for the ground-truth class.

    With ``apply_probability < 1`` a draw from ``rng`` decides whether the
    image is augmented at all, so the caller must supply one.
    """
    cfg = cfg or AugmentConfig()
    if cfg.apply_probability < 1.0:
        if rng is None:
            raise InvalidArgumentError("apply_probability below 1 needs an rng for the draw")
        if rng.random() >= cfg.apply_probability:
            return np.array(img, dtype=np.float64, copy=True)
    return apply_mask(img, augment_mask(adapter, img, label, cfg), cfg)


class FinetuneRunner:
    """
    Paired fine-tuning: one copy trains on Group-CAM augmented images, a
    control copy on the plain images, both with the same shuffling seed.

    Masks are regenerated from the live augmented model at the start of every
    epoch. ``mask_change`` tracks how far a tracked subset's masks have moved
    from the epoch-0 masks after each epoch.
    """

    def __init__(
        self,
        adapter: TorchModelAdapter,
        train_samples: Sequence[FixtureSample],
        held_out: Sequence[FixtureSample],
        epochs: int = 5,
        seed: int = 0,
        config: Optional[AugmentConfig] = None,
        learning_rate: float = FINETUNE_LEARNING_RATE,
        batch_size: int = 32,
        tracked_size: int = 16,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ):
        if epochs < 0:
            raise InvalidArgumentError(f"epochs must be non-negative, got {epochs}")
        if not train_samples or not held_out:
            raise InvalidArgumentError("training and held-out sets must be non-empty")
        self.adapter = adapter
        self.train_samples = list(train_samples)
        self.held_out = list(held_out)
        self.epochs = epochs
        self.seed = seed
        self.config = config or AugmentConfig()
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.tracked = self.train_samples[:tracked_size]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augmented_adapter: Optional[TorchModelAdapter] = None
        self.control_adapter: Optional[TorchModelAdapter] = None

    def _optimizer(self, adapter: TorchModelAdapter) -> torch.optim.SGD:
        return torch.optim.SGD(
            adapter.model.parameters(),
            lr=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def _tracked_masks(self, adapter: ModelAdapter) -> List[np.ndarray]:
        return [augment_mask(adapter, s.image, s.label, self.config) for s in self.tracked]

    def _augmented_images(self, adapter: ModelAdapter, rng: np.random.Generator) -> torch.Tensor:
        images = [augment_image(adapter, s.image, s.label, self.config, rng) for s in self.train_samples]
        return torch.as_tensor(np.stack(images), dtype=self.adapter.dtype)

    def run(self, on_epoch_end: Optional[EpochCallback] = None) -> FinetuneReport:
        initial_accuracy = evaluate_accuracy(self.adapter, self.held_out)
        report = FinetuneReport(
            seed=self.seed,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            initial_accuracy=initial_accuracy,
            config=self.config,
            augmented=[EpochRecord(epoch=0, accuracy=initial_accuracy)],
            control=[EpochRecord(epoch=0, accuracy=initial_accuracy)],
        )
        if on_epoch_end is not None:
            on_epoch_end(0, self.adapter)
        if self.epochs == 0:
            return report

        augmented = self.adapter.clone()
        control = self.adapter.clone()
        plain_images, labels = stack_samples(self.train_samples, dtype=self.adapter.dtype)
        augmented_opt = self._optimizer(augmented)
        control_opt = self._optimizer(control)
        augmented_order = torch.Generator().manual_seed(self.seed)
        control_order = torch.Generator().manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)

        reference_masks = self._tracked_masks(augmented)

        for epoch in range(1, self.epochs + 1):
            images = self._augmented_images(augmented, rng)
            order_a = torch.randperm(len(self.train_samples), generator=augmented_order)
            order_c = torch.randperm(len(self.train_samples), generator=control_order)

            augmented_loss = train_epoch(
                augmented.model, augmented_opt, images, labels, order_a, self.batch_size
            )
            control_loss = train_epoch(
                control.model, control_opt, plain_images, labels, order_c, self.batch_size
            )

            report.augmented.append(
                EpochRecord(epoch=epoch, train_loss=augmented_loss, accuracy=evaluate_accuracy(augmented, self.held_out))
            )
            report.control.append(
                EpochRecord(epoch=epoch, train_loss=control_loss, accuracy=evaluate_accuracy(control, self.held_out))
            )
            change = np.mean(
                [np.mean(a != b) for a, b in zip(self._tracked_masks(augmented), reference_masks)]
            )
            report.mask_change.append(float(change))

            logger.info(
                "finetune_epoch_done",
                epoch=epoch,
                augmented_accuracy=report.augmented[-1].accuracy,
                control_accuracy=report.control[-1].accuracy,
                mask_change=float(change),
            )
            if on_epoch_end is not None:
                on_epoch_end(epoch, augmented)

        self.augmented_adapter = augmented
        self.control_adapter = control
        return report


def split_held_out(samples: Sequence[FixtureSample]) -> Tuple[List[FixtureSample], List[FixtureSample]]:
    """Keep the first four fifths for training and hold out the rest."""
    samples = list(samples)
    cut = max(1, len(samples) * 4 // 5)
    return samples[:cut], samples[cut:]


def finetune_loop(
    adapter: TorchModelAdapter,
    dataset: Sequence[FixtureSample],
    epochs: int = 5,
    seed: int = 0,
    cfg: Optional[AugmentConfig] = None,
    held_out: Optional[Sequence[FixtureSample]] = None,
    learning_rate: float = FINETUNE_LEARNING_RATE,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> FinetuneReport:
    """
    Run the paired fine-tune. Without an explicit held-out set the last
    fifth of ``dataset`` is held out.
    """
    if held_out is None:
        samples, held_out = split_held_out(dataset)
    else:
        samples = list(dataset)
    runner = FinetuneRunner(
        adapter,
        samples,
        held_out,
        epochs,
        seed,
        cfg,
        learning_rate,
        momentum=momentum,
        weight_decay=weight_decay,
    )
    return runner.run()
