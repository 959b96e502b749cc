import copy
from abc import ABC, abstractmethod
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgumentError
from ..imgproc import as_image
from ..models import ActivationBundle, GradientCheckReport

logger = structlog.get_logger(__name__)


class _StopForward(Exception):
    """Raised from a forward hook to end a pass at the target layer"""


class ModelAdapter(ABC):
    """
    Boundary between saliency math and a classifier.

    Every forward evaluation that produces class scores is a query and
    advances ``query_count`` by one per image. A truncated pass that stops at
    a feature layer produces no scores and is not a query.

    Instances are single-threaded; use ``clone()`` to get one adapter per
    worker.
    """

    def __init__(self):
        self.query_count = 0

    @property
    @abstractmethod
    def layer_ids(self) -> Tuple[str, ...]:
        """Layer catalog, shallow to deep"""

    @property
    @abstractmethod
    def num_classes(self) -> int: ...

    @property
    @abstractmethod
    def input_shape(self) -> Tuple[int, int, int]: ...

    @property
    @abstractmethod
    def default_target_layer(self) -> str: ...

    @abstractmethod
    def class_scores(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        """Post-softmax probabilities, N x num_classes"""

    @abstractmethod
    def activations_with_gradients(
        self, img: np.ndarray, class_index: int, layer_id: Optional[str] = None
    ) -> ActivationBundle: ...

    @abstractmethod
    def activations(self, img: np.ndarray, layer_id: Optional[str] = None) -> np.ndarray: ...

    @abstractmethod
    def logit_with_activations(
        self, img: np.ndarray, class_index: int, layer_id: str, activations: np.ndarray
    ) -> float:
        """Class logit when ``layer_id`` outputs ``activations`` instead of its own result"""

    @abstractmethod
    def randomize_parameters(self, layer_id: str, seed: int) -> "ModelAdapter": ...

    @abstractmethod
    def clone(self) -> "ModelAdapter": ...

    def check_layer(self, layer_id: str) -> str:
        if layer_id not in self.layer_ids:
            raise InvalidArgumentError(
                f"unknown layer {layer_id!r}; catalog is {list(self.layer_ids)}"
            )
        return layer_id

    def check_class(self, class_index: int) -> int:
        if not 0 <= class_index < self.num_classes:
            raise InvalidArgumentError(
                f"class index {class_index} outside [0, {self.num_classes})"
            )
        return int(class_index)

    def check_image(self, img: np.ndarray) -> np.ndarray:
        image = as_image(img)
        if image.shape != self.input_shape:
            raise InvalidArgumentError(
                f"image shape {image.shape} does not match model input {self.input_shape}"
            )
        return image

    def layer_channels(self, layer_id: Optional[str] = None) -> int:
        """Channel count of a feature layer, read from one truncated pass (not a query)"""
        layer_id = self.check_layer(layer_id or self.default_target_layer)
        return int(self.activations(np.zeros(self.input_shape), layer_id).shape[0])


class TorchModelAdapter(ModelAdapter):
    """
    Adapter around a torch ``nn.Module`` classifier.

    Activations and gradients are captured with a forward hook on the
    target module, so any architecture works as long as the layer ids name
    submodules (``model.get_submodule``). Each image is scored in its own
    forward pass, which keeps a score independent of batch composition.
    """

    def __init__(
        self,
        model: nn.Module,
        input_shape: Optional[Tuple[int, int, int]] = None,
        num_classes: Optional[int] = None,
        layer_ids: Optional[Sequence[str]] = None,
        target_layer: Optional[str] = None,
    ):
        super().__init__()
        self.model = model.eval()
        self.dtype = next(model.parameters()).dtype
        self._input_shape = tuple(input_shape or getattr(model, "input_shape"))
        self._num_classes = int(num_classes or getattr(model, "num_classes"))
        self._layer_ids = tuple(
            layer_ids
            or getattr(model, "layer_ids", None)
            or [
                name
                for name, module in model.named_modules()
                if name and any(True for _ in module.parameters(recurse=False))
            ]
        )
        for layer_id in self._layer_ids:
            model.get_submodule(layer_id)
        self._target_layer = target_layer or self._deepest_conv()

    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return self._layer_ids

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self._input_shape

    @property
    def default_target_layer(self) -> str:
        return self._target_layer

    def _deepest_conv(self) -> str:
        for layer_id in reversed(self._layer_ids):
            module = self.model.get_submodule(layer_id)
            if any(isinstance(m, nn.Conv2d) for m in module.modules()):
                return layer_id
        raise InvalidArgumentError("model has no convolutional layer in its catalog")

    def _tensor(self, img: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(self.check_image(img), dtype=self.dtype).unsqueeze(0)

    def class_scores(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        rows: List[np.ndarray] = []
        with torch.no_grad():
            for img in batch:
                logits = self.model(self._tensor(img))
                self.query_count += 1
                probs = F.softmax(logits.to(torch.float64), dim=1)
                rows.append(probs[0].cpu().numpy())
        if not rows:
            return np.zeros((0, self.num_classes), dtype=np.float64)
        return np.stack(rows)

    def activations_with_gradients(
        self, img: np.ndarray, class_index: int, layer_id: Optional[str] = None
    ) -> ActivationBundle:
        layer_id = self.check_layer(layer_id or self._target_layer)
        class_index = self.check_class(class_index)
        module = self.model.get_submodule(layer_id)
        captured = {}

        def hook(_module, _inputs, output):
            if not output.requires_grad:
                output = output.detach().requires_grad_(True)
            captured["a"] = output
            return output

        handle = module.register_forward_hook(hook)
        try:
            with torch.enable_grad():
                logits = self.model(self._tensor(img))
                self.query_count += 1
                activation = captured["a"]
                if activation.dim() != 4:
                    raise InvalidArgumentError(
                        f"layer {layer_id!r} is not a convolutional feature layer"
                    )
                (gradient,) = torch.autograd.grad(logits[0, class_index], activation)
        finally:
            handle.remove()

        return ActivationBundle(
            activations=activation[0].detach().to(torch.float64).cpu().numpy(),
            gradients=gradient[0].detach().to(torch.float64).cpu().numpy(),
            class_index=class_index,
            layer_id=layer_id,
        )

    def activations(self, img: np.ndarray, layer_id: Optional[str] = None) -> np.ndarray:
        layer_id = self.check_layer(layer_id or self._target_layer)
        module = self.model.get_submodule(layer_id)
        captured = {}

        def hook(_module, _inputs, output):
            captured["a"] = output.detach()
            raise _StopForward()

        handle = module.register_forward_hook(hook)
        try:
            with torch.no_grad():
                try:
                    self.model(self._tensor(img))
                except _StopForward:
                    pass
        finally:
            handle.remove()

        activation = captured["a"]
        if activation.dim() != 4:
            raise InvalidArgumentError(f"layer {layer_id!r} is not a convolutional feature layer")
        return activation[0].to(torch.float64).cpu().numpy()

    def logit_with_activations(
        self, img: np.ndarray, class_index: int, layer_id: str, activations: np.ndarray
    ) -> float:
        layer_id = self.check_layer(layer_id)
        class_index = self.check_class(class_index)
        module = self.model.get_submodule(layer_id)
        replacement = torch.as_tensor(activations, dtype=self.dtype).unsqueeze(0)

        def hook(_module, _inputs, output):
            if output.shape != replacement.shape:
                raise InvalidArgumentError(
                    f"replacement {tuple(replacement.shape)} does not match {tuple(output.shape)}"
                )
            return replacement

        handle = module.register_forward_hook(hook)
        try:
            with torch.no_grad():
                logits = self.model(self._tensor(img))
                self.query_count += 1
        finally:
            handle.remove()
        return float(logits[0, class_index].item())

    def randomize_parameters(self, layer_id: str, seed: int) -> "TorchModelAdapter":
        """
        Copy the model and redraw one layer's parameters.

        Each parameter tensor of the layer is replaced by i.i.d. normal draws
        with the tensor's own empirical standard deviation. The original
        adapter is left untouched.
        """
        layer_id = self.check_layer(layer_id)
        model = copy.deepcopy(self.model)
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, param in model.get_submodule(layer_id).named_parameters():
                std = float(param.std(unbiased=False)) if param.numel() > 1 else float(param.abs().sum())
                fresh = torch.randn(param.shape, generator=generator, dtype=torch.float64) * std
                param.copy_(fresh.to(param.dtype))
                logger.debug("parameter_randomized", layer_id=layer_id, parameter=name, std=std)
        return TorchModelAdapter(
            model,
            input_shape=self._input_shape,
            num_classes=self._num_classes,
            layer_ids=self._layer_ids,
            target_layer=self._target_layer,
        )

    def clone(self) -> "TorchModelAdapter":
        return TorchModelAdapter(
            copy.deepcopy(self.model),
            input_shape=self._input_shape,
            num_classes=self._num_classes,
            layer_ids=self._layer_ids,
            target_layer=self._target_layer,
        )

    def layer_parameters(self, layer_id: str) -> np.ndarray:
        """All parameters of one layer, flattened, for inspection"""
        module = self.model.get_submodule(self.check_layer(layer_id))
        return np.concatenate(
            [p.detach().to(torch.float64).cpu().numpy().ravel() for p in module.parameters()]
        )


def class_scores(adapter: ModelAdapter, batch: Sequence[np.ndarray]) -> np.ndarray:
    return adapter.class_scores(batch)


def activations_with_gradients(
    adapter: ModelAdapter, img: np.ndarray, class_index: int, layer_id: Optional[str] = None
) -> ActivationBundle:
    return adapter.activations_with_gradients(img, class_index, layer_id)


def randomize_parameters(adapter: ModelAdapter, layer_id: str, seed: int) -> ModelAdapter:
    return adapter.randomize_parameters(layer_id, seed)


def gradient_check(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    layer_id: Optional[str] = None,
    n_cells: int = 200,
    eps: float = 1e-3,
    seed: int = 0,
    tolerance: float = 1e-3,
) -> GradientCheckReport:
    """
    Compare analytic activation gradients with central finite differences.

    Each sampled cell is nudged by +/- eps through ``logit_with_activations``
    and the difference quotient of the class logit is compared with the
    gradient from ``activations_with_gradients``.
    """
    layer_id = layer_id or adapter.default_target_layer
    bundle = adapter.activations_with_gradients(img, class_index, layer_id)
    activations = bundle.activations
    rng = np.random.default_rng(seed)
    n_cells = min(n_cells, activations.size)
    cells = rng.choice(activations.size, size=n_cells, replace=False)

    errors = []
    for flat_index in cells:
        idx = np.unravel_index(int(flat_index), activations.shape)
        plus = activations.copy()
        plus[idx] += eps
        minus = activations.copy()
        minus[idx] -= eps
        numeric = (
            adapter.logit_with_activations(img, class_index, layer_id, plus)
            - adapter.logit_with_activations(img, class_index, layer_id, minus)
        ) / (2.0 * eps)
        analytic = float(bundle.gradients[idx])
        scale = max(abs(numeric), abs(analytic))
        # both sides vanish: nothing to compare
        errors.append(0.0 if scale < 1e-12 else abs(numeric - analytic) / scale)

    errors_arr = np.asarray(errors)
    report = GradientCheckReport(
        layer_id=layer_id,
        n_cells=n_cells,
        eps=eps,
        pass_fraction=float(np.mean(errors_arr <= tolerance)),
        max_relative_error=float(errors_arr.max()),
    )
    logger.info(
        "gradient_check_done",
        layer_id=layer_id,
        pass_fraction=report.pass_fraction,
        max_relative_error=report.max_relative_error,
    )
    return report
