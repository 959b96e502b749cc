from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..errors import InvalidArgumentError
from ..imgproc import bilinear_upsample, blend, denoise, gaussian_blur2d, minmax_normalize
from ..models import ActivationBundle, GroupCamConfig, GroupScore, SaliencyMap, SaliencyMethod
from .model_adapter import ModelAdapter

logger = structlog.get_logger(__name__)


def importance_weights(bundle: ActivationBundle) -> np.ndarray:
    """Global average pool of the gradients, one weight per channel"""
    return bundle.gradients.sum(axis=(1, 2)) / bundle.z


def channel_groups(num_channels: int, groups: int) -> List[slice]:
    """
    Contiguous channel blocks of size K // G; the remainder joins the last block.
    """
    if not 1 <= groups <= num_channels:
        raise InvalidArgumentError(
            f"number of groups must lie in [1, {num_channels}], got {groups}"
        )
    size = num_channels // groups
    blocks = [slice(g * size, (g + 1) * size) for g in range(groups - 1)]
    blocks.append(slice((groups - 1) * size, num_channels))
    return blocks


def grouped_masks(activations: np.ndarray, weights: np.ndarray, groups: int) -> List[np.ndarray]:
    """ReLU of the weighted channel sum inside each group"""
    acts = np.asarray(activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if acts.ndim != 3 or w.shape != (acts.shape[0],):
        raise InvalidArgumentError(
            f"activations {acts.shape} and weights {w.shape} do not line up"
        )
    return [
        np.maximum(np.tensordot(w[block], acts[block], axes=1), 0.0)
        for block in channel_groups(acts.shape[0], groups)
    ]


def score_masks(
    adapter: ModelAdapter,
    original: np.ndarray,
    baseline: np.ndarray,
    masks: Sequence[np.ndarray],
    class_index: int,
) -> np.ndarray:
    """
    Confidence gains of every mask against one shared baseline pass.

    Costs len(masks) + 1 queries.
    """
    images = [baseline] + [blend(original, baseline, m) for m in masks]
    scores = adapter.class_scores(images)[:, class_index]
    return scores[1:] - scores[0]


def confidence_gain(
    adapter: ModelAdapter,
    original: np.ndarray,
    baseline: np.ndarray,
    mask: np.ndarray,
    class_index: int,
) -> float:
    """Class probability of the blended image minus that of the baseline"""
    class_index = adapter.check_class(class_index)
    return float(score_masks(adapter, original, baseline, [mask], class_index)[0])


def combine_masks(alphas: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
    """ReLU of the gain-weighted mask sum, min-max normalised"""
    total = np.tensordot(np.asarray(alphas, dtype=np.float64), np.stack(masks), axes=1)
    return minmax_normalize(np.maximum(total, 0.0))


class GroupCAM:
    """
    Grouped, score-weighted class activation mapping.

    One gradient pass gives the target-layer activations and channel
    weights. Channels are split into G groups whose ReLU'd weighted sums
    become initial masks; each mask is de-noised, normalised and upsampled,
    then scored by blending the input with its blurred copy. The final map
    is the gain-weighted sum of the masks. A call costs exactly G + 2
    queries.
    """

    def __init__(self, adapter: ModelAdapter, config: Optional[GroupCamConfig] = None):
        self.adapter = adapter
        self.config = config or GroupCamConfig()

    def prepare_mask(self, mask: np.ndarray, height: int, width: int) -> np.ndarray:
        if self.config.denoise:
            mask = denoise(mask, self.config.theta)
        return bilinear_upsample(minmax_normalize(mask), height, width)

    def explain(self, img: np.ndarray, class_index: int) -> Tuple[SaliencyMap, List[GroupScore]]:
        cfg = self.config
        image = self.adapter.check_image(img)
        class_index = self.adapter.check_class(class_index)
        layer_id = cfg.layer_id or self.adapter.default_target_layer
        height, width = image.shape[1:]

        num_channels = self.adapter.layer_channels(layer_id)
        if cfg.groups > num_channels:
            raise InvalidArgumentError(
                f"G={cfg.groups} exceeds the {num_channels} channels of {layer_id!r}"
            )
        bundle = self.adapter.activations_with_gradients(image, class_index, layer_id)
        weights = importance_weights(bundle)
        masks = [
            self.prepare_mask(m, height, width)
            for m in grouped_masks(bundle.activations, weights, cfg.groups)
        ]

        baseline = gaussian_blur2d(image, cfg.ksize, cfg.sigma)
        alphas = score_masks(self.adapter, image, baseline, masks, class_index)
        data = combine_masks(alphas, masks)

        logger.debug(
            "group_cam_done",
            layer_id=layer_id,
            groups=cfg.groups,
            positive_gains=int(np.sum(alphas > 0)),
        )
        scores = [
            GroupScore(group_index=i, alpha=float(a), mask=m)
            for i, (a, m) in enumerate(zip(alphas, masks))
        ]
        return SaliencyMap(data=data, class_index=class_index, method=SaliencyMethod.GROUPCAM), scores


def group_cam(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    config: Optional[GroupCamConfig] = None,
) -> Tuple[SaliencyMap, List[GroupScore]]:
    return GroupCAM(adapter, config).explain(img, class_index)


def grad_cam(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    layer_id: Optional[str] = None,
) -> SaliencyMap:
    image = adapter.check_image(img)
    bundle = adapter.activations_with_gradients(image, class_index, layer_id)
    cam = np.maximum(np.tensordot(importance_weights(bundle), bundle.activations, axes=1), 0.0)
    data = minmax_normalize(bilinear_upsample(cam, image.shape[1], image.shape[2]))
    return SaliencyMap(data=data, class_index=bundle.class_index, method=SaliencyMethod.GRADCAM)


def finetune_mask(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    groups: int = 16,
    ksize: int = 51,
    sigma: float = 50.0,
    layer_id: Optional[str] = None,
) -> np.ndarray:
    """
    Binary mask for saliency-guided augmentation.

    Channel weights and de-noising are dropped, so activations come from a
    truncated pass with no backward step; the cost is G + 1 queries. The
    combined map is binarised at its mean.
    """
    image = adapter.check_image(img)
    class_index = adapter.check_class(class_index)
    activations = adapter.activations(image, layer_id)
    height, width = image.shape[1:]

    masks = [
        bilinear_upsample(minmax_normalize(m), height, width)
        for m in grouped_masks(activations, np.ones(activations.shape[0]), groups)
    ]
    baseline = gaussian_blur2d(image, ksize, sigma)
    combined = combine_masks(score_masks(adapter, image, baseline, masks, class_index), masks)
    return (combined > combined.mean()).astype(np.float64)


def explain(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    method: SaliencyMethod = SaliencyMethod.GROUPCAM,
    config: Optional[GroupCamConfig] = None,
) -> SaliencyMap:
    config = config or GroupCamConfig()
    if method == SaliencyMethod.GRADCAM:
        return grad_cam(adapter, img, class_index, config.layer_id)
    saliency, _ = group_cam(adapter, img, class_index, config)
    return saliency
