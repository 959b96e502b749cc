import math
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import integrate, stats

from ..errors import InvalidArgumentError, InvariantViolationError
from ..imgproc import gaussian_blur2d
from ..models import (
    DEFAULT_STEP_FRACTION,
    AblationRow,
    BoundingBox,
    CurveResult,
    CurveRow,
    EvaluationResult,
    FixtureSample,
    GroupCamConfig,
    MetricKind,
    PointingResult,
    RandomizationMode,
    SaliencyMap,
    SaliencyMethod,
    SanityLayerScore,
    SanityReport,
)
from .model_adapter import ModelAdapter
from .saliency import explain

logger = structlog.get_logger(__name__)

MapLike = Union[SaliencyMap, np.ndarray]
Annotations = Dict[str, Sequence[Tuple[str, BoundingBox]]]


def _map_data(saliency: MapLike) -> np.ndarray:
    data = saliency.data if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if data.ndim != 2:
        raise InvalidArgumentError(f"saliency must be H x W, got {data.shape}")
    return np.asarray(data, dtype=np.float64)


def num_steps(step_fraction: float) -> int:
    """ceil(1 / step_fraction), tolerant of representation error in the fraction"""
    if not 0.0 < step_fraction <= 1.0:
        raise InvalidArgumentError(f"step_fraction must lie in (0, 1], got {step_fraction}")
    return max(1, math.ceil(1.0 / step_fraction - 1e-9))


def pixel_order(saliency: MapLike) -> np.ndarray:
    """Flat pixel indices by descending saliency; ties keep row-major order"""
    return np.argsort(-_map_data(saliency).ravel(), kind="stable")


def _perturbation_curve(
    adapter: ModelAdapter,
    start: np.ndarray,
    end: np.ndarray,
    order: np.ndarray,
    class_index: int,
    step_fraction: float,
) -> CurveResult:
    n = order.size
    steps = num_steps(step_fraction)
    counts = [0]
    for k in range(1, steps + 1):
        counts.append(n if k == steps else min(n, int(math.floor(k * step_fraction * n + 0.5))))

    current = start.reshape(start.shape[0], -1).copy()
    source = end.reshape(end.shape[0], -1)
    scores = [float(adapter.class_scores([current.reshape(start.shape)])[0, class_index])]
    for k in range(1, steps + 1):
        batch = order[counts[k - 1] : counts[k]]
        current[:, batch] = source[:, batch]
        scores.append(float(adapter.class_scores([current.reshape(start.shape)])[0, class_index]))

    fractions = [c / n for c in counts]
    auc = float(integrate.trapezoid(scores, fractions))
    return CurveResult(fractions=fractions, scores=scores, auc=auc)


def _curve_inputs(
    adapter: ModelAdapter, img: np.ndarray, saliency: MapLike, class_index: int
) -> Tuple[np.ndarray, np.ndarray]:
    image = adapter.check_image(img)
    adapter.check_class(class_index)
    order_map = _map_data(saliency)
    if order_map.shape != image.shape[1:]:
        raise InvalidArgumentError(
            f"saliency {order_map.shape} does not match image {image.shape[1:]}"
        )
    return image, pixel_order(order_map)


def deletion_curve(
    adapter: ModelAdapter,
    img: np.ndarray,
    saliency: MapLike,
    class_index: int,
    step_fraction: float = DEFAULT_STEP_FRACTION,
    ksize: int = 51,
    sigma: float = 50.0,
) -> CurveResult:
    """Replace the most salient pixels of the original with its blurred copy, step by step"""
    image, order = _curve_inputs(adapter, img, saliency, class_index)
    blurred = gaussian_blur2d(image, ksize, sigma)
    return _perturbation_curve(adapter, image, blurred, order, class_index, step_fraction)


def insertion_curve(
    adapter: ModelAdapter,
    img: np.ndarray,
    saliency: MapLike,
    class_index: int,
    step_fraction: float = DEFAULT_STEP_FRACTION,
    ksize: int = 51,
    sigma: float = 50.0,
) -> CurveResult:
    """Restore the most salient original pixels into the blurred copy, step by step"""
    image, order = _curve_inputs(adapter, img, saliency, class_index)
    blurred = gaussian_blur2d(image, ksize, sigma)
    return _perturbation_curve(adapter, blurred, image, order, class_index, step_fraction)


def overall_score(insertion_auc: float, deletion_auc: float) -> float:
    return insertion_auc - deletion_auc


def most_salient_pixel(saliency: MapLike) -> Tuple[int, int]:
    """(x, y) of the maximum; ties resolve to the smallest row-major index"""
    data = _map_data(saliency)
    y, x = divmod(int(np.argmax(data)), data.shape[1])
    return x, y


def pointing_game(
    saliency: MapLike, bboxes: Sequence[Tuple[str, BoundingBox]]
) -> PointingResult:
    """
    One hit or miss per category: a hit when the most salient pixel lies in
    the union of that category's boxes.
    """
    if not bboxes:
        raise InvalidArgumentError("pointing game needs at least one bounding box")
    data = _map_data(saliency)
    height, width = data.shape
    px, py = most_salient_pixel(data)

    by_category: Dict[str, List[BoundingBox]] = {}
    for category, box in bboxes:
        if box.x + box.w > width or box.y + box.h > height:
            raise InvalidArgumentError(f"box {box.as_list()} exceeds the {width}x{height} map")
        by_category.setdefault(category, []).append(box)

    result = PointingResult()
    for category, boxes in by_category.items():
        result.record(category, any(box.contains(px, py) for box in boxes))
    return result


def spearman_similarity(a: MapLike, b: MapLike) -> float:
    """Spearman rank correlation of two flattened maps"""
    x = _map_data(a).ravel()
    y = _map_data(b).ravel()
    if x.shape != y.shape:
        raise InvalidArgumentError(f"maps differ in size: {x.size} vs {y.size}")
    if np.array_equal(x, y):
        return 1.0
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rho = float(stats.spearmanr(x, y)[0])
    return float(np.clip(rho, -1.0, 1.0))


def sanity_check(
    adapter: ModelAdapter,
    img: np.ndarray,
    class_index: int,
    config: Optional[GroupCamConfig] = None,
    mode: RandomizationMode = RandomizationMode.CASCADE,
    seed: int = 0,
    method: SaliencyMethod = SaliencyMethod.GROUPCAM,
) -> SanityReport:
    """
    Compare saliency of the trained model with saliency under randomised parameters.

    Layers are visited deepest first. Cascade mode keeps every earlier
    randomisation; independent mode randomises one layer of a fresh copy at a
    time. The first entry ("original") is the unrandomised self-comparison.
    """
    config = config or GroupCamConfig()
    mode = RandomizationMode(mode)
    reference = explain(adapter, img, class_index, method, config)
    report = SanityReport(
        mode=mode,
        layers=[SanityLayerScore(layer_id="original", similarity=spearman_similarity(reference, reference))],
    )

    current = adapter
    for step, layer_id in enumerate(reversed(adapter.layer_ids)):
        if mode == RandomizationMode.CASCADE:
            current = current.randomize_parameters(layer_id, seed + step)
            perturbed = current
        else:
            perturbed = adapter.randomize_parameters(layer_id, seed + step)
        randomized = explain(perturbed, img, class_index, method, config)
        report.layers.append(
            SanityLayerScore(layer_id=layer_id, similarity=spearman_similarity(reference, randomized))
        )
        logger.debug("sanity_layer_done", mode=mode.value, layer_id=layer_id)
    return report


def summarize_sanity(reports: Sequence[SanityReport]) -> SanityReport:
    """Average per-layer similarity over images"""
    if not reports:
        raise InvalidArgumentError("no sanity reports to summarise")
    layer_ids = [entry.layer_id for entry in reports[0].layers]
    return SanityReport(
        mode=reports[0].mode,
        layers=[
            SanityLayerScore(
                layer_id=layer_id,
                similarity=float(np.mean([r.layers[i].similarity for r in reports])),
            )
            for i, layer_id in enumerate(layer_ids)
        ],
    )


def summarize_curves(rows: Sequence[CurveRow]) -> Dict[str, float]:
    if not rows:
        return {"insertion_auc": 0.0, "deletion_auc": 0.0, "overall": 0.0}
    insertion = float(np.mean([r.insertion_auc for r in rows]))
    deletion = float(np.mean([r.deletion_auc for r in rows]))
    return {
        "insertion_auc": insertion,
        "deletion_auc": deletion,
        "overall": overall_score(insertion, deletion),
    }


def evaluate_curves(
    adapter: ModelAdapter,
    sample: FixtureSample,
    saliency: SaliencyMap,
    step_fraction: float,
    config: GroupCamConfig,
) -> CurveRow:
    deletion = deletion_curve(
        adapter, sample.image, saliency, sample.label, step_fraction, config.ksize, config.sigma
    )
    insertion = insertion_curve(
        adapter, sample.image, saliency, sample.label, step_fraction, config.ksize, config.sigma
    )
    if insertion.scores[-1] != deletion.scores[0] or insertion.scores[0] != deletion.scores[-1]:
        raise InvariantViolationError(f"curve endpoints disagree for sample {sample.sample_id}")
    return CurveRow(
        image_id=sample.sample_id,
        method=saliency.method,
        insertion_auc=insertion.auc,
        deletion_auc=deletion.auc,
        overall=overall_score(insertion.auc, deletion.auc),
    )


class DatasetEvaluator:
    """
    Runs the selected metrics over a sample set.

    With ``jobs > 1`` samples are spread over a thread pool; every worker
    thread lazily clones its own adapter. Results come back in sample order.
    Pointing uses ``annotations`` when given (image id to category boxes),
    otherwise the bounding box carried by each sample.
    """

    def __init__(
        self,
        adapter: ModelAdapter,
        method: SaliencyMethod = SaliencyMethod.GROUPCAM,
        config: Optional[GroupCamConfig] = None,
        metrics: Iterable[MetricKind] = (MetricKind.AUC, MetricKind.POINTING),
        step_fraction: float = DEFAULT_STEP_FRACTION,
        jobs: int = 1,
        seed: int = 0,
        sanity_images: int = 20,
        annotations: Optional[Annotations] = None,
    ):
        self.adapter = adapter
        self.method = SaliencyMethod(method)
        self.config = config or GroupCamConfig()
        self.metrics = {MetricKind(m) for m in metrics}
        self.step_fraction = step_fraction
        self.jobs = max(1, jobs)
        self.seed = seed
        self.sanity_images = sanity_images
        self.annotations = annotations
        self._local = threading.local()
        num_steps(step_fraction)

    def _worker_adapter(self) -> ModelAdapter:
        if self.jobs == 1:
            return self.adapter
        if not hasattr(self._local, "adapter"):
            self._local.adapter = self.adapter.clone()
        return self._local.adapter

    def boxes_for(self, sample: FixtureSample) -> List[Tuple[str, BoundingBox]]:
        if self.annotations is None:
            return [(sample.category, sample.bbox)]
        if sample.sample_id not in self.annotations:
            raise InvalidArgumentError(f"no annotations for image {sample.sample_id!r}")
        return list(self.annotations[sample.sample_id])

    def evaluate_sample(self, position: int, sample: FixtureSample):
        adapter = self._worker_adapter()
        row, pointing, sanity = None, None, {}

        if self.metrics & {MetricKind.AUC, MetricKind.POINTING}:
            saliency = explain(adapter, sample.image, sample.label, self.method, self.config)
            if MetricKind.AUC in self.metrics:
                row = evaluate_curves(adapter, sample, saliency, self.step_fraction, self.config)
            if MetricKind.POINTING in self.metrics:
                pointing = pointing_game(saliency, self.boxes_for(sample))

        if MetricKind.SANITY in self.metrics and position < self.sanity_images:
            for mode in RandomizationMode:
                sanity[mode.value] = sanity_check(
                    adapter, sample.image, sample.label, self.config, mode, self.seed, self.method
                )
        logger.debug("sample_evaluated", sample_id=sample.sample_id)
        return row, pointing, sanity

    def run(self, samples: Sequence[FixtureSample]) -> EvaluationResult:
        if not samples:
            raise InvalidArgumentError("no samples to evaluate")
        if MetricKind.POINTING in self.metrics:
            for sample in samples:
                self.boxes_for(sample)
        if self.jobs == 1:
            outcomes = [self.evaluate_sample(i, s) for i, s in enumerate(samples)]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                outcomes = list(pool.map(self.evaluate_sample, range(len(samples)), samples))

        result = EvaluationResult()
        sanity_by_mode: Dict[str, List[SanityReport]] = {}
        for row, pointing, sanity in outcomes:
            if row is not None:
                result.rows.append(row)
            if pointing is not None:
                result.pointing = pointing if result.pointing is None else result.pointing.merge(pointing)
            for mode, report in sanity.items():
                sanity_by_mode.setdefault(mode, []).append(report)
        result.sanity = {mode: summarize_sanity(reports) for mode, reports in sanity_by_mode.items()}

        logger.info(
            "dataset_evaluated",
            method=self.method.value,
            samples=len(samples),
            **summarize_curves(result.rows),
            pointing_accuracy=result.pointing.mean_accuracy if result.pointing else None,
        )
        return result


def evaluate_dataset(
    adapter: ModelAdapter,
    samples: Sequence[FixtureSample],
    method: SaliencyMethod = SaliencyMethod.GROUPCAM,
    config: Optional[GroupCamConfig] = None,
    metrics: Iterable[MetricKind] = (MetricKind.AUC, MetricKind.POINTING),
    step_fraction: float = DEFAULT_STEP_FRACTION,
    jobs: int = 1,
    seed: int = 0,
    annotations: Optional[Annotations] = None,
) -> EvaluationResult:
    evaluator = DatasetEvaluator(
        adapter, method, config, metrics, step_fraction, jobs, seed, annotations=annotations
    )
    return evaluator.run(samples)


def ablation_sweep(
    adapter: ModelAdapter,
    samples: Sequence[FixtureSample],
    groups: Sequence[int],
    thetas: Sequence[float],
    base_config: Optional[GroupCamConfig] = None,
    step_fraction: float = DEFAULT_STEP_FRACTION,
) -> List[AblationRow]:
    """Mean insertion, deletion and over-all AUC of Group-CAM for every (G, theta) pair"""
    base_config = base_config or GroupCamConfig()
    if not samples:
        raise InvalidArgumentError("no samples for the ablation sweep")
    num_channels = adapter.layer_channels(base_config.layer_id)
    for g in groups:
        if not 1 <= g <= num_channels:
            raise InvalidArgumentError(f"G={g} outside [1, {num_channels}]")

    rows: List[AblationRow] = []
    for g in sorted(groups):
        for theta in sorted(thetas):
            config = base_config.model_copy(update={"groups": g, "theta": theta})
            curve_rows = [
                evaluate_curves(
                    adapter,
                    s,
                    explain(adapter, s.image, s.label, SaliencyMethod.GROUPCAM, config),
                    step_fraction,
                    config,
                )
                for s in samples
            ]
            summary = summarize_curves(curve_rows)
            rows.append(AblationRow(groups=g, theta=theta, **summary))
            logger.info("ablation_point_done", groups=g, theta=theta, overall=summary["overall"])
    return rows
