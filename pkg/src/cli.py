"""
Command-line entry point: fixtures, explanations, evaluation, fine-tuning
and the G/theta ablation.

Run with ``python -m src.cli --help``.
"""
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import structlog
import torch
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from .config import Settings, load_config_file, resolve_run_config
from .errors import GroupCamError, InvalidArgumentError
from .imgproc import colormap_overlay
from .logging_config import configure_logging
from .models import (
    FixtureDatasetSpec,
    MetricKind,
    RunConfig,
    SaliencyMethod,
)
from .services import persistence
from .services.evaluation import ablation_sweep, evaluate_dataset, summarize_curves
from .services.finetune import FINETUNE_LEARNING_RATE, FinetuneRunner, split_held_out
from .services.fixtures import FIXTURE_EPOCHS, FixtureTrainer, generate_fixture_dataset, held_out_spec
from .services.model_adapter import ModelAdapter
from .services.saliency import grad_cam, group_cam

logger = structlog.get_logger(__name__)

app = typer.Typer(add_completion=False, help="Group-CAM saliency toolkit")
console = Console()
err_console = Console(stderr=True)

HELD_OUT_SIZE = 200
CURVE_COLUMNS = ["image_id", "method", "insertion_auc", "deletion_auc", "overall"]
POINTING_COLUMNS = ["category", "hits", "misses", "accuracy"]
FINETUNE_COLUMNS = [
    "epoch",
    "augmented_accuracy",
    "control_accuracy",
    "augmented_loss",
    "control_loss",
    "mask_change",
]
ABLATION_COLUMNS = ["groups", "theta", "insertion_auc", "deletion_auc", "overall"]


@app.callback()
def main() -> None:
    settings = Settings.from_env()
    configure_logging(settings.log_level, settings.log_json)
    if settings.torch_threads > 0:
        torch.set_num_threads(settings.torch_threads)


@contextmanager
def handle_errors(command: str) -> Iterator[None]:
    """Turn library and I/O failures into a message and exit status 1"""
    try:
        yield
    except (GroupCamError, OSError, ValidationError) as e:
        logger.error("command_failed", command=command, error=str(e))
        err_console.print(f"[red]error:[/red] {e}")
        raise typer.Exit(code=1)


def parse_list(raw: Optional[str], cast) -> Optional[List[Any]]:
    if raw is None:
        return None
    try:
        return [cast(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise InvalidArgumentError(f"cannot parse list {raw!r}: {e}") from e


def parse_metrics(raw: Optional[str]) -> Optional[List[MetricKind]]:
    if raw is None:
        return None
    names = parse_list(raw, str)
    valid = {m.value for m in MetricKind}
    unknown = [n for n in names if n not in valid]
    if unknown:
        raise InvalidArgumentError(f"unknown metrics {unknown}; choose from {sorted(valid)}")
    return [MetricKind(n) for n in names]


def resolve(command: str, config_path: Optional[Path], flags: Dict[str, Any]) -> RunConfig:
    return resolve_run_config(command, load_config_file(config_path), flags)


def run_dir(out: Optional[Path], command: str) -> Path:
    return out if out is not None else Path(Settings.from_env().output_dir) / command


def write_run_config(out_dir: Path, cfg: RunConfig) -> None:
    persistence.write_json(out_dir / "config.json", cfg)


def load_model(cfg: RunConfig) -> ModelAdapter:
    adapter = persistence.load_checkpoint(cfg.paths["model"])
    logger.info("model_loaded", path=cfg.paths["model"], layers=list(adapter.layer_ids))
    return adapter


@app.command("make-fixtures")
def make_fixtures(
    seed: Optional[int] = typer.Option(None, "--seed", help="Dataset and training seed"),
    n: Optional[int] = typer.Option(None, "--n", help="Number of training images"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Training epochs for the fixture model"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults under GROUPCAM_OUTPUT_DIR"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run config"),
):
    """Render the shape dataset, train the fixture classifier and save both."""
    out = run_dir(out, "make-fixtures")
    with handle_errors("make-fixtures"):
        file_values = load_config_file(config)
        if epochs is None:
            epochs = file_values.get("epochs", FIXTURE_EPOCHS)
        cfg = resolve_run_config("make-fixtures", file_values, {"seed": seed, "n": n, "epochs": epochs})
        cfg.paths["out"] = str(out)
        spec = FixtureDatasetSpec(seed=cfg.seed)
        dataset = generate_fixture_dataset(spec, cfg.n)
        held_out = generate_fixture_dataset(held_out_spec(spec, cfg.n), HELD_OUT_SIZE)

        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out, cfg)
        persistence.save_fixture_dataset(dataset, out / "dataset")
        persistence.save_fixture_dataset(held_out, out / "heldout")

        trainer = FixtureTrainer(epochs=cfg.epochs, seed=cfg.seed)
        try:
            adapter = trainer.fit(dataset, held_out, spec=spec)
        finally:
            if trainer.report is not None:
                persistence.write_json(out / "training_report.json", trainer.report)
        persistence.save_checkpoint(adapter, out / "model.pt")

    console.print(
        f"wrote {len(dataset)} training and {len(held_out)} held-out images to {out}; "
        f"held-out accuracy {trainer.report.held_out_accuracy:.4f}"
    )


@app.command("explain")
def explain_cmd(
    model: Path = typer.Option(..., "--model", help="Fixture model checkpoint"),
    image: Path = typer.Option(..., "--image", help="Input PNG"),
    class_index: Optional[int] = typer.Option(None, "--class", help="Class to explain; argmax if omitted"),
    method: Optional[SaliencyMethod] = typer.Option(None, "--method", help="groupcam or gradcam"),
    groups: Optional[int] = typer.Option(None, "--groups", help="Number of channel groups G"),
    theta: Optional[float] = typer.Option(None, "--theta", help="De-noise percentile"),
    ksize: Optional[int] = typer.Option(None, "--ksize", help="Blur kernel size (odd)"),
    sigma: Optional[float] = typer.Option(None, "--sigma", help="Blur sigma"),
    layer: Optional[str] = typer.Option(None, "--layer", help="Target layer id"),
    no_denoise: bool = typer.Option(False, "--no-denoise", help="Skip the percentile de-noise"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="Overlay opacity"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults under GROUPCAM_OUTPUT_DIR"),
    verbose: bool = typer.Option(False, "--verbose", help="Debug logs and the per-group gain table"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run config"),
):
    """Write the saliency grid, a grey PNG and a colour overlay for one image."""
    if verbose:
        configure_logging("DEBUG", Settings.from_env().log_json)
    out = run_dir(out, "explain")
    with handle_errors("explain"):
        cfg = resolve(
            "explain",
            config,
            {
                "method": method,
                "groups": groups,
                "theta": theta,
                "ksize": ksize,
                "sigma": sigma,
                "layer_id": layer,
                "denoise": False if no_denoise else None,
                "seed": seed,
                "alpha": alpha,
                "class_index": class_index,
                "paths": {"model": str(model), "image": str(image), "out": str(out)},
            },
        )
        torch.manual_seed(cfg.seed)
        adapter = load_model(cfg)
        img = adapter.check_image(persistence.load_image_png(image))
        target = cfg.class_index
        if target is None:
            target = int(np.argmax(adapter.class_scores([img])[0]))
            logger.info("class_from_prediction", class_index=target)
        target = adapter.check_class(target)

        scores = []
        if cfg.method == SaliencyMethod.GRADCAM:
            saliency = grad_cam(adapter, img, target, cfg.groupcam.layer_id)
        else:
            saliency, scores = group_cam(adapter, img, target, cfg.groupcam)

        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out, cfg)
        persistence.save_saliency(out / "saliency.bin", saliency, cfg.groupcam.model_dump(mode="json"))
        persistence.save_png_gray(out / "saliency.png", saliency.data)
        persistence.save_png_rgb(out / "overlay.png", colormap_overlay(img, saliency.data, cfg.alpha))

    if verbose and scores:
        table = Table(title=f"group gains for class {target}")
        table.add_column("group", justify="right")
        table.add_column("alpha", justify="right")
        for score in scores:
            table.add_row(str(score.group_index), f"{score.alpha:.6g}")
        console.print(table)
    console.print(f"{cfg.method.value} saliency for class {target} written to {out}")


@app.command("evaluate")
def evaluate_cmd(
    model: Path = typer.Option(..., "--model", help="Fixture model checkpoint"),
    dataset: Path = typer.Option(..., "--dataset", help="Fixture-format dataset directory"),
    annotations: Optional[Path] = typer.Option(
        None, "--annotations", help="Fixture index or COCO-subset JSON; defaults to the dataset index"
    ),
    method: Optional[SaliencyMethod] = typer.Option(None, "--method"),
    metrics: Optional[str] = typer.Option(None, "--metrics", help="Comma list of auc, pointing, sanity"),
    step_fraction: Optional[float] = typer.Option(None, "--step-fraction"),
    groups: Optional[int] = typer.Option(None, "--groups"),
    theta: Optional[float] = typer.Option(None, "--theta"),
    ksize: Optional[int] = typer.Option(None, "--ksize"),
    sigma: Optional[float] = typer.Option(None, "--sigma"),
    layer: Optional[str] = typer.Option(None, "--layer"),
    no_denoise: bool = typer.Option(False, "--no-denoise"),
    jobs: Optional[int] = typer.Option(None, "--jobs", help="Parallel workers"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults under GROUPCAM_OUTPUT_DIR"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run config"),
):
    """Deletion/insertion AUC, pointing game and sanity check over a dataset."""
    out = run_dir(out, "evaluate")
    with handle_errors("evaluate"):
        cfg = resolve(
            "evaluate",
            config,
            {
                "method": method,
                "metrics": parse_metrics(metrics),
                "step_fraction": step_fraction,
                "groups": groups,
                "theta": theta,
                "ksize": ksize,
                "sigma": sigma,
                "layer_id": layer,
                "denoise": False if no_denoise else None,
                "jobs": jobs,
                "seed": seed,
                "paths": {"model": str(model), "dataset": str(dataset), "out": str(out)},
            },
        )
        adapter = load_model(cfg)
        samples = persistence.load_fixture_dataset(dataset)
        boxes = None
        if MetricKind.POINTING in cfg.metrics:
            annotation_path = annotations or dataset / "index.json"
            if not annotation_path.exists():
                raise InvalidArgumentError(f"pointing needs annotations, {annotation_path} not found")
            boxes = persistence.load_annotations(annotation_path)

        result = evaluate_dataset(
            adapter,
            samples,
            cfg.method,
            cfg.groupcam,
            cfg.metrics,
            cfg.step_fraction,
            cfg.jobs,
            cfg.seed,
            annotations=boxes,
        )

        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out, cfg)
        summary: Dict[str, Any] = {"method": cfg.method.value, "images": len(samples)}
        if MetricKind.AUC in cfg.metrics:
            persistence.write_csv(out / "metrics.csv", result.rows, CURVE_COLUMNS)
            summary.update(summarize_curves(result.rows))
        if result.pointing is not None:
            pointing_rows = [
                {
                    "category": c,
                    "hits": result.pointing.hits.get(c, 0),
                    "misses": result.pointing.misses.get(c, 0),
                    "accuracy": result.pointing.accuracy(c),
                }
                for c in result.pointing.categories
            ]
            pointing_rows.append(
                {
                    "category": "mean",
                    "hits": sum(result.pointing.hits.values()),
                    "misses": sum(result.pointing.misses.values()),
                    "accuracy": result.pointing.mean_accuracy,
                }
            )
            persistence.write_csv(out / "pointing.csv", pointing_rows, POINTING_COLUMNS)
            summary["pointing_accuracy"] = result.pointing.mean_accuracy
        if result.sanity:
            persistence.write_json(
                out / "sanity.json",
                {mode: report.model_dump(mode="json") for mode, report in result.sanity.items()},
            )
        persistence.write_json(out / "summary.json", summary)

    table = Table(title=f"{cfg.method.value} over {len(samples)} images")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key in ("insertion_auc", "deletion_auc", "overall", "pointing_accuracy"):
        if key in summary:
            table.add_row(key, f"{summary[key]:.4f}")
    console.print(table)


@app.command("finetune")
def finetune_cmd(
    model: Path = typer.Option(..., "--model", help="Fixture model checkpoint"),
    dataset: Path = typer.Option(..., "--dataset", help="Fixture-format training set"),
    held_out: Optional[Path] = typer.Option(
        None, "--held-out", help="Held-out set; the last fifth of --dataset if omitted"
    ),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    groups: Optional[int] = typer.Option(None, "--groups", help="Groups for the augmentation masks"),
    learning_rate: Optional[float] = typer.Option(None, "--learning-rate", help="SGD step size, 1e-3 if unset"),
    momentum: Optional[float] = typer.Option(None, "--momentum"),
    weight_decay: Optional[float] = typer.Option(None, "--weight-decay"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    render_epochs: bool = typer.Option(False, "--render-epochs", help="Write a saliency overlay per epoch"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults under GROUPCAM_OUTPUT_DIR"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run config"),
):
    """Paired control/augmented fine-tune of a fixture model."""
    out = run_dir(out, "finetune")
    with handle_errors("finetune"):
        flags: Dict[str, Any] = {
            "epochs": epochs,
            "seed": seed,
            "paths": {"model": str(model), "dataset": str(dataset), "out": str(out)},
            "extra": {
                k: v
                for k, v in {
                    "learning_rate": learning_rate,
                    "momentum": momentum,
                    "weight_decay": weight_decay,
                }.items()
                if v is not None
            },
        }
        if groups is not None:
            flags["augment"] = {"groups": groups}
        cfg = resolve("finetune", config, flags)
        adapter = load_model(cfg)
        samples = persistence.load_fixture_dataset(dataset)
        if held_out is not None:
            train, evaluation_set = samples, persistence.load_fixture_dataset(held_out)
        else:
            train, evaluation_set = split_held_out(samples)

        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out, cfg)

        def render(epoch: int, current: ModelAdapter) -> None:
            shown = evaluation_set[0]
            saliency, _ = group_cam(current, shown.image, shown.label, cfg.groupcam)
            persistence.save_png_rgb(
                out / "epochs" / f"epoch_{epoch:03d}.png",
                colormap_overlay(shown.image, saliency.data, cfg.alpha),
            )

        runner = FinetuneRunner(
            adapter,
            train,
            evaluation_set,
            epochs=cfg.epochs,
            seed=cfg.seed,
            config=cfg.augment,
            learning_rate=float(cfg.extra.get("learning_rate", FINETUNE_LEARNING_RATE)),
            momentum=float(cfg.extra.get("momentum", 0.0)),
            weight_decay=float(cfg.extra.get("weight_decay", 0.0)),
        )
        report = runner.run(on_epoch_end=render if render_epochs else None)

        persistence.write_json(out / "finetune_report.json", report)
        curve_rows = [
            {
                "epoch": a.epoch,
                "augmented_accuracy": a.accuracy,
                "control_accuracy": c.accuracy,
                "augmented_loss": a.train_loss,
                "control_loss": c.train_loss,
                "mask_change": report.mask_change[a.epoch - 1] if a.epoch > 0 else 0.0,
            }
            for a, c in zip(report.augmented, report.control)
        ]
        persistence.write_csv(out / "finetune_curves.csv", curve_rows, FINETUNE_COLUMNS)
        if runner.augmented_adapter is not None:
            persistence.save_checkpoint(runner.augmented_adapter, out / "augmented.pt")
            persistence.save_checkpoint(runner.control_adapter, out / "control.pt")

    console.print(
        f"augmented {report.augmented[-1].accuracy:.4f} vs control {report.control[-1].accuracy:.4f} "
        f"after {report.epochs} epochs"
    )


@app.command("ablate")
def ablate_cmd(
    model: Path = typer.Option(..., "--model", help="Fixture model checkpoint"),
    dataset: Path = typer.Option(..., "--dataset", help="Fixture-format dataset directory"),
    groups_list: str = typer.Option("1,4,8,16,32", "--groups-list", help="Comma list of G values"),
    thetas: str = typer.Option("0,30,50,70,90", "--thetas", help="Comma list of percentiles"),
    step_fraction: Optional[float] = typer.Option(None, "--step-fraction"),
    limit: Optional[int] = typer.Option(None, "--limit", min=1, help="Use the first N images"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults under GROUPCAM_OUTPUT_DIR"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON run config"),
):
    """Mean AUC scores of Group-CAM across a grid of G and theta."""
    out = run_dir(out, "ablate")
    with handle_errors("ablate"):
        g_values = parse_list(groups_list, int)
        theta_values = parse_list(thetas, float)
        cfg = resolve(
            "ablate",
            config,
            {
                "step_fraction": step_fraction,
                "paths": {"model": str(model), "dataset": str(dataset), "out": str(out)},
                "extra": {"groups_list": g_values, "thetas": theta_values, "limit": limit},
            },
        )
        adapter = load_model(cfg)
        samples = persistence.load_fixture_dataset(dataset)
        if limit is not None:
            samples = samples[:limit]
        rows = ablation_sweep(adapter, samples, g_values, theta_values, cfg.groupcam, cfg.step_fraction)

        out.mkdir(parents=True, exist_ok=True)
        write_run_config(out, cfg)
        persistence.write_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)

    table = Table(title=f"ablation over {len(samples)} images")
    for column in ABLATION_COLUMNS:
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(
            str(row.groups),
            f"{row.theta:g}",
            f"{row.insertion_auc:.4f}",
            f"{row.deletion_auc:.4f}",
            f"{row.overall:.4f}",
        )
    console.print(table)


if __name__ == "__main__":
    app()
