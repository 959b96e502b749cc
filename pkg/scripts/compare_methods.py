"""
Train the fixture classifier and compare Group-CAM with Grad-CAM on the
held-out set. Writes comparison.json under GROUPCAM_OUTPUT_DIR.

    python scripts/compare_methods.py [seed]
"""
import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

import structlog

from src.config import Settings
from src.logging_config import configure_logging
from src.models import FixtureDatasetSpec, MetricKind, SaliencyMethod
from src.services import persistence
from src.services.evaluation import evaluate_dataset, summarize_curves
from src.services.fixtures import generate_fixture_dataset, held_out_spec, train_fixture_model

logger = structlog.get_logger(__name__)


def main(seed: int = 0) -> None:
    settings = Settings.from_env()
    configure_logging(settings.log_level, settings.log_json)

    spec = FixtureDatasetSpec(seed=seed)
    dataset = generate_fixture_dataset(spec, 800)
    held_out = generate_fixture_dataset(held_out_spec(spec, 800), 200)
    adapter = train_fixture_model(dataset, seed=seed, held_out=held_out, spec=spec)

    comparison = {}
    for method in SaliencyMethod:
        result = evaluate_dataset(
            adapter, held_out, method, metrics=[MetricKind.AUC, MetricKind.POINTING], seed=seed
        )
        comparison[method.value] = {
            **summarize_curves(result.rows),
            "pointing_accuracy": result.pointing.mean_accuracy,
        }
        logger.info("method_compared", method=method.value, **comparison[method.value])

    out = Path(settings.output_dir) / "compare"
    persistence.write_json(out / "comparison.json", comparison)
    print(f"wrote {out / 'comparison.json'}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
