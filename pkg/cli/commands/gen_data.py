"""gen-data: build the synthetic (or image-folder) dataset and write it as MGD1."""

import json
import logging
import time

from cli.commands.common import RunContext, build_dataset, save_run_dataset
from data.dataset import SPLITS, check_provenance

logger = logging.getLogger(__name__)


def cmd_gen_data(ctx: RunContext) -> None:
    started = time.perf_counter()
    ds = build_dataset(ctx)
    if not ctx.config.image_folder:
        check_provenance(ds)
    ctx.mark("generate", started)

    save_run_dataset(ctx, ds)
    summary = {
        "n": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "splits": {split: ds.class_counts(split) for split in SPLITS},
        "source": ctx.config.image_folder or "synthetic",
    }
    path = ctx.path("dataset_summary.json")
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ctx.record(path)
    logger.info(f"Dataset: {len(ds)} images, per split {summary['splits']}")
