"""adv-train: adversarial fine-tuning of the clean-trained ensemble."""

import logging
import time

from analytics.charts import chart_training_trace
from cli.commands.common import (
    RunContext,
    checkpoint_path,
    head_path,
    load_ensemble,
    load_run_dataset,
    write_ensemble_config,
)
from ml.adversarial_training import adv_train
from ml.report_export import write_csv
from models.checkpoint import save_model

logger = logging.getLogger(__name__)


def cmd_adv_train(ctx: RunContext) -> None:
    ds = load_run_dataset(ctx)
    clean = load_ensemble(ctx, "train")
    config = ctx.config.adv_train.model_copy(update={"workers": ctx.workers})

    started = time.perf_counter()
    result = adv_train(clean.members, clean.fusion, ds, config, seed=ctx.seed, head=clean.head)
    ctx.mark("adv_train", started)

    ensemble = result.ensemble
    for member in ensemble.members:
        ctx.record(save_model(member, checkpoint_path(ctx, member.name, "adv-train")))
    if ensemble.head is not None:
        ctx.record(ensemble.save_head(head_path(ctx, "adv-train")))
    write_ensemble_config(ctx, ensemble)

    trace = result.trace()
    ctx.record(write_csv(trace, ctx.path("trace.csv")), volatile=True)
    if ctx.config.metrics.plots:
        ctx.record(chart_training_trace(trace, ctx.path("figures", "trace.png")), volatile=True)
    last = trace.groupby("model", sort=False).tail(1)
    for _, row in last.iterrows():
        logger.info(f"{row['model']}: final clean acc {row['clean_acc']:.3f}, robust acc {row['robust_acc']:.3f}")
