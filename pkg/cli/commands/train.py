"""train: clean training of every configured detector, then the fusion head."""

import logging
import time

import numpy as np

from cli.commands.common import (
    RunContext,
    build_model,
    checkpoint_path,
    head_path,
    load_run_dataset,
    write_ensemble_config,
)
from fusion.ensemble import Ensemble
from ml.report_export import write_csv
from ml.training import train_model
from models.checkpoint import save_model

logger = logging.getLogger(__name__)


def cmd_train(ctx: RunContext) -> None:
    ds = load_run_dataset(ctx)
    images, labels = ds.subset("train")
    val_x, val_y = ds.subset("val")

    def val_accuracy(model, epoch: int):
        if len(val_x) == 0:
            return {}
        return {"val_acc": float(np.mean(model.predict(val_x) == val_y))}

    trained = {}
    for entry in ctx.config.models:
        started = time.perf_counter()
        model = build_model(entry, ctx.seed)
        result = train_model(model, images, labels, entry.train, seed=ctx.seed, epoch_hook=val_accuracy)
        ctx.record(save_model(model, checkpoint_path(ctx, entry.name)))
        ctx.record(write_csv(result.to_frame(), ctx.path("traces", f"{entry.name}.csv")), volatile=True)
        ctx.mark(f"train:{entry.name}", started)
        trained[entry.name] = model

    members = [trained[e.name] for e in ctx.config.members]
    ensemble = Ensemble(members, ctx.config.fusion, name="ensemble")
    if ensemble.head is not None:
        started = time.perf_counter()
        fit_x, fit_y = ds.labeled_split("val")
        ensemble.fit_head(fit_x, fit_y, seed=ctx.seed)
        ctx.record(ensemble.save_head(head_path(ctx)))
        ctx.mark("fusion_head", started)
    write_ensemble_config(ctx, ensemble)
    logger.info(f"Trained {list(trained)}; ensemble {ensemble.member_names} with {ctx.config.fusion.strategy}")
