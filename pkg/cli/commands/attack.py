"""
attack: craft every configured attack against each ensemble member and
against the whole ensemble, then measure transfer to every detector.

Outputs: attack_log.csv, transfer_matrix.csv, adversarial/<attack>.mgt
"""

import logging
import time

import numpy as np
import pandas as pd

from attacks.attack_log import write_attack_log
from attacks.transfer import craft_from_sources, transfer_logs, transfer_matrix
from cli.commands.common import RunContext, load_ensemble, load_models, load_run_dataset
from engine.checkpoint import save_tensors

logger = logging.getLogger(__name__)


def attack_slug(label: str) -> str:
    return label.replace("@", "_eps").replace("/255", "").replace(".", "p")


def eval_examples(ctx: RunContext, ds):
    ids = ds.indices("test")
    if ctx.config.attack_examples is not None:
        ids = ids[:ctx.config.attack_examples]
    return ids, ds.images[ids], ds.labels[ids]


def cmd_attack(ctx: RunContext) -> None:
    ds = load_run_dataset(ctx)
    ids, images, labels = eval_examples(ctx, ds)
    ensemble = load_ensemble(ctx, "train")
    held_out = load_models(ctx, [m for m in ctx.config.models if m.held_out])

    sources = {m.name: m for m in ensemble.members}
    if len(ensemble.members) > 1:
        sources["ensemble"] = list(ensemble.members)
    targets = {m.name: m for m in ensemble.members}
    targets.update(held_out)
    targets["ensemble"] = ensemble

    logs, matrices = [], []
    for spec in ctx.config.attacks:
        started = time.perf_counter()
        crafted = craft_from_sources(sources, images, labels, spec, ctx.seed, ctx.workers)
        matrix = transfer_matrix(sources, targets, images, labels, spec, ctx.seed,
                                 include_clean=True, crafted=crafted)
        matrix.insert(0, "attack", spec.label())
        matrices.append(matrix.reset_index())
        logs.append(transfer_logs(crafted, spec, ids))

        bundle = {"example_id": ids.astype(np.float64), "label": labels.astype(np.float64)}
        for name, result in crafted.items():
            bundle[f"x_adv:{name}"] = result.x_adv
        ctx.record(save_tensors(ctx.path("adversarial", f"{attack_slug(spec.label())}.mgt"), bundle))
        ctx.mark(f"attack:{spec.label()}", started)

    ctx.record(write_attack_log(logs, ctx.path("attack_log.csv")))
    table = pd.concat(matrices, ignore_index=True)
    path = ctx.path("transfer_matrix.csv")
    table.to_csv(path, index=False, float_format="%.10g")
    ctx.record(path)
