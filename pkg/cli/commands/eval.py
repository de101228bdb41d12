"""
eval: biometric metrics for every detector, clean and under each attack.

With ``metrics.scores_csv`` set, evaluates that score file instead.
Outputs: report.json, metrics.csv, scores/<detector>.csv, det/<detector>__<attack>.csv,
figures/det_<detector>.png (when plots are enabled)
"""

import logging
import time
from typing import Dict

import numpy as np
import pandas as pd

from analytics.charts import chart_det
from cli.commands.attack import attack_slug, eval_examples
from cli.commands.common import RunContext, ensemble_config_path, load_ensemble, load_models, load_run_dataset
from fusion.scores import detection_overlap, missed_by_all
from ml.biometric_metrics import evaluate_scores
from ml.model_evaluation import compare_models, evaluate_model, evaluate_under_attack, morph_scores
from ml.report_export import read_scores, write_csv, write_json, write_scores
from models.base import MORPH

logger = logging.getLogger(__name__)


def _score_file(ctx: RunContext) -> None:
    _, ls = read_scores(ctx.config.metrics.scores_csv)
    report = evaluate_scores(ls, ctx.config.metrics.targets, ctx.config.metrics.decision_threshold)
    ctx.record(write_json({"detectors": {"scores": {"clean": report.to_dict()}}}, ctx.path("report.json")))
    ctx.record(write_csv(report.det_frame(), ctx.path("det", "scores__clean.csv")))


def _detectors(ctx: RunContext) -> Dict[str, object]:
    ensemble = load_ensemble(ctx, "train")
    detectors = {m.name: m for m in ensemble.members}
    detectors.update(load_models(ctx, [m for m in ctx.config.models if m.held_out]))
    detectors["ensemble"] = ensemble
    if ensemble_config_path(ctx, "adv-train").exists():
        robust = load_ensemble(ctx, "adv-train")
        detectors.update({f"adv_{m.name}": m for m in robust.members})
        detectors["adv_ensemble"] = robust
    return detectors


def cmd_eval(ctx: RunContext) -> None:
    if ctx.config.metrics.scores_csv:
        _score_file(ctx)
        return

    ds = load_run_dataset(ctx)
    ids, images, labels = eval_examples(ctx, ds)
    targets = ctx.config.metrics.targets
    detectors = _detectors(ctx)

    rows, report = [], {"detectors": {}}
    for name, detector in detectors.items():
        started = time.perf_counter()
        row, clean = evaluate_model(name, detector, images, labels, targets)
        rows.append(row)
        entry = {"clean": clean.to_dict()}
        curves = {"clean": clean.det}
        ctx.record(write_csv(clean.det_frame(), ctx.path("det", f"{name}__clean.csv")))
        ctx.record(write_scores(ids, morph_scores(detector, images), labels, ctx.path("scores", f"{name}.csv")))
        for arow, areport, result in evaluate_under_attack(name, detector, images, labels, ctx.config.attacks,
                                                            ctx.seed, targets=targets, workers=ctx.workers):
            rows.append(arow)
            entry[arow["attack"]] = {**areport.to_dict(), "attack_success": result.success_rate}
            curves[arow["attack"]] = areport.det
            ctx.record(write_csv(areport.det_frame(),
                                 ctx.path("det", f"{name}__{attack_slug(arow['attack'])}.csv")))
        report["detectors"][name] = entry
        if ctx.config.metrics.plots:
            ctx.record(chart_det(curves, ctx.path("figures", f"det_{name}.png"), title=name), volatile=True)
        ctx.mark(f"eval:{name}", started)

    morphs = labels == MORPH
    ensemble = detectors["ensemble"]
    correct = {m.name: m.predict(images[morphs]) == MORPH for m in ensemble.members}
    report["detection_overlap"] = {"+".join(k): v for k, v in detection_overlap(correct).items()}
    report["missed_by_all"] = missed_by_all(correct)

    ctx.record(write_json(report, ctx.path("report.json")))
    ctx.record(write_csv(pd.DataFrame(rows), ctx.path("metrics.csv")))
    logger.info(f"Highest clean AUC: {compare_models([r for r in rows if r['attack'] == 'clean'])}; "
                f"{int(np.sum(morphs))} morphs in the evaluation split")
