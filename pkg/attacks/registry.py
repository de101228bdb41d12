"""
Dispatch from AttackSpec.method to the attack implementations.

The target may be one model, an Ensemble, or a list of models. A list is
attacked through a probability-averaging surrogate (weights from the AttackSpec),
except for ENSEMBLE, which consumes the list directly.
"""

import logging
from typing import Callable, Dict, Sequence, Union

import numpy as np

from attacks.carlini import cw_l2
from attacks.ensemble_attack import ensemble_attack
from attacks.gradient import bim, difgsm, fgsm, mifgsm, pgd, rfgsm, tifgsm, tpgd
from attacks.spec import AdvResult, AttackSpec
from attacks.square import square_attack
from engine.errors import ContractError
from fusion.ensemble import Ensemble
from fusion.super_learner import FusionConfig

logger = logging.getLogger(__name__)

AttackFn = Callable[..., AdvResult]

ATTACKS: Dict[str, AttackFn] = {
    "FGSM": fgsm,
    "BIM": bim,
    "RFGSM": rfgsm,
    "PGD": pgd,
    "PGD_L2": pgd,
    "TPGD": tpgd,
    "MIFGSM": mifgsm,
    "DIFGSM": difgsm,
    "TIFGSM": tifgsm,
    "CW_L2": cw_l2,
    "SQUARE": square_attack,
}

Target = Union[object, Sequence[object]]


def as_surrogate(target: Target, weights=None):
    """One model unchanged; several models as a weighted soft-voting ensemble."""
    if isinstance(target, (list, tuple)):
        if len(target) == 0:
            raise ContractError("attack target list is empty")
        if len(target) == 1:
            return target[0]
        fusion = FusionConfig(strategy="soft_vote", weights=weights)
        return Ensemble(list(target), fusion, name="+".join(getattr(m, "name", "?") for m in target))
    return target


def run_attack(target: Target, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
               rng: np.random.Generator) -> AdvResult:
    """Craft adversarial examples for a batch; the target is put in eval mode first."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ContractError("cannot attack an empty batch")
    if spec.method == "ENSEMBLE":
        models = list(target.members) if isinstance(target, Ensemble) else \
            list(target) if isinstance(target, (list, tuple)) else [target]
        for m in models:
            m.eval()
        return ensemble_attack(models, x, y, spec, rng)
    model = as_surrogate(target, spec.weights)
    model.eval()
    result = ATTACKS[spec.method](model, x, y, spec, rng)
    logger.debug(f"{spec.label()} on {getattr(model, 'name', 'model')}: "
                 f"success {result.success_rate:.3f} over {len(x)} examples")
    return result
