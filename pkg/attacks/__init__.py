from attacks.attack_log import attack_log_frame, write_attack_log
from attacks.carlini import cw_l2
from attacks.ensemble_attack import ensemble_attack, ensemble_objective
from attacks.gradient import bim, difgsm, fgsm, mifgsm, pgd, rfgsm, tifgsm, tpgd
from attacks.registry import ATTACKS, run_attack
from attacks.spec import METHODS, AdvResult, AttackSpec, eps_255
from attacks.square import ScoreOracle, square_attack
from attacks.transfer import clean_accuracy, transfer_matrix

__all__ = [
    "AdvResult", "AttackSpec", "ATTACKS", "METHODS", "ScoreOracle",
    "attack_log_frame", "bim", "clean_accuracy", "cw_l2", "difgsm", "ensemble_attack",
    "ensemble_objective", "eps_255", "fgsm", "mifgsm", "pgd", "rfgsm", "run_attack",
    "square_attack", "tifgsm", "tpgd", "transfer_matrix", "write_attack_log",
]
