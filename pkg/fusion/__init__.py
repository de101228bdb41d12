"""
Fusion of member detectors: voting rules, learned heads and the Ensemble.
"""

from fusion.ensemble import Ensemble, EnsembleConfig, MemberRef, ensemble_forward  # noqa: F401
from fusion.scores import (  # noqa: F401
    FUSION_STRATEGIES,
    ScoreVector,
    detection_overlap,
    max_vote,
    normalize_scores,
    soft_vote,
)
from fusion.super_learner import (  # noqa: F401
    FusionConfig,
    FusionHead,
    feature_super_learner,
    score_super_learner,
    train_fusion_head,
)
