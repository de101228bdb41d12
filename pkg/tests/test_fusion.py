import numpy as np
import pytest
from pydantic import ValidationError

from engine import functional as F
from engine.errors import ConfigError, ContractError, DimensionError
from engine.tensor import Tensor
from fusion.ensemble import Ensemble, EnsembleConfig, MemberRef, ensemble_forward
from fusion.scores import (
    ScoreVector,
    detection_overlap,
    max_vote,
    missed_by_all,
    normalize_scores,
    soft_vote,
)
from fusion.super_learner import (
    FusionConfig,
    FusionHead,
    feature_super_learner,
    score_super_learner,
    train_fusion_head,
)
from models.checkpoint import save_model


def _probs(rng, n_models, batch):
    return [normalize_scores(rng.normal(size=(batch, 2))) for _ in range(n_models)]


def _labeled_inputs(rng, n=40):
    x = rng.uniform(size=(n, 1, 4, 4))
    labels = np.arange(n) % 2
    return x, labels


# ---------- voting ----------

def test_soft_vote_stays_within_member_bounds(rng):
    for _ in range(20):
        probs = _probs(rng, 3, 5)
        fused = soft_vote(probs)
        stack = np.stack(probs)
        assert np.all(fused >= stack.min(axis=0) - 1e-12)
        assert np.all(fused <= stack.max(axis=0) + 1e-12)
        assert np.allclose(fused.sum(axis=-1), 1.0)


def test_weighted_soft_vote():
    a, b = np.array([0.2, 0.8]), np.array([0.6, 0.4])
    assert np.allclose(soft_vote([a, b], weights=[0.25, 0.75]), [0.5, 0.5])
    assert np.allclose(soft_vote([ScoreVector.from_logits("a", [0.0, 0.0]), b]), [0.55, 0.45])
    with pytest.raises(ContractError):
        soft_vote([a, b], weights=[0.5, 0.6])
    with pytest.raises(ContractError):
        soft_vote([a, b], weights=[1.5, -0.5])
    with pytest.raises(ContractError):
        soft_vote([])


def test_max_vote_tie_goes_to_morph():
    assert max_vote([np.array([0.9, 0.1]), np.array([0.2, 0.8])]) == 1
    assert max_vote([np.array([0.9, 0.1]), np.array([0.7, 0.3]), np.array([0.2, 0.8])]) == 0
    batch = [np.array([[0.9, 0.1], [0.1, 0.9]]), np.array([[0.8, 0.2], [0.3, 0.7]])]
    assert max_vote(batch).tolist() == [0, 1]


def test_detection_overlap_counts_exact_subsets():
    correct = {
        "vit": [True, True, False, False, True],
        "cnn": [True, False, True, False, False],
    }
    overlap = detection_overlap(correct)
    assert overlap == {("vit",): 2, ("cnn",): 1, ("vit", "cnn"): 1}
    assert missed_by_all(correct) == 1
    assert sum(overlap.values()) + missed_by_all(correct) == 5


# ---------- learned heads ----------

def test_averaging_head_matches_soft_vote(rng):
    head = FusionHead.averaging(3)
    for _ in range(10):
        probs = _probs(rng, 3, 4)
        assert np.allclose(score_super_learner(probs, head), soft_vote(probs), atol=1e-9)


def test_head_width_is_checked(rng):
    head = FusionHead("score_ffn", [2, 2])
    with pytest.raises(DimensionError):
        head.predict_proba(rng.uniform(size=(3, 5)))
    features = FusionHead("feature_super_learner", [4, 6])
    with pytest.raises(DimensionError):
        feature_super_learner([rng.normal(size=(2, 4)), rng.normal(size=(2, 5))], features)
    assert feature_super_learner([rng.normal(size=(2, 4)), rng.normal(size=(2, 6))], features).shape == (2, 2)


def test_dropout_only_applies_while_training(rng):
    head = FusionHead("score_ffn", [2, 2, 2], dropout=0.9, seed=3)
    inputs = np.concatenate(_probs(rng, 3, 6), axis=1)
    first = head.predict_proba(inputs)
    assert np.array_equal(first, head.predict_proba(inputs))
    head.train()
    masked = np.exp(head.log_probs(inputs).data)
    head.eval()
    assert not np.allclose(masked, first)
    mask = FusionHead("score_ffn", [2, 3], dropout=0.5).group_mask(200)
    # groups are dropped as a whole
    assert np.all(mask[:, 0] == mask[:, 1]) and np.all(mask[:, 2] == mask[:, 4])


def test_fusion_head_learns_a_separable_rule(rng):
    labels = np.arange(60) % 2
    informative = np.where(labels[:, None] == 1, [0.1, 0.9], [0.9, 0.1])
    noise = normalize_scores(rng.normal(size=(60, 2)))
    inputs = np.concatenate([informative, noise], axis=1)
    head = FusionHead("score_ffn", [2, 2], hidden=8, dropout=0.0)
    cfg = FusionConfig(strategy="score_ffn", epochs=60, lr=1e-2, batch_size=20)
    curve = train_fusion_head(head, inputs, labels, cfg)
    assert curve[-1] < curve[0]
    assert np.mean(np.argmax(head.predict_proba(inputs), axis=1) == labels) >= 0.9


def test_super_learner_recovers_from_negative_weights(rng):
    labels = np.arange(40) % 2
    honest = np.where(labels[:, None] == 1, [0.1, 0.9], [0.9, 0.1])
    inputs = np.concatenate([honest, honest[:, ::-1]], axis=1)
    head = FusionHead("score_super_learner", [2, 2], dropout=0.0)
    head.load_state_dict({"fusion.w": -np.abs(rng.normal(size=(4, 2))), "fusion.b": np.zeros(2)})

    head.constrain()
    head.train()
    loss = F.neg(F.mean(F.pick(head.log_probs(Tensor(inputs[:1])), labels[:1])))
    loss.backward()
    assert np.any(head.params["fusion.w"].grad != 0.0)
    head.eval()

    cfg = FusionConfig(strategy="score_super_learner", epochs=40, lr=5e-2, batch_size=20, dropout=0.0)
    curve = train_fusion_head(head, inputs, labels, cfg)
    weight, bias = head.state_dict()["fusion.w"], head.state_dict()["fusion.b"]
    assert np.all(weight >= 0.0) and np.all(bias >= 0.0)
    assert np.allclose(weight.sum(axis=0), 1.0)
    assert curve[-1] < curve[0]
    assert curve[-1] < np.log(2.0) - 0.1
    assert np.mean(np.argmax(head.predict_proba(inputs), axis=1) == labels) >= 0.9


def test_constrain_keeps_the_averaging_head():
    head = FusionHead.averaging(3)
    before = head.state_dict()
    head.constrain()
    assert all(np.array_equal(before[k], v) for k, v in head.state_dict().items())
    fresh = FusionHead("score_super_learner", [2, 2, 2], seed=4)
    assert np.all(fresh.state_dict()["fusion.w"] >= 0.0)
    assert np.allclose(fresh.state_dict()["fusion.w"].sum(axis=0), 1.0)


def test_unknown_strategy_is_rejected():
    with pytest.raises(ValidationError):
        FusionConfig(strategy="median_vote")
    with pytest.raises(ConfigError):
        FusionHead("soft_vote", [2, 2])


# ---------- ensemble ----------

def test_ensemble_forward_is_log_soft_vote(linear_pair, rng):
    ensemble = Ensemble(list(linear_pair))
    x = rng.uniform(size=(5, 1, 4, 4))
    fused, scores = ensemble_forward(ensemble, x)
    assert [s.model_id for s in scores] == ["lin_a", "lin_b"]
    assert np.allclose(scores[0].morph_score, linear_pair[0].predict_proba(x)[:, 1])
    assert np.allclose(fused, soft_vote(scores))
    assert np.allclose(fused, np.exp(ensemble(x).data))


def test_max_vote_ensemble_prediction(linear_pair, rng):
    ensemble = Ensemble(list(linear_pair), FusionConfig(strategy="max_vote"))
    x = rng.uniform(size=(8, 1, 4, 4))
    votes = [m.predict_proba(x) for m in linear_pair]
    assert ensemble.predict(x).tolist() == max_vote(votes).tolist()


def test_ensemble_arguments_are_checked(linear_pair):
    with pytest.raises(ContractError):
        Ensemble([])
    with pytest.raises(ConfigError):
        Ensemble(list(linear_pair), trainable="everything")
    with pytest.raises(ContractError):
        Ensemble(list(linear_pair)).fit_head(np.zeros((2, 1, 4, 4)), np.array([0, 1]))


def test_fit_head_leaves_members_untouched(linear_pair, rng):
    ensemble = Ensemble(list(linear_pair), FusionConfig(strategy="score_ffn", epochs=3, hidden=4))
    before = [m.digest() for m in linear_pair]
    head_before = ensemble.head.state_dict()
    x, labels = _labeled_inputs(rng)
    curve = ensemble.fit_head(x, labels, seed=2)
    assert len(curve) == 3
    assert [m.digest() for m in linear_pair] == before
    assert any(not np.array_equal(head_before[k], v) for k, v in ensemble.head.state_dict().items())


def test_trainable_selects_parameters(linear_pair):
    fusion = FusionConfig(strategy="score_super_learner")
    head_only = Ensemble(list(linear_pair), fusion, trainable="fusion")
    members = Ensemble(list(linear_pair), fusion, trainable="members")
    both = Ensemble(list(linear_pair), fusion, trainable="both")
    assert len(head_only.parameters()) == 2
    assert len(members.parameters()) == 4
    assert len(both.parameters()) == 6


def test_feature_super_learner_ensemble(linear_pair, rng):
    ensemble = Ensemble(list(linear_pair), FusionConfig(strategy="feature_super_learner", hidden=4))
    assert ensemble.group_sizes() == [16, 16]
    x = rng.uniform(size=(3, 1, 4, 4))
    assert ensemble.head_inputs(x).shape == (3, 32)
    assert np.allclose(ensemble.predict_proba(x).sum(axis=1), 1.0)


def test_ensemble_reloads_from_config(linear_pair, rng, tmp_path):
    fusion = FusionConfig(strategy="score_ffn", epochs=2, hidden=4)
    ensemble = Ensemble(list(linear_pair), fusion)
    x, labels = _labeled_inputs(rng)
    ensemble.fit_head(x, labels)
    for m in linear_pair:
        save_model(m, tmp_path / f"{m.name}.mgm")
    ensemble.save_head(tmp_path / "head.mgt")
    cfg = EnsembleConfig(
        members=[MemberRef(name=m.name, checkpoint=f"{m.name}.mgm") for m in linear_pair],
        fusion=fusion,
        head_checkpoint="head.mgt",
    )
    restored = Ensemble.from_config(cfg, base_dir=tmp_path)
    assert restored.member_names == ["lin_a", "lin_b"]
    assert np.array_equal(restored.predict_proba(x), ensemble.predict_proba(x))
