import numpy as np
import pytest
from pydantic import ValidationError

from attacks.registry import run_attack
from attacks.spec import AttackSpec, eps_255
from data.rng import stream
from engine.errors import ConfigError
from fusion.super_learner import FusionConfig, FusionHead
from ml.adversarial_training import (
    TRACE_COLUMNS,
    AdvTrainConfig,
    adv_train,
    adversarial_count,
    craft_batch,
    robust_accuracy,
)
from ml.training import TrainConfig, train_model
from models.linear import LinearClassifier, LinearConfig

SHAPE = (3, 8, 8)


def _linear(name, seed=0):
    return LinearClassifier(LinearConfig(input_shape=SHAPE), rng=stream(seed, "init", name), name=name)


def _config(**overrides):
    base = dict(
        attacks=[AttackSpec(method="FGSM")],
        epsilons=(eps_255(2),),
        probe=AttackSpec(method="PGD", epsilon=eps_255(2), num_steps=2),
        probe_size=6,
        train=TrainConfig(epochs=2, batch_size=8, lr=1e-2, milestones=(1,)),
    )
    base.update(overrides)
    return AdvTrainConfig(**base)


def _batch(rng, n=8):
    return rng.uniform(0.1, 0.9, size=(n,) + SHAPE), np.arange(n) % 2


def test_adversarial_share_of_a_batch():
    assert adversarial_count(16, 0.5) == 8
    assert adversarial_count(16, 1.0) == 0
    assert adversarial_count(5, 0.5) == 3


def test_pool_crosses_attacks_with_epsilons():
    cfg = AdvTrainConfig(
        attacks=[AttackSpec(method="PGD", num_steps=20), AttackSpec(method="CW_L2", cw_steps=100)],
        epsilons=(eps_255(2), eps_255(4)),
        craft_steps=3,
    )
    pool = cfg.pool()
    assert [s.label() for s in pool] == ["PGD@2/255", "PGD@4/255", "CW_L2@2/255", "CW_L2@4/255"]
    assert all(s.num_steps == 3 for s in pool)
    assert pool[2].cw_steps == 3


def test_config_validation():
    with pytest.raises(ValidationError):
        AdvTrainConfig(attacks=[])
    with pytest.raises(ValidationError):
        AdvTrainConfig(epsilons=(0.0,))
    with pytest.raises(ValidationError):
        AdvTrainConfig(probe=AttackSpec(method="CW_L2"))
    with pytest.raises(ValidationError):
        AdvTrainConfig(clean_fraction=0.0)


def test_craft_batch_replaces_the_trailing_share(rng):
    model = _linear("lin")
    images, labels = _batch(rng)
    cfg = _config(epsilons=(0.05,))
    crafted = craft_batch([model], images, labels, cfg, stream(0, "craft"))
    assert np.array_equal(crafted.images[:4], images[:4])
    assert crafted.adversarial.tolist() == [False] * 4 + [True] * 4
    assert crafted.attack == ["clean"] * 4 + ["FGSM@12.75/255"] * 4
    expected = run_attack(model, images[4:], labels[4:], AttackSpec(method="FGSM", epsilon=0.05),
                          stream(0, "unused"))
    assert np.array_equal(crafted.images[4:], expected.x_adv)


def test_craft_batch_does_not_depend_on_thread_count(rng):
    models = [_linear("a", 1), _linear("b", 2)]
    images, labels = _batch(rng, 12)
    pool = [AttackSpec(method="FGSM"), AttackSpec(method="PGD", random_start=True, num_steps=2)]
    serial = craft_batch(models, images, labels, _config(attacks=pool), stream(4, "craft"))
    threaded = craft_batch(models, images, labels, _config(attacks=pool, workers=3), stream(4, "craft"))
    assert np.array_equal(serial.images, threaded.images)
    assert serial.attack == threaded.attack


def test_unconstrained_pool_members_are_projected(rng):
    model = _linear("lin")
    images, labels = _batch(rng)
    cfg = _config(attacks=[AttackSpec(method="CW_L2", cw_c=50.0)], craft_steps=4)
    crafted = craft_batch([model], images, labels, cfg, stream(0, "craft"))
    delta = np.abs(crafted.images - images).reshape(len(images), -1).max(axis=1)
    assert np.all(delta <= eps_255(2) + 1e-12)


def test_robust_accuracy_never_exceeds_clean(rng):
    model = _linear("lin")
    images, labels = _batch(rng, 20)
    clean, robust = robust_accuracy(model, images, labels,
                                    AttackSpec(method="PGD", epsilon=eps_255(8), num_steps=3), stream(0, "p"))
    assert 0.0 <= robust <= clean <= 1.0


def test_members_mode_traces_every_member(tiny_dataset):
    members = [_linear("lin_a", 1), _linear("lin_b", 2)]
    fusion = FusionConfig(strategy="score_super_learner", epochs=2)
    result = adv_train(members, fusion, tiny_dataset, _config(mode="members"), seed=3)
    trace = result.trace()
    assert list(trace.columns) == TRACE_COLUMNS
    assert trace["model"].tolist() == ["lin_a", "lin_a", "lin_b", "lin_b"]
    assert np.all(trace["robust_acc"] <= trace["clean_acc"])
    assert len(result.head_curve) == 2
    assert result.ensemble.head is not None
    assert result.ensemble.member_names == ["lin_a", "lin_b"]


def test_joint_mode_keeps_super_learner_weights_on_the_simplex(tiny_dataset):
    members = [_linear("lin_a", 1), _linear("lin_b", 2)]
    fusion = FusionConfig(strategy="score_super_learner", dropout=0.0)
    head = FusionHead("score_super_learner", [2, 2], dropout=0.0, seed=5)
    before = head.state_dict()
    result = adv_train(members, fusion, tiny_dataset, _config(), seed=3, head=head)
    state = result.ensemble.head.state_dict()
    assert not np.array_equal(state["fusion.w"], before["fusion.w"])
    assert np.all(state["fusion.w"] >= 0.0) and np.all(state["fusion.b"] >= 0.0)
    assert np.allclose(state["fusion.w"].sum(axis=0), 1.0)


def test_joint_mode_trains_through_the_fused_output(tiny_dataset):
    members = [_linear("lin_a", 1), _linear("lin_b", 2)]
    before = [m.digest() for m in members]
    result = adv_train(members, FusionConfig(strategy="soft_vote"), tiny_dataset, _config(), seed=3)
    trace = result.trace()
    assert trace["model"].unique().tolist() == ["ensemble"]
    assert len(trace) == 2
    assert all(m.digest() != d for m, d in zip(members, before))
    assert not any(p.requires_grad for p in members[0].parameters())


def test_joint_majority_voting_is_rejected(tiny_dataset):
    with pytest.raises(ConfigError):
        adv_train([_linear("a")], FusionConfig(strategy="max_vote"), tiny_dataset, _config())


def test_adversarial_training_is_deterministic(tiny_dataset):
    runs = []
    for _ in range(2):
        members = [_linear("lin_a", 1)]
        result = adv_train(members, None, tiny_dataset, _config(mode="members"), seed=5)
        runs.append((members[0].digest(), result.trace().drop(columns="wall_time")))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].equals(runs[1][1])


def test_all_clean_batches_match_standard_training(tiny_dataset):
    cfg = _config(mode="members", clean_fraction=1.0)
    adversarial = _linear("lin")
    result = adv_train([adversarial], None, tiny_dataset, cfg, seed=9)
    standard = _linear("lin")
    images, labels = tiny_dataset.subset("train")
    losses = train_model(standard, images, labels, cfg.train, seed=9).losses
    assert result.history["lin"].losses == losses
    assert adversarial.digest() == standard.digest()
