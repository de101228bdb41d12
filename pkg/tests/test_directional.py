"""
Directional checks at toy scale: transferability of ensemble-crafted
examples, the effect of adversarial training, ensemble generalization under
distribution shift and learnability of the synthetic data.

These train real models and take minutes; run them with ``pytest -m slow``.
"""

import itertools

import numpy as np
import pytest

from attacks.ensemble_attack import ensemble_attack
from attacks.registry import run_attack
from attacks.spec import AttackSpec, eps_255
from cli.schemas import default_models
from conftest import planted_linear
from data.dataset import DatasetParams, gen_dataset, shifted_variants
from data.rng import stream
from fusion.ensemble import Ensemble
from fusion.super_learner import FusionConfig
from ml.adversarial_training import AdvTrainConfig, adv_train
from ml.biometric_metrics import LabeledScores, roc_auc
from ml.model_evaluation import morph_scores
from ml.training import TrainConfig, train_model
from models.base import MORPH
from models.checkpoint import load_model, save_model
from models.linear import LinearClassifier, LinearConfig
from models.noise_aware import DenoiserConfig, NoiseAwareClassifier, NoiseAwareConfig, ResidualCNNConfig
from models.vit import ViTClassifier, ViTConfig

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]
SIZE = 16
PARAMS = DatasetParams(n_identities=30, bonafide_per_id=4, n_morphs=80, image_size=SIZE)
TRAIN = TrainConfig(epochs=15, batch_size=16, lr=1e-3, milestones=(10, 13))


def _build(kind, seed):
    rng = stream(seed, "init", kind)
    if kind == "vit":
        cfg = ViTConfig(image_size=SIZE, patch_size=4, embed_dim=16, num_heads=2, head_dim=8,
                        num_blocks=1, ffn_hidden=32)
        return ViTClassifier(cfg, rng=rng, name=kind)
    if kind == "noise_aware":
        cfg = NoiseAwareConfig(image_size=SIZE,
                               denoiser=DenoiserConfig(num_layers=3, width=8, dilations=(1, 2, 1)),
                               classifier=ResidualCNNConfig(width=8, num_blocks=1))
        return NoiseAwareClassifier(cfg, rng=rng, name=kind)
    return LinearClassifier(LinearConfig(input_shape=(3, SIZE, SIZE)), rng=rng, name=kind)


def _trained(kind, ds, seed):
    model = _build(kind, seed)
    images, labels = ds.subset("train")
    train_model(model, images, labels, TRAIN, seed=seed)
    return model


def _default_member(entry, ds, seed):
    """A default ensemble member shrunk to the toy image size; the noise-aware CNN uses the toy widths."""
    if entry.kind == "noise_aware":
        model = _build("noise_aware", seed)
        model.name = entry.name
    else:
        cfg = entry.architecture().model_copy(update={"image_size": SIZE})
        model = ViTClassifier(cfg, rng=stream(seed, "init", entry.name), name=entry.name)
    images, labels = ds.subset("train")
    train_model(model, images, labels, TRAIN, seed=seed)
    return model


def _auc(model, images, labels):
    return roc_auc(LabeledScores(morph_scores(model, images), labels))


# ---------- transferability ----------

def _box_grid(x, eps, levels=9):
    """Every point of a regular grid over the l-inf ball around x (inside [0, 1])."""
    offsets = np.linspace(-eps, eps, levels)
    grid = np.array(list(itertools.product(offsets, repeat=x.size))).reshape((-1,) + x.shape)
    return np.clip(x + grid, 0.0, 1.0)


def test_ensemble_attack_finds_jointly_fooling_points_when_they_exist():
    """Agreeing planted detectors: whenever the grid holds a point fooling both, the attack finds one."""
    rng = np.random.default_rng(77)
    eps = eps_255(8)
    spec = AttackSpec(method="ENSEMBLE", epsilon=eps, num_steps=10, distance_weight=0.0)
    shape = (1, 2, 2)
    exists, found = 0, 0
    for _ in range(100):
        shared = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        x = rng.uniform(0.3, 0.7, size=shape)
        models = []
        for name in ("lin_a", "lin_b"):
            direction = shared * rng.uniform(0.7, 1.3, size=shape)
            margin = rng.uniform(0.0, 1.6) * eps * np.abs(direction).sum()
            models.append(planted_linear(direction, margin - float(np.sum(direction * x)), name))
        y = np.array([MORPH])
        assert all(m.predict(x[None]).tolist() == [MORPH] for m in models)

        grid = _box_grid(x, eps)
        both = np.all([m.predict(grid) != MORPH for m in models], axis=0)
        if not both.any():
            continue
        exists += 1
        result = ensemble_attack(models, x[None], y, spec)
        found += int(result.fooled["lin_a"][0] and result.fooled["lin_b"][0])
    assert exists >= 20
    assert found >= 0.95 * exists


def _held_out_success(model, x_clean, x_adv, labels):
    """Share of examples the held-out model got right that the crafted version flips."""
    right = model.predict(x_clean) == labels
    if not right.any():
        return 0.0
    return float(np.mean(model.predict(x_adv[right]) != labels[right]))


def test_ensemble_crafted_examples_transfer_better_than_single_sources():
    ensemble_rates, single_rates = [], []
    spec = AttackSpec(method="ENSEMBLE", epsilon=eps_255(8), num_steps=10, distance_weight=0.0)
    for seed in SEEDS:
        ds = gen_dataset(seed, PARAMS)
        sources = [_trained("vit", ds, seed), _trained("noise_aware", ds, seed)]
        held_out = _trained("linear", ds, seed)
        x, y = ds.subset("test")
        crafted = run_attack(sources, x, y, spec, stream(seed, "transfer"))
        ensemble_rates.append(_held_out_success(held_out, x, crafted.x_adv, y))
        single = [run_attack(m, x, y, spec, stream(seed, "transfer")) for m in sources]
        single_rates.append(max(_held_out_success(held_out, x, r.x_adv, y) for r in single))
    assert np.median(ensemble_rates) > 0.0
    assert np.median(ensemble_rates) >= 1.25 * np.median(single_rates)


# ---------- adversarial training ----------

def _accuracies(ensemble, x, y, spec, seed):
    clean = float(np.mean(ensemble.predict(x) == y))
    attacked = run_attack(ensemble, x, y, spec, stream(seed, "probe")).x_adv
    return clean, float(np.mean(ensemble.predict(attacked) == y))


def test_adversarial_training_raises_robust_accuracy(tmp_path):
    probe = AttackSpec(method="PGD", epsilon=eps_255(2), num_steps=10)
    fusion = FusionConfig(strategy="soft_vote")
    config = AdvTrainConfig(
        attacks=[AttackSpec(method="FGSM"), AttackSpec(method="PGD", random_start=True)],
        epsilons=(eps_255(2), eps_255(4)),
        craft_steps=5,
        probe=probe,
        probe_size=16,
        train=TrainConfig(epochs=8, batch_size=16, lr=5e-4, milestones=(5, 7)),
    )
    gains, drops = [], []
    for seed in SEEDS:
        ds = gen_dataset(seed, PARAMS)
        members = [_trained("vit", ds, seed), _trained("noise_aware", ds, seed)]
        x, y = ds.subset("test")
        clean_acc, clean_robust = _accuracies(Ensemble(members, fusion), x, y, probe, seed)

        copies = []
        for m in members:
            path = save_model(m, tmp_path / f"{seed}_{m.name}.mgm")
            copies.append(load_model(path, name=m.name))
        robust = adv_train(copies, fusion, ds, config, seed=seed).ensemble
        adv_acc, adv_robust = _accuracies(robust, x, y, probe, seed)
        gains.append(adv_robust - clean_robust)
        drops.append(clean_acc - adv_acc)
    assert np.median(gains) >= 0.10
    assert np.median(drops) <= 0.05


# ---------- generalization under shift ----------

def test_fused_detector_holds_up_under_distribution_shift():
    entries = default_models()
    assert [e.kind for e in entries] == ["vit", "vit", "noise_aware"]
    ensemble_auc = np.zeros((len(SEEDS), 5))
    best_single = np.zeros((len(SEEDS), 5))
    for i, seed in enumerate(SEEDS):
        ds = gen_dataset(seed, PARAMS)
        members = [_default_member(e, ds, seed) for e in entries]
        ensemble = Ensemble(members, FusionConfig(strategy="soft_vote"))
        for j, variant in enumerate(shifted_variants(PARAMS, 5, seed=seed)):
            x, y = gen_dataset(seed, variant).subset("test")
            ensemble_auc[i, j] = _auc(ensemble, x, y)
            best_single[i, j] = max(_auc(m, x, y) for m in members)
    ensemble_median = np.median(ensemble_auc, axis=0)
    single_median = np.median(best_single, axis=0)
    assert np.all(ensemble_median >= single_median - 0.01)
    assert np.sum(ensemble_median > single_median) >= 3


# ---------- learnability ----------

@pytest.mark.parametrize("kind", ["noise_aware", "vit"])
def test_clean_training_learns_the_synthetic_task(kind):
    ds = gen_dataset(0, PARAMS)
    model = _trained(kind, ds, 0)
    x, y = ds.subset("test")
    assert _auc(model, x, y) >= 0.95
