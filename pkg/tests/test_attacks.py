import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from attacks.attack_log import LOG_COLUMNS, attack_log_frame, write_attack_log
from attacks.ensemble_attack import ensemble_attack
from attacks.gradient import gaussian_kernel, loss_and_grad
from attacks.registry import as_surrogate, run_attack
from attacks.spec import AttackSpec, eps_255
from attacks.transfer import CLEAN_ROW, clean_accuracy, transfer_logs, transfer_matrix
from conftest import planted_linear
from data.rng import stream
from engine.errors import ContractError
from fusion.ensemble import Ensemble

EPS = eps_255(8)


def _images(rng, batch=3, shape=(1, 8, 8)):
    return rng.uniform(0.05, 0.95, size=(batch,) + shape)


def _attack(target, x, y, **spec):
    return run_attack(target, x, y, AttackSpec(**spec), stream(0, "attack-test"))


# ---------- spec ----------

def test_spec_defaults_and_validation():
    spec = AttackSpec(method="PGD", epsilon=eps_255(2), num_steps=4)
    assert spec.label() == "PGD@2/255"
    assert spec.step == pytest.approx(eps_255(2) / 4)
    assert not AttackSpec(method="CW_L2").constrained
    with pytest.raises(ValidationError):
        AttackSpec(method="PGD_L2", norm="linf")
    with pytest.raises(ValidationError):
        AttackSpec(method="ENSEMBLE", weights=[0.7, 0.7])
    with pytest.raises(ValidationError):
        AttackSpec(method="DEEPFOOL")


# ---------- reductions ----------

def test_single_full_step_pgd_is_fgsm(tiny_vit, rng):
    x, y = _images(rng), np.array([0, 1, 0])
    fgsm = _attack(tiny_vit, x, y, method="FGSM", epsilon=EPS)
    pgd = _attack(tiny_vit, x, y, method="PGD", epsilon=EPS, num_steps=1, step_size=EPS, random_start=False)
    assert np.array_equal(fgsm.x_adv, pgd.x_adv)


@pytest.mark.parametrize("method,override", [
    ("MIFGSM", {"decay": 0.0}),
    ("DIFGSM", {"diversity_prob": 0.0}),
    ("TIFGSM", {"kernel_size": 1}),
])
def test_variants_reduce_to_bim(method, override, tiny_vit, rng):
    x, y = _images(rng), np.array([1, 0, 1])
    common = {"epsilon": EPS, "num_steps": 4}
    bim = _attack(tiny_vit, x, y, method="BIM", **common)
    variant = _attack(tiny_vit, x, y, method=method, **common, **override)
    assert np.array_equal(bim.x_adv, variant.x_adv)


def test_gaussian_kernel_sums_to_one():
    kernel = gaussian_kernel(5, 1.0)
    assert kernel.shape == (5, 5)
    assert kernel.sum() == pytest.approx(1.0)
    assert np.array_equal(gaussian_kernel(1, 3.0), [[1.0]])


# ---------- invariants ----------

CONSTRAINED = [
    ("FGSM", {}),
    ("BIM", {}),
    ("RFGSM", {}),
    ("PGD", {"random_start": True}),
    ("PGD_L2", {"norm": "l2", "epsilon": 0.5, "random_start": True}),
    ("TPGD", {"random_start": True}),
    ("MIFGSM", {}),
    ("DIFGSM", {"diversity_prob": 1.0}),
    ("TIFGSM", {"kernel_size": 3}),
    ("SQUARE", {"queries": 15}),
]


@pytest.mark.parametrize("method,override", CONSTRAINED, ids=[m for m, _ in CONSTRAINED])
def test_constrained_attacks_stay_in_the_ball_and_the_box(method, override, tiny_vit, rng):
    x, y = _images(rng), np.array([0, 1, 1])
    spec = {"method": method, "epsilon": EPS, "num_steps": 3, **override}
    result = _attack(tiny_vit, x, y, **spec)
    assert result.x_adv.shape == x.shape
    assert np.all(result.x_adv >= 0.0) and np.all(result.x_adv <= 1.0)
    assert np.all(result.norms(spec.get("norm", "linf")) <= spec["epsilon"] + 1e-9)
    assert np.allclose(result.delta, result.x_adv - x)
    assert result.success.dtype == bool


@pytest.mark.parametrize("method", ["FGSM", "PGD", "MIFGSM", "PGD_L2"])
def test_zero_budget_returns_the_input(method, tiny_vit, rng):
    x, y = _images(rng), np.array([0, 1, 0])
    norm = "l2" if method == "PGD_L2" else "linf"
    result = _attack(tiny_vit, x, y, method=method, norm=norm, epsilon=0.0, num_steps=3, random_start=True)
    assert np.array_equal(result.x_adv, x)


def test_fgsm_on_a_linear_model_is_closed_form(rng):
    direction = rng.normal(size=(1, 4, 4))
    model = planted_linear(direction, 0.0, "lin")
    x = rng.uniform(0.1, 0.9, size=(4, 1, 4, 4))
    y = np.array([0, 0, 1, 1])
    result = _attack(model, x, y, method="FGSM", epsilon=0.05)
    # raising the loss moves bona fide inputs along +d and morphs along -d
    expected = np.clip(x + 0.05 * np.sign(direction) * np.where(y == 0, 1.0, -1.0)[:, None, None, None], 0, 1)
    assert np.allclose(result.x_adv, expected)


def test_vanishing_gradient_is_flagged(rng):
    model = planted_linear(np.zeros((1, 4, 4)), 0.0, "flat")
    x = rng.uniform(size=(2, 1, 4, 4))
    result = _attack(model, x, np.array([0, 1]), method="PGD", epsilon=EPS, num_steps=2)
    assert result.flagged.all()
    assert np.array_equal(result.x_adv, x)


# ---------- Carlini-Wagner ----------

def test_cw_lands_just_past_a_linear_boundary(rng):
    direction = rng.normal(size=(1, 4, 4))
    center = np.full((1, 4, 4), 0.5)
    model = planted_linear(direction, -float(np.sum(direction * center)), "lin")
    unit = direction / np.linalg.norm(direction)
    distance = 0.2
    x = np.stack([center + distance * unit] * 2)
    y = np.array([1, 1])
    assert np.array_equal(model.predict(x), y)
    result = _attack(model, x, y, method="CW_L2", cw_c=10.0, cw_kappa=0.1, cw_steps=300, cw_lr=0.01)
    assert result.success.all()
    l2 = result.norms("l2")
    assert np.all(l2 >= distance - 1e-6)
    assert np.all(l2 <= distance + 0.15)
    assert np.all(result.queries == 300)


# ---------- Square ----------

def test_square_objective_never_decreases(tiny_vit, rng):
    x, y = _images(rng, batch=4), np.array([0, 1, 0, 1])
    result = _attack(tiny_vit, x, y, method="SQUARE", epsilon=EPS, queries=30)
    trace = np.stack(result.trace)
    assert np.all(np.diff(trace, axis=0) >= 0.0)
    assert np.all(result.queries <= 30)


def test_square_with_one_query_returns_the_input(tiny_vit, rng):
    x, y = _images(rng), np.array([0, 1, 0])
    result = _attack(tiny_vit, x, y, method="SQUARE", epsilon=EPS, queries=1)
    assert np.array_equal(result.x_adv, x)
    assert np.all(result.queries == 1)


# ---------- ensemble attack ----------

def test_single_model_ensemble_attack_follows_the_loss_gradient(rng):
    model = planted_linear(rng.normal(size=(1, 4, 4)), 0.0, "lin")
    x = rng.uniform(0.2, 0.8, size=(3, 1, 4, 4))
    y = np.array([0, 1, 0])
    spec = AttackSpec(method="ENSEMBLE", epsilon=0.01, num_steps=1, distance_weight=0.0)
    result = ensemble_attack([model], x, y, spec)
    _, grad = loss_and_grad(model, x, y)
    for delta, g in zip(result.delta, grad):
        a, b = delta.reshape(-1), np.sign(g).reshape(-1)
        assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) >= 0.999


def test_heavy_distance_penalty_keeps_the_input(linear_pair, rng):
    x = rng.uniform(0.2, 0.8, size=(3, 1, 4, 4))
    spec = AttackSpec(method="ENSEMBLE", epsilon=EPS, num_steps=5, distance_weight=1e6)
    result = ensemble_attack(list(linear_pair), x, np.array([0, 1, 1]), spec)
    assert np.array_equal(result.x_adv, x)
    # the objective trace only ever holds accepted values
    assert np.all(np.diff(np.stack(result.trace), axis=0) >= 0.0)


def test_ensemble_attack_fools_correlated_models_together():
    rng = np.random.default_rng(21)
    shared = rng.normal(size=(1, 4, 4))
    center = np.full((1, 4, 4), 0.5)
    models = []
    for name in ("lin_a", "lin_b"):
        direction = shared + 0.5 * rng.normal(size=shared.shape)
        models.append(planted_linear(direction, -float(np.sum(direction * center)), name))
    unit = shared / np.linalg.norm(shared)
    x = np.stack([center + r * unit for r in (0.01, 0.015, 0.02, 0.025)])
    y = np.ones(4, dtype=int)
    for m in models:
        assert np.array_equal(m.predict(x), y)
    result = run_attack(models, x, y, AttackSpec(method="ENSEMBLE", epsilon=EPS, num_steps=10,
                                                 distance_weight=0.0), stream(0, "ens"))
    assert result.success.all()
    assert result.fooled["lin_a"].all() and result.fooled["lin_b"].all()
    assert np.all(result.norms() <= EPS + 1e-12)


def test_ensemble_method_unpacks_ensemble_members(linear_pair, rng):
    x, y = rng.uniform(0.2, 0.8, size=(2, 1, 4, 4)), np.array([0, 1])
    spec = AttackSpec(method="ENSEMBLE", epsilon=EPS, num_steps=3)
    from_list = run_attack(list(linear_pair), x, y, spec, stream(0, "e"))
    from_ensemble = run_attack(Ensemble(list(linear_pair)), x, y, spec, stream(0, "e"))
    assert np.array_equal(from_list.x_adv, from_ensemble.x_adv)
    assert set(from_ensemble.fooled) == {"lin_a", "lin_b"}


# ---------- registry ----------

def test_empty_batch_is_rejected(linear_pair):
    with pytest.raises(ContractError):
        _attack(linear_pair[0], np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=int), method="FGSM")


def test_model_list_is_attacked_as_a_soft_vote(linear_pair, rng):
    x, y = rng.uniform(0.2, 0.8, size=(3, 1, 4, 4)), np.array([0, 1, 0])
    assert as_surrogate([linear_pair[0]]) is linear_pair[0]
    surrogate = as_surrogate(list(linear_pair))
    assert isinstance(surrogate, Ensemble) and surrogate.name == "lin_a+lin_b"
    via_list = _attack(list(linear_pair), x, y, method="PGD", epsilon=EPS, num_steps=3)
    via_ensemble = _attack(Ensemble(list(linear_pair)), x, y, method="PGD", epsilon=EPS, num_steps=3)
    assert np.array_equal(via_list.x_adv, via_ensemble.x_adv)
    with pytest.raises(ContractError):
        as_surrogate([])


# ---------- transfer ----------

def test_zero_budget_transfer_matrix_is_clean_accuracy(linear_pair, rng):
    x, y = rng.uniform(0.2, 0.8, size=(6, 1, 4, 4)), np.array([0, 1] * 3)
    sources = {"lin_a": linear_pair[0], "pair": list(linear_pair)}
    targets = {"lin_a": linear_pair[0], "lin_b": linear_pair[1]}
    matrix = transfer_matrix(sources, targets, x, y, AttackSpec(method="PGD", epsilon=0.0, num_steps=2),
                             include_clean=True)
    assert list(matrix.index) == [CLEAN_ROW, "lin_a", "pair"]
    assert list(matrix.columns) == ["lin_a", "lin_b"]
    clean = clean_accuracy(targets, x, y)
    for source in ("lin_a", "pair"):
        assert matrix.loc[source].to_dict() == pytest.approx(clean)


def test_transfer_matrix_rejects_empty_inputs(linear_pair):
    with pytest.raises(ContractError):
        transfer_matrix({"a": linear_pair[0]}, {"b": linear_pair[1]}, np.zeros((0, 1, 4, 4)),
                        np.zeros(0, dtype=int), AttackSpec())


# ---------- logs ----------

def test_attack_log_rows(linear_pair, rng, tmp_path):
    x, y = rng.uniform(0.2, 0.8, size=(4, 1, 4, 4)), np.array([0, 1, 0, 1])
    spec = AttackSpec(method="BIM", epsilon=EPS, num_steps=3)
    result = _attack(linear_pair[0], x, y, **spec.model_dump())
    frame = attack_log_frame(result, spec, [10, 11, 12, 13], source="lin_a")
    assert list(frame.columns) == LOG_COLUMNS
    assert frame["steps"].unique().tolist() == [3]
    assert frame["example_id"].tolist() == [10, 11, 12, 13]
    path = write_attack_log([frame, frame], tmp_path / "attack" / "attack_log.csv")
    assert len(pd.read_csv(path)) == 8

    cw = AttackSpec(method="CW_L2", cw_steps=7, cw_binary_steps=2)
    assert attack_log_frame(result, cw, range(4))["steps"].iloc[0] == 14


def test_transfer_logs_tag_each_source(linear_pair, rng):
    x, y = rng.uniform(0.2, 0.8, size=(2, 1, 4, 4)), np.array([0, 1])
    spec = AttackSpec(method="FGSM", epsilon=EPS)
    crafted = {name: _attack(m, x, y, **spec.model_dump()) for name, m in zip(("a", "b"), linear_pair)}
    logs = transfer_logs(crafted, spec, [0, 1])
    assert logs["source"].tolist() == ["a", "a", "b", "b"]
