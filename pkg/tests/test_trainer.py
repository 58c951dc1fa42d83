import dataclasses

import numpy as np
import pytest

from clusterlab.clustering import contiguous_clusters
from clusterlab.datahub import Dataset
from clusterlab.errors import DomainError
from clusterlab.modmetrics import clusterability
from clusterlab.network import MlpModel
from clusterlab.trainer import (
    TrainPlan,
    evaluate,
    max_clusterability_sweep,
    train,
    write_history_csv,
)


def weights_bytes(model):
    return [w.tobytes() for w in model.weights]


def test_plan_defaults():
    plan = TrainPlan()
    assert plan.lam == 20.0 and plan.k == 4 and plan.batch_size == 64 and plan.lr == 1e-3
    assert plan.dims == [784, 64, 64, 10] and plan.warmup_steps == 0
    assert plan.clustered_layers == [0, 1] and plan.clustering_source == "contiguous"
    assert TrainPlan.from_dict(plan.to_dict()) == plan


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"k": 0}, "k"),
        ({"lam": -1.0}, "lam"),
        ({"clustered_layers": [2]}, "clustered_layers"),
        ({"clustering_source": "bsgc_gradient"}, "warmup_steps"),
        ({"clustering_source": "spectral"}, "clustering_source"),
        ({"batch_size": 0}, "batch_size"),
    ],
)
def test_plan_validation_names_field(changes, field):
    plan = dataclasses.replace(TrainPlan(), **changes)
    with pytest.raises(DomainError, match=f"^{field}"):
        plan.validate()


def test_plan_from_dict_rejects_unknown():
    with pytest.raises(DomainError, match="lambda"):
        TrainPlan.from_dict({"lambda": 3})


def test_bsgc_gradient_without_warmup_raises(small_data, small_plan):
    plan = dataclasses.replace(small_plan, clustering_source="bsgc_gradient", warmup_steps=0)
    with pytest.raises(DomainError):
        train(plan, *small_data)


def test_lambda_zero_matches_plain_training(small_data, small_plan):
    off, _ = train(dataclasses.replace(small_plan, lam=0.0), *small_data)
    plain, _ = train(dataclasses.replace(small_plan, clustered_layers=[]), *small_data)
    assert weights_bytes(off) == weights_bytes(plain)


def test_eff_loss_decomposition(small_run, small_plan):
    _, history = small_run
    assert history.clustering_step == 0
    for r in history.records:
        penalty = 0.0
        for l in small_plan.clustered_layers:
            penalty += 1.0 - r["clusterability"][l]
        assert r["eff_loss"] == r["ce_loss"] + small_plan.lam * penalty


def test_records_well_formed(small_run, small_plan):
    _, history = small_run
    steps = [r["step"] for r in history.records]
    assert steps == sorted(set(steps)) and steps[0] == small_plan.eval_every
    for r in history.records:
        assert all(0.0 <= c <= 1.0 for c in r["clusterability"].values())


def test_clustering_frozen_during_run(small_data, small_plan):
    plan = dataclasses.replace(small_plan, clustering_source="bsgc_weight", warmup_steps=10)
    model, history = train(plan, *small_data)
    assert history.clustering_step == 10
    # the regularizer acts on the chosen clusters, so the final clusterings
    # match the ones picked at step 10 from the warmed-up weights
    warm, _ = train(dataclasses.replace(plan, epochs=1), *small_data)
    steps_per_epoch = -(-len(small_data[0]) // plan.batch_size)
    assert steps_per_epoch > 10
    for l in plan.clustered_layers:
        assert model.clusterings[l] == warm.clusterings[l]


def test_warmup_records_before_selection(small_data, small_plan):
    plan = dataclasses.replace(small_plan, clustering_source="bsgc_gradient", warmup_steps=12)
    model, history = train(plan, *small_data)
    assert history.clustering_step == 12
    assert history.records[0]["step"] == 5
    assert all(v is None for v in history.records[0]["clusterability"].values())
    assert history.records[0]["eff_loss"] == history.records[0]["ce_loss"]
    assert all(model.clusterings[l] is not None for l in plan.clustered_layers)


def test_training_raises_clusterability(small_run, small_plan):
    model, history = small_run
    first, last = history.records[0], history.records[-1]
    for l in small_plan.clustered_layers:
        assert last["clusterability"][l] > first["clusterability"][l] + 0.05


def test_reproducible(small_data, small_plan, small_run, tmp_path):
    model, history = train(small_plan, *small_data)
    ref_model, ref_history = small_run
    assert weights_bytes(model) == weights_bytes(ref_model)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_history_csv(history, a, small_plan.clustered_layers)
    write_history_csv(ref_history, b, small_plan.clustered_layers)
    assert a.read_bytes() == b.read_bytes()


def test_history_csv_columns(small_run, small_plan, tmp_path):
    _, history = small_run
    path = tmp_path / "h.csv"
    write_history_csv(history, path, small_plan.clustered_layers)
    header = path.read_text().splitlines()[0]
    assert header == "step,ce_loss,eff_loss,clusterability_layer0,clusterability_layer1,train_acc,test_acc"


def test_width_mismatch(small_data):
    with pytest.raises(DomainError, match="dims"):
        train(TrainPlan(dims=[5, 4, 3], k=2), *small_data)


def test_evaluate_constant_logits():
    y = np.array([0, 1, 1, 2, 0, 1])
    ds = Dataset(np.random.default_rng(0).uniform(size=(6, 3)), y, 3)
    zero = MlpModel([3, 4, 3], [np.zeros((3, 4)), np.zeros((4, 3))])
    # all logits tie, argmax picks class 0
    result = evaluate(zero, ds)
    assert result.accuracy == np.mean(y == 0)
    assert result.per_class.tolist() == [1.0, 0.0, 0.0]
    assert result.loss == pytest.approx(np.log(3))


def test_evaluate_counting_identity_and_purity(small_run, small_data):
    model, _ = small_run
    test = small_data[1]
    a, b = evaluate(model, test), evaluate(model, test)
    assert a.accuracy == b.accuracy and a.loss == b.loss
    weighted = (a.per_class * a.class_counts).sum() / a.class_counts.sum()
    assert weighted == pytest.approx(a.accuracy, abs=1e-15)
    with pytest.raises(DomainError):
        evaluate(model, test.subset(np.array([], dtype=int)))


def test_sweep_already_modular(small_data, small_plan):
    dims = small_plan.dims
    rng = np.random.default_rng(0)
    weights = [rng.normal(size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    model = MlpModel(dims, weights)
    model.clusterings[0] = contiguous_clusters(dims[0], dims[1], 2)
    model.weights[0] *= model.clusterings[0].same_module()
    assert max_clusterability_sweep(model, 0, small_plan, *small_data) == 1.0


def test_sweep_lambda_zero_returns_current(small_data, small_plan):
    model, _ = train(dataclasses.replace(small_plan, lam=0.0), *small_data)
    current = clusterability(model.weights[0], model.clusterings[0]).c
    plan = dataclasses.replace(small_plan, lam=0.0)
    assert max_clusterability_sweep(model, 0, plan, *small_data) == current


def test_sweep_not_below_start(small_data, small_plan):
    model, _ = train(dataclasses.replace(small_plan, lam=0.0), *small_data)
    for layer in (0, 1):
        start = clusterability(model.weights[layer], model.clusterings[layer]).c
        swept = max_clusterability_sweep(model, layer, small_plan, *small_data, max_epochs=3)
        assert swept >= start
        # the sweep works on a copy
        assert clusterability(model.weights[layer], model.clusterings[layer]).c == start
