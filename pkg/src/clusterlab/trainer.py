"""Modularity training: cross-entropy warmup, cluster selection, then CE + lambda * sum(1 - C)."""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .clustering import (
    GradTrace,
    bsgc,
    contiguous_clusters,
    floor_degrees,
    gradient_similarity,
    record_gradient_step,
    weight_similarity,
)
from .datahub import batches
from .errors import DomainError
from .modmetrics import clusterability, clusterability_grad
from .network import AdamState, adam_step, backward, forward, mlp_init, per_sample_loss

SOURCES = ("contiguous", "bsgc_weight", "bsgc_gradient")
EVAL_CHUNK = 4096


@dataclass
class TrainPlan:
    dims: list = field(default_factory=lambda: [784, 64, 64, 10])
    warmup_steps: int = 0
    lam: float = 20.0
    k: int = 4
    clustered_layers: list = None  # None: every layer except the output layer
    clustering_source: str = "contiguous"
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    allow_output_clustering: bool = False

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if self.clustered_layers is None:
            self.clustered_layers = list(range(len(self.dims) - 2))
        self.clustered_layers = sorted({int(l) for l in self.clustered_layers})

    def validate(self):
        """Raise DomainError naming the first offending field."""
        n_layers = len(self.dims) - 1
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise DomainError(f"dims: need at least two positive widths, got {self.dims}")
        checks = [
            ("warmup_steps", self.warmup_steps >= 0),
            ("lam", self.lam >= 0),
            ("k", self.k >= 1),
            ("epochs", self.epochs >= 0),
            ("batch_size", self.batch_size >= 1),
            ("lr", self.lr > 0),
            ("eval_every", self.eval_every >= 1),
            ("clustering_source", self.clustering_source in SOURCES),
        ]
        for name, ok in checks:
            if not ok:
                raise DomainError(f"{name}: invalid value {getattr(self, name)!r}")
        top = n_layers if self.allow_output_clustering else n_layers - 1
        for l in self.clustered_layers:
            if not 0 <= l < top:
                raise DomainError(f"clustered_layers: {l} is not a clusterable hidden layer")
            if self.k > min(self.dims[l], self.dims[l + 1]):
                raise DomainError(f"k: {self.k} exceeds the width of layer {l}")
        if self.clustering_source == "bsgc_gradient" and self.warmup_steps == 0 and self.clustered_layers:
            raise DomainError("warmup_steps: bsgc_gradient needs t > 0 to collect a gradient trace")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DomainError(f"{sorted(extra)[0]}: unknown plan field")
        return cls(**d)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    per_class: np.ndarray
    class_counts: np.ndarray
    correct: np.ndarray  # boolean per sample


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    clustering_step: int = None
    grad_traces: list = None

    def columns(self, layers):
        return (
            ["step", "ce_loss", "eff_loss"]
            + [f"clusterability_layer{l}" for l in layers]
            + ["train_acc", "test_acc"]
        )


def evaluate(model, dataset, neuron_masks=None):
    """Accuracy, mean CE and per-class accuracy from exact counts."""
    n = len(dataset)
    if n == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    correct = np.zeros(n, dtype=bool)
    loss_sum = 0.0
    for start in range(0, n, EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        logits, _ = forward(model, dataset.features[sl], neuron_masks)
        y = dataset.labels[sl]
        correct[sl] = np.argmax(logits, axis=1) == y
        loss_sum += float(per_sample_loss(logits, y).sum())
    counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
    hits = np.bincount(dataset.labels[correct], minlength=dataset.n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return EvalResult(
        accuracy=int(correct.sum()) / n,
        loss=loss_sum / n,
        per_class=per_class,
        class_counts=counts,
        correct=correct,
    )


def select_clusterings(model, plan, traces=None):
    """One BiClustering per clustered layer according to ``plan.clustering_source``."""
    chosen = {}
    for l in plan.clustered_layers:
        w = model.weights[l]
        if plan.clustering_source == "contiguous":
            chosen[l] = contiguous_clusters(w.shape[0], w.shape[1], plan.k)
        elif plan.clustering_source == "bsgc_weight":
            chosen[l] = bsgc(floor_degrees(weight_similarity(w)), plan.k, plan.seed)
        else:
            if traces is None or traces[l].step_count == 0:
                raise DomainError(f"no gradient trace recorded for layer {l}")
            chosen[l] = bsgc(floor_degrees(gradient_similarity(traces[l])), plan.k, plan.seed)
    return chosen


def _record(model, plan, step, train_set, test_set, regularized):
    train_eval = evaluate(model, train_set)
    cs = {}
    penalty = 0.0
    for l in plan.clustered_layers:
        c = model.clusterings[l]
        if c is None:
            cs[l] = None
            continue
        cs[l] = clusterability(model.weights[l], c).c
        if regularized:
            penalty += 1.0 - cs[l]
    return {
        "step": step,
        "ce_loss": train_eval.loss,
        "eff_loss": train_eval.loss + plan.lam * penalty if regularized else train_eval.loss,
        "clusterability": cs,
        "train_acc": train_eval.accuracy,
        "test_acc": evaluate(model, test_set).accuracy if test_set is not None else None,
    }


def regularized_grads(model, grads, layers, lam):
    """Add ``lam * d(1 - C)/dW`` for each clustered layer; no-op when lam is 0."""
    if lam == 0:
        return grads
    for l in layers:
        grads[l] = grads[l] + lam * clusterability_grad(model.weights[l], model.clusterings[l])
    return grads


def train(plan, train_set, test_set=None, model=None):
    """Run the modularity pipeline; returns ``(model, history)``.

    Phase 1 trains on cross-entropy alone for ``plan.warmup_steps`` steps,
    then clusterings are chosen once and frozen, and the remaining steps
    minimize CE + lam * sum over clustered layers of (1 - C).
    """
    plan.validate()
    if len(train_set) == 0:
        raise DomainError("training set is empty")
    if train_set.width != plan.dims[0]:
        raise DomainError(f"dims: input width {plan.dims[0]} != data width {train_set.width}")
    model = mlp_init(plan.dims, plan.seed) if model is None else model
    state = AdamState.for_model(model, lr=plan.lr)
    traces = [GradTrace(w.shape) for w in model.weights]
    history = TrainHistory(grad_traces=traces)
    layers = plan.clustered_layers
    chosen = False
    step = 0

    def choose():
        nonlocal chosen
        for l, c in select_clusterings(model, plan, traces).items():
            model.clusterings[l] = c
        history.clustering_step = step
        chosen = True

    for epoch in range(plan.epochs):
        for idx in batches(train_set, plan.batch_size, epoch, plan.seed):
            if not chosen and step >= plan.warmup_steps and layers:
                choose()
            x, y = train_set.features[idx], train_set.labels[idx]
            _, grads = backward(model, x, y)
            if chosen:
                grads = regularized_grads(model, grads, layers, plan.lam)
            for l, g in enumerate(grads):
                record_gradient_step(traces[l], g)
            adam_step(state, model, grads)
            step += 1
            if step % plan.eval_every == 0:
                history.records.append(_record(model, plan, step, train_set, test_set, chosen))
    if not chosen and layers:
        choose()
    if not history.records or history.records[-1]["step"] != step:
        history.records.append(_record(model, plan, step, train_set, test_set, chosen))
    return model, history


def max_clusterability_sweep(
    model,
    layer,
    plan,
    train_set,
    test_set,
    baseline_accuracy=None,
    tolerance=0.01,
    plateau_evals=3,
    min_improvement=1e-4,
    max_epochs=20,
):
    """Highest C reachable on one layer without losing more than ``tolerance`` test accuracy.

    Trains a copy of ``model`` with the clusterability loss on ``layer`` only
    and stops once C has not improved by ``min_improvement`` for
    ``plateau_evals`` consecutive evaluations, or accuracy degrades.
    """
    model = model.copy()
    w = model.weights[layer]
    if model.clusterings[layer] is None:
        model.clusterings[layer] = contiguous_clusters(w.shape[0], w.shape[1], plan.k)
    clustering = model.clusterings[layer]
    if baseline_accuracy is None:
        baseline_accuracy = evaluate(model, test_set).accuracy
    best = clusterability(w, clustering).c
    if best >= 1.0 or plan.lam == 0:
        return best
    state = AdamState.for_model(model, lr=plan.lr)
    reference, stale, step = best, 0, 0
    for epoch in range(max_epochs):
        for idx in batches(train_set, plan.batch_size, epoch, plan.seed):
            _, grads = backward(model, train_set.features[idx], train_set.labels[idx])
            grads = regularized_grads(model, grads, [layer], plan.lam)
            adam_step(state, model, grads)
            step += 1
            if step % plan.eval_every:
                continue
            if evaluate(model, test_set).accuracy < baseline_accuracy - tolerance:
                return best
            c = clusterability(model.weights[layer], clustering).c
            best = max(best, c)
            if c > reference + min_improvement:
                reference, stale = c, 0
            else:
                stale += 1
                if stale >= plateau_evals:
                    return best
    return best


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history, path, layers):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(history.columns(layers))
        for r in history.records:
            writer.writerow(
                [_fmt(r["step"]), _fmt(r["ce_loss"]), _fmt(r["eff_loss"])]
                + [_fmt(r["clusterability"].get(l)) for l in layers]
                + [_fmt(r["train_acc"]), _fmt(r["test_acc"])]
            )


def history_to_json(history):
    out = []
    for r in history.records:
        r = dict(r)
        r["clusterability"] = {str(k): v for k, v in r["clusterability"].items()}
        out.append(r)
    return out
