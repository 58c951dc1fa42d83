"""Cluster interventions and effective-circuit-size pruning on trained models."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .network import OFF, ON, cluster_mask, forward, per_sample_loss
from .trainer import evaluate


@dataclass
class InterventionMatrix:
    mode: str
    layer: int
    accuracy: np.ndarray  # k x n_classes


@dataclass
class SufficiencyHistogram:
    k: int
    eligible_count: int
    counts: np.ndarray  # counts[s]: samples with exactly s individually sufficient clusters

    @property
    def not_sufficient_counts(self):
        """Histogram over N = k - s."""
        return self.counts[::-1].copy()


@dataclass
class EcsReport:
    label: int
    nonzero_params: int
    total_params: int
    ecs: float
    baseline_accuracy: float
    final_accuracy: float
    trace: list = field(default_factory=list)  # (pass, removed, restored)
    config: dict = field(default_factory=dict)


def _clustering(model, layer):
    if not 0 <= layer < model.n_layers or model.clusterings[layer] is None:
        raise DomainError(f"layer {layer} has no clustering")
    return model.clusterings[layer]


def intervention_matrix(model, layer, mode, dataset, allow_output=False):
    """Per-class accuracy with each cluster alone (ON) or each cluster ablated (OFF)."""
    if mode not in (ON, OFF):
        raise DomainError(f"mode must be ON or OFF, got {mode!r}")
    k = _clustering(model, layer).k
    acc = np.zeros((k, dataset.n_classes))
    for c in range(k):
        mask = cluster_mask(model, layer, [c], allow_output)
        if mode == OFF:
            mask = 1.0 - mask
        acc[c] = evaluate(model, dataset, {layer: mask}).per_class
    return InterventionMatrix(mode, layer, acc)


def _subset_correct(model, layer, x, y, subset):
    mask = cluster_mask(model, layer, list(subset))
    logits, _ = forward(model, x, {layer: mask})
    return np.argmax(logits, axis=1) == y


def _eligible(model, dataset):
    correct = evaluate(model, dataset).correct
    if not correct.any():
        raise DomainError("no sample is classified correctly without intervention")
    return dataset.features[correct], dataset.labels[correct]


def sufficiency_histogram(model, layer, dataset):
    """How many clusters, each switched on alone, still classify a sample correctly.

    Only samples the unintervened model gets right are counted.
    """
    k = _clustering(model, layer).k
    x, y = _eligible(model, dataset)
    sufficient = np.zeros(y.size, dtype=np.int64)
    for c in range(k):
        sufficient += _subset_correct(model, layer, x, y, [c])
    return SufficiencyHistogram(k, int(y.size), np.bincount(sufficient, minlength=k + 1))


def null_dependency(model, layer, dataset, modules_on):
    """Fraction of eligible samples that no set of ``modules_on`` clusters solves alone."""
    k = _clustering(model, layer).k
    if not 1 <= modules_on <= k:
        raise DomainError(f"modules_on must be in [1, {k}], got {modules_on}")
    x, y = _eligible(model, dataset)
    solved = np.zeros(y.size, dtype=bool)
    for subset in itertools.combinations(range(k), modules_on):
        solved |= _subset_correct(model, layer, x, y, subset)
    return float(np.count_nonzero(~solved)) / y.size


def _label_data(dataset, label, include_negatives):
    if include_negatives:
        return dataset.features, dataset.labels
    idx = np.flatnonzero(dataset.labels == label)
    return dataset.features[idx], dataset.labels[idx]


def _label_metrics(model, x, y, label, include_negatives):
    logits, _ = forward(model, x)
    pred = np.argmax(logits, axis=1)
    if include_negatives:
        # one-vs-rest: correct when "is it this label" is answered right
        acc = float(np.mean((pred == label) == (y == label)))
    else:
        acc = float(np.mean(pred == y))
    return acc, float(per_sample_loss(logits, y).mean())


def effective_circuit(
    model,
    dataset,
    label,
    chunk_fraction=0.005,
    accuracy_drop=0.01,
    loss_rise=0.10,
    prunable_layers=None,
    include_negatives=False,
):
    """Prune a copy of ``model`` for one label and report the surviving weight fraction.

    Weights are visited in ascending ``|w|`` order (ties by layer, row,
    column) in chunks. A chunk is kept pruned only while the label's
    accuracy stays within ``accuracy_drop`` of the unpruned model and its
    mean loss within ``loss_rise`` (relative); otherwise it is restored and
    never tried again. Passes repeat until one removes nothing.
    """
    x, y = _label_data(dataset, label, include_negatives)
    if y.size == 0:
        raise DomainError(f"no samples for label {label}")
    base_acc, base_loss = _label_metrics(model, x, y, label, include_negatives)
    if base_acc == 0.0:
        raise DomainError(f"baseline accuracy on label {label} is zero")
    if prunable_layers is None:
        layers = list(range(model.n_layers))
    else:
        # negative indices count from the output, as in Python sequences
        for l in prunable_layers:
            if not -model.n_layers <= l < model.n_layers:
                raise DomainError(f"prunable layer {l} out of range")
        layers = sorted({int(l) % model.n_layers for l in prunable_layers})
    work = model.copy()
    sizes = [work.weights[l].size for l in layers]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.concatenate([work.weights[l].ravel() for l in layers])
    original = flat.copy()
    alive = np.ones(flat.size, dtype=bool)
    frozen = np.zeros(flat.size, dtype=bool)
    chunk = max(1, int(np.floor(chunk_fraction * flat.size)))

    def write_back():
        for i, l in enumerate(layers):
            work.weights[l] = flat[offsets[i] : offsets[i + 1]].reshape(work.weights[l].shape)

    def gate_ok():
        write_back()
        acc, loss = _label_metrics(work, x, y, label, include_negatives)
        return acc >= base_acc - accuracy_drop and loss <= base_loss * (1.0 + loss_rise)

    trace = []
    n_pass = 0
    while True:
        n_pass += 1
        cand = np.flatnonzero(alive & ~frozen)
        cand = cand[np.argsort(np.abs(original[cand]), kind="stable")]
        removed = restored = 0
        for start in range(0, cand.size, chunk):
            block = cand[start : start + chunk]
            flat[block] = 0.0
            if gate_ok():
                alive[block] = False
                removed += block.size
            else:
                flat[block] = original[block]
                frozen[block] = True
                restored += block.size
        trace.append((n_pass, removed, restored))
        if removed == 0:
            break
    write_back()
    final_acc, _ = _label_metrics(work, x, y, label, include_negatives)
    nonzero = sum(int(np.count_nonzero(w)) for w in work.weights)
    total = model.n_params
    return EcsReport(
        label=int(label),
        nonzero_params=nonzero,
        total_params=total,
        ecs=nonzero / total,
        baseline_accuracy=base_acc,
        final_accuracy=final_acc,
        trace=trace,
        config={
            "chunk_fraction": chunk_fraction,
            "accuracy_drop": accuracy_drop,
            "loss_rise": loss_rise,
            "prunable_layers": layers,
            "include_negatives": include_negatives,
        },
    )


def ecs_compare(model_a, model_b, dataset, labels=None, **config):
    """Per-label percentage increase of model_b's ECS over model_a's.

    Returns ``(pct_by_label, mean_pct, reports_a, reports_b)``.
    """
    if labels is None:
        labels = sorted(int(v) for v in np.unique(dataset.labels))
    pct, reports_a, reports_b = {}, {}, {}
    for label in labels:
        ra = effective_circuit(model_a, dataset, label, **config)
        rb = effective_circuit(model_b, dataset, label, **config)
        reports_a[label], reports_b[label] = ra, rb
        pct[label] = 100.0 * (rb.ecs - ra.ecs) / ra.ecs
    mean = float(np.mean(list(pct.values()))) if pct else 0.0
    return pct, mean, reports_a, reports_b
