"""Bias-free ReLU multilayer perceptron with exact backprop and Adam.

Weights are stored input x output, so a batch ``x`` of shape
(batch, dims[0]) flows as ``relu(x @ W0) @ W1 ...``; the last layer has no
ReLU and yields logits.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .modmetrics import BiClustering

FORMAT_VERSION = 1
ORIENTATION = "input_by_output"
ON, OFF = "ON", "OFF"


@dataclass
class MlpModel:
    dims: list
    weights: list
    clusterings: list = None
    masks: list = None

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        n = len(self.dims) - 1
        if self.clusterings is None:
            self.clusterings = [None] * n
        if self.masks is None:
            self.masks = [None] * n
        if len(self.weights) != n or len(self.clusterings) != n or len(self.masks) != n:
            raise DomainError("weights, clusterings and masks need one entry per layer")
        for l, w in enumerate(self.weights):
            if w.shape != (self.dims[l], self.dims[l + 1]):
                raise DomainError(
                    f"layer {l} weight shape {w.shape} != ({self.dims[l]}, {self.dims[l + 1]})"
                )

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(w.size for w in self.weights)

    def copy(self):
        return MlpModel(
            list(self.dims),
            [w.copy() for w in self.weights],
            list(self.clusterings),
            [None if m is None else m.copy() for m in self.masks],
        )

    def set_mask(self, layer, mask):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.weights[layer].shape:
            raise DomainError(f"mask shape {mask.shape} does not match layer {layer}")
        self.masks[layer] = mask
        self.weights[layer] *= mask


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list = field(default_factory=list)  # one per layer; pre[-1] are the logits
    post: list = field(default_factory=list)  # one per hidden layer, after ReLU and masking


def mlp_init(dims, seed):
    """He-normal weights (variance 2/fan_in), no biases."""
    dims = list(dims)
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise DomainError(f"dims must list at least two positive widths, got {dims}")
    rng = np.random.default_rng(seed)
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l], dims[l + 1]))
        for l in range(len(dims) - 1)
    ]
    return MlpModel(dims, weights)


def forward(model, x, neuron_masks=None):
    """Run a batch through the network.

    ``neuron_masks`` maps a layer index to a 0/1 vector over that layer's
    output neurons, multiplied into the post-activations.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dims[0]:
        raise DomainError(f"batch width {x.shape[1]} != input width {model.dims[0]}")
    neuron_masks = neuron_masks or {}
    trace = ForwardTrace(inputs=x)
    h = x
    last = model.n_layers - 1
    for l, w in enumerate(model.weights):
        z = h @ w
        trace.pre.append(z)
        if l == last:
            if l in neuron_masks:
                z = z * neuron_masks[l]
                trace.pre[-1] = z
            break
        h = np.maximum(z, 0.0)
        if l in neuron_masks:
            h = h * neuron_masks[l]
        trace.post.append(h)
    return trace.pre[-1], trace


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    return labels


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, stable for large logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape[1])
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def per_sample_loss(logits, labels):
    labels = _check_labels(labels, logits.shape[1])
    return -_log_softmax(logits)[np.arange(labels.size), labels]


def backward(model, x, labels, trace=None, neuron_masks=None):
    """Gradients of mean cross-entropy w.r.t. every weight matrix.

    Returns ``(loss, grads)``. Masked weight positions get zero gradient.
    """
    if trace is None:
        _, trace = forward(model, x, neuron_masks)
    neuron_masks = neuron_masks or {}
    logits = trace.pre[-1]
    labels = _check_labels(labels, logits.shape[1])
    if labels.size != logits.shape[0]:
        raise DomainError(f"{labels.size} labels for a batch of {logits.shape[0]}")
    batch = labels.size
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(batch), labels].mean())
    delta = np.exp(logp)
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch
    last = model.n_layers - 1
    if last in neuron_masks:
        delta = delta * neuron_masks[last]
    grads = [None] * model.n_layers
    for l in range(last, -1, -1):
        h_in = trace.inputs if l == 0 else trace.post[l - 1]
        grads[l] = h_in.T @ delta
        if model.masks[l] is not None:
            grads[l] *= model.masks[l]
        if l > 0:
            dh = delta @ model.weights[l].T
            if (l - 1) in neuron_masks:
                dh = dh * neuron_masks[l - 1]
            delta = dh * (trace.pre[l - 1] > 0)
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(w) for w in model.weights],
            v=[np.zeros_like(w) for w in model.weights],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state, model, grads):
    """One bias-corrected Adam update, in place. Masked weights stay zero."""
    if len(grads) != model.n_layers:
        raise DomainError("need one gradient per layer")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for l, g in enumerate(grads):
        if g.shape != model.weights[l].shape:
            raise DomainError(f"gradient {l} has shape {g.shape}")
        state.m[l] = b1 * state.m[l] + (1.0 - b1) * g
        state.v[l] = b2 * state.v[l] + (1.0 - b2) * (g * g)
        update = state.lr * (state.m[l] / c1) / (np.sqrt(state.v[l] / c2) + state.eps)
        model.weights[l] -= update
        if model.masks[l] is not None:
            model.weights[l] *= model.masks[l]
    return model, state


def cluster_mask(model, layer, clusters_on, allow_output=False):
    """0/1 vector over ``layer``'s output neurons keeping only ``clusters_on``."""
    if not 0 <= layer < model.n_layers:
        raise DomainError(f"layer {layer} out of range")
    if layer == model.n_layers - 1 and not allow_output:
        raise DomainError("the output layer is not intervened on unless allow_output=True")
    clustering = model.clusterings[layer]
    if clustering is None:
        raise DomainError(f"layer {layer} has no clustering; interventions need one")
    clusters_on = [int(c) for c in np.atleast_1d(clusters_on)]
    for c in clusters_on:
        if not 0 <= c < clustering.k:
            raise DomainError(f"cluster {c} outside [0, {clustering.k})")
    return np.isin(clustering.col_assign, clusters_on).astype(np.float64)


def apply_intervention(model, layer_index, cluster_id, mode, allow_output=False):
    """Forward function with one cluster kept alone (ON) or ablated (OFF)."""
    if mode not in (ON, OFF):
        raise DomainError(f"mode must be ON or OFF, got {mode!r}")
    mask = cluster_mask(model, layer_index, [cluster_id], allow_output)
    if mode == OFF:
        mask = 1.0 - mask
    masks = {layer_index: mask}

    def run(x):
        return forward(model, x, masks)

    return run


def predict(model, x, neuron_masks=None):
    logits, _ = forward(model, x, neuron_masks)
    return np.argmax(logits, axis=1)


# -- checkpoints ------------------------------------------------------------


def _matrix_entry(a):
    return {"rows": a.shape[0], "cols": a.shape[1], "row_major_weights": a.ravel().tolist()}


def save_checkpoint(model, plan, history, path, grad_traces=None, extra=None):
    """Write a single JSON document; floats round-trip bitwise."""
    doc = {
        "format_version": FORMAT_VERSION,
        "dims": model.dims,
        "orientation": ORIENTATION,
        "layers": [_matrix_entry(w) for w in model.weights],
        "clusterings": [None if c is None else c.to_dict() for c in model.clusterings],
        "masks": [None if m is None else _matrix_entry(m) for m in model.masks],
        "plan": plan,
        "history": history if history is not None else [],
    }
    if grad_traces is not None:
        doc["grad_traces"] = [None if t is None else t.to_dict() for t in grad_traces]
    for key, value in (extra or {}).items():
        doc.setdefault(key, value)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
    os.replace(tmp, path)


def _read_matrix(entry, where):
    try:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        values = entry["row_major_weights"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed matrix entry ({exc})", where) from None
    if rows < 1 or cols < 1:
        raise FormatError(f"non-positive shape {rows}x{cols}", where)
    if not isinstance(values, list) or len(values) != rows * cols:
        n = len(values) if isinstance(values, list) else "non-list"
        raise FormatError(f"expected {rows * cols} values for {rows}x{cols}, found {n}", where)
    try:
        arr = np.array(values, dtype=np.float64).reshape(rows, cols)
    except (TypeError, ValueError):
        raise FormatError("non-numeric weight value", where) from None
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite weight value", where)
    return arr


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, meta)`` with plan, history and traces."""
    from .clustering import GradTrace

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", f"{path}:{exc.lineno}:{exc.colno}") from None
    if not isinstance(doc, dict):
        raise FormatError("top level must be an object", path)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r}", "format_version")
    if doc.get("orientation") != ORIENTATION:
        raise FormatError(f"unsupported orientation {doc.get('orientation')!r}", "orientation")
    dims = doc.get("dims")
    if not isinstance(dims, list) or len(dims) < 2:
        raise FormatError("dims must be a list of at least two widths", "dims")
    layers = doc.get("layers")
    if not isinstance(layers, list) or len(layers) != len(dims) - 1:
        raise FormatError(f"expected {len(dims) - 1} layers", "layers")
    weights = []
    for l, entry in enumerate(layers):
        w = _read_matrix(entry, f"layers[{l}]")
        if w.shape != (dims[l], dims[l + 1]):
            raise FormatError(f"shape {w.shape} inconsistent with dims", f"layers[{l}]")
        weights.append(w)
    n = len(weights)
    clusterings = []
    for l, c in enumerate(doc.get("clusterings") or [None] * n):
        if c is None:
            clusterings.append(None)
            continue
        try:
            bc = BiClustering.from_dict(c)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(str(exc), f"clusterings[{l}]") from None
        if bc.shape != weights[l].shape:
            raise FormatError("clustering shape inconsistent with layer", f"clusterings[{l}]")
        clusterings.append(bc)
    masks = []
    for l, m in enumerate(doc.get("masks") or [None] * n):
        masks.append(None if m is None else _read_matrix(m, f"masks[{l}]"))
    if len(clusterings) != n or len(masks) != n:
        raise FormatError("clusterings/masks must have one entry per layer", "clusterings")
    model = MlpModel(dims, weights, clusterings, masks)
    traces = None
    if doc.get("grad_traces") is not None:
        traces = []
        for l, t in enumerate(doc["grad_traces"]):
            try:
                traces.append(None if t is None else GradTrace.from_dict(t))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(str(exc), f"grad_traces[{l}]") from None
    meta = {
        "plan": doc.get("plan"),
        "history": doc.get("history", []),
        "grad_traces": traces,
        "data": doc.get("data"),
    }
    return model, meta
