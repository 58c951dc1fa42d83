"""Similarity matrices and bipartite spectral graph clustering (BSGC) of layers."""

import itertools

import numpy as np

from .errors import DomainError
from .modmetrics import BiClustering
from .numerics import as_matrix, kmeans, svd_truncated

DEGREE_FLOOR = 1e-12
MAX_ALIGN_K = 8


def weight_similarity(w):
    """Non-negative similarity from a signed weight matrix: ``|w|``."""
    return np.abs(as_matrix(w, "w"))


class GradTrace:
    """Running sum of per-step Frobenius-normalized gradient magnitudes for one layer."""

    def __init__(self, shape):
        self.accumulator = np.zeros(shape)
        self.step_count = 0

    @property
    def shape(self):
        return self.accumulator.shape

    def to_dict(self):
        return {
            "rows": self.shape[0],
            "cols": self.shape[1],
            "step_count": self.step_count,
            "accumulator": self.accumulator.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        trace = cls((int(d["rows"]), int(d["cols"])))
        trace.accumulator = np.asarray(d["accumulator"], dtype=np.float64).reshape(trace.shape)
        trace.step_count = int(d["step_count"])
        return trace


def record_gradient_step(trace, grad):
    """Add ``|G| / ||G||_F`` to ``trace``; all-zero gradients are not counted."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != trace.shape:
        raise DomainError(f"gradient shape {grad.shape} does not match trace {trace.shape}")
    norm = np.linalg.norm(grad)
    if norm == 0.0:
        return trace
    trace.accumulator += np.abs(grad) / norm
    trace.step_count += 1
    return trace


def gradient_similarity(trace):
    if trace.step_count < 1:
        raise DomainError("gradient trace is empty; record at least one step")
    return trace.accumulator / trace.step_count


def floor_degrees(a):
    """Lift a similarity matrix with dead rows or columns just above the degree floor.

    Neurons that never fire get all-zero gradient rows; adding the floor to
    every entry keeps them clusterable. Matrices without dead neurons are
    returned unchanged.
    """
    a = as_matrix(a, "a")
    if min(a.sum(axis=1).min(), a.sum(axis=0).min()) >= DEGREE_FLOOR:
        return a
    return a + DEGREE_FLOOR


def contiguous_clusters(n_rows, n_cols, k):
    """Equal contiguous blocks on both sides; neuron i gets id floor(i*k/n)."""
    if k < 1 or k > min(n_rows, n_cols):
        raise DomainError(f"k={k} must be in [1, min({n_rows}, {n_cols})]")
    rows = np.arange(n_rows) * k // n_rows
    cols = np.arange(n_cols) * k // n_cols
    return BiClustering(k, rows, cols)


def _block_mass(w2, row_assign, col_assign, k):
    mass = np.zeros((k, k))
    np.add.at(mass, (row_assign[:, None], col_assign[None, :]), w2)
    return mass


def align_biclusters(w, row_assign, col_assign, k):
    """Relabel column clusters to maximize within-module squared mass.

    All k! relabelings are scored; the lexicographically first maximizer wins,
    so an input that is already optimal comes back unchanged.
    """
    if k > MAX_ALIGN_K:
        raise DomainError(f"label alignment is exhaustive and supports k <= {MAX_ALIGN_K}, got {k}")
    w = as_matrix(w, "w")
    row_assign = np.asarray(row_assign, dtype=np.int64)
    col_assign = np.asarray(col_assign, dtype=np.int64)
    if (row_assign.size, col_assign.size) != w.shape:
        raise DomainError("assignment lengths do not match the matrix shape")
    mass = _block_mass(w * w, row_assign, col_assign, k)
    perms = np.array(list(itertools.permutations(range(k))))
    # perm[v] is the new id of column cluster v
    scores = mass[perms, np.arange(k)[None, :]].sum(axis=1)
    best = perms[int(np.argmax(scores))]
    return BiClustering(k, row_assign, best[col_assign])


def bsgc(a, k, seed=0):
    """Bipartite spectral graph clustering of a non-negative similarity matrix.

    Degree-normalizes ``a``, embeds rows and columns with the top-``k``
    singular vectors, runs k-means on each side, and aligns the column
    labels to the row labels.
    """
    a = as_matrix(a, "a")
    if np.any(a < 0):
        raise DomainError("similarity matrix must be non-negative")
    m, n = a.shape
    if not isinstance(k, (int, np.integer)) or k < 1 or k > min(m, n):
        raise DomainError(f"k={k} must be in [1, {min(m, n)}]")
    d_rows = a.sum(axis=1)
    d_cols = a.sum(axis=0)
    for side, deg in (("input", d_rows), ("output", d_cols)):
        dead = np.flatnonzero(deg < DEGREE_FLOOR)
        if dead.size:
            raise DomainError(
                f"{side} neuron {int(dead[0])} has zero similarity degree "
                f"({dead.size} such neurons)"
            )
    normalized = a / np.sqrt(d_rows)[:, None] / np.sqrt(d_cols)[None, :]
    svd = svd_truncated(normalized, k)
    rows = kmeans(svd.u, k, seed).assignments
    cols = kmeans(svd.v, k, seed).assignments
    return align_biclusters(a, rows, cols, k)
