"""Clusterability of a weight matrix, its loss and gradient, and related counts.

A layer's weight matrix ``w`` is oriented input-neurons x output-neurons.
A :class:`BiClustering` assigns every input neuron (row) and output neuron
(column) one of ``k`` cluster ids; an entry ``w[i, j]`` is *within-module*
when ``row_assign[i] == col_assign[j]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .numerics import as_matrix


@dataclass(frozen=True)
class BiClustering:
    k: int
    row_assign: np.ndarray
    col_assign: np.ndarray

    def __post_init__(self):
        k = self.k
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise DomainError(f"k must be a positive integer, got {k!r}")
        for side in ("row_assign", "col_assign"):
            ids = np.asarray(getattr(self, side), dtype=np.int64)
            if ids.ndim != 1 or ids.size == 0:
                raise DomainError(f"{side} must be a non-empty 1-D array")
            if ids.min() < 0 or ids.max() >= k:
                raise DomainError(f"{side} has ids outside [0, {k})")
            if np.unique(ids).size != k:
                raise DomainError(f"{side} leaves some of the {k} clusters empty")
            ids.setflags(write=False)
            object.__setattr__(self, side, ids)
        object.__setattr__(self, "k", int(k))

    @property
    def shape(self):
        return (self.row_assign.size, self.col_assign.size)

    def same_module(self):
        """Boolean rows x cols indicator of within-module positions."""
        return self.row_assign[:, None] == self.col_assign[None, :]

    def to_dict(self):
        return {
            "k": self.k,
            "row_assign": self.row_assign.tolist(),
            "col_assign": self.col_assign.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["k"]), np.asarray(d["row_assign"]), np.asarray(d["col_assign"]))

    def __eq__(self, other):
        if not isinstance(other, BiClustering):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.row_assign, other.row_assign)
            and np.array_equal(self.col_assign, other.col_assign)
        )

    __hash__ = None


@dataclass(frozen=True)
class ClusterabilityScore:
    c: float
    within_mass: float
    total_mass: float


def _check(w, clustering):
    w = as_matrix(w, "w")
    if clustering.shape != w.shape:
        raise DomainError(
            f"clustering covers {clustering.shape[0]}x{clustering.shape[1]} neurons "
            f"but the matrix is {w.shape[0]}x{w.shape[1]}"
        )
    return w


def _masses(w, clustering):
    w = _check(w, clustering)
    sq = w * w
    same = clustering.same_module()
    # fsum is correctly rounded, so both masses are independent of element order;
    # total is within + cross, so C is exactly 1 (or 0) when one side is empty
    within = math.fsum(sq[same].tolist())
    total = within + math.fsum(sq[~same].tolist())
    if total == 0.0:
        raise DomainError("undefined clusterability: the matrix is identically zero")
    return w, within, total


def clusterability(w, clustering):
    """Fraction of squared weight mass lying inside matched clusters."""
    _, within, total = _masses(w, clustering)
    return ClusterabilityScore(c=within / total, within_mass=within, total_mass=total)


def clusterability_loss(w, clustering):
    """``1 - C``; zero for a perfectly block-diagonal layer."""
    return 1.0 - clusterability(w, clustering).c


def clusterability_grad(w, clustering):
    """Analytic gradient of ``1 - C`` with respect to ``w``.

    d(1 - C)/dW_ij = -2 W_ij (I_ij - C) / S, with S the total squared mass.
    """
    w, within, total = _masses(w, clustering)
    c = within / total
    same = clustering.same_module().astype(np.float64)
    return -2.0 * w * (same - c) / total


def community_structure(a, clustering):
    """Community structure Q of a symmetric non-negative adjacency matrix.

    Uses the null model E[J_ij] = (row sum i)(column sum j) / (2 total) and
    the prefactor 1 / (2 total); note this differs from Newman's usual
    normalization, so a single community scores 1/4 on a regular graph
    rather than 0.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DomainError(f"community structure needs a square matrix, got {a.shape}")
    if np.any(a < 0):
        raise DomainError("adjacency matrix must be non-negative")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise DomainError("adjacency matrix must be symmetric")
    a = _check(a, clustering)
    total = float(a.sum())
    if total == 0.0:
        raise DomainError("community structure is undefined for an empty graph")
    expected = np.outer(a.sum(axis=1), a.sum(axis=0)) / (2.0 * total)
    same = clustering.same_module()
    return float((a - expected)[same].sum() / (2.0 * total))


def random_baseline(k):
    """Expected clusterability of ``k`` equal random clusters, 1/k."""
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise DomainError(f"k must be a positive integer, got {k!r}")
    return 1.0 / k


def cross_module_params(w, clustering):
    """Count of between-module weight positions and their share of the layer."""
    w = _check(w, clustering)
    count = int(np.count_nonzero(~clustering.same_module()))
    return count, count / w.size
