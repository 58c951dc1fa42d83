"""Closed-form counts for dense versus modular ReLU layers."""

import decimal
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class BigCount:
    value: int
    log2: float

    @classmethod
    def of(cls, value):
        value = int(value)
        return cls(value, math.log2(value) if value > 0 else -math.inf)


@dataclass(frozen=True)
class ModularPartition:
    """Split of a layer's ``n_layer`` output neurons (and optionally its inputs) into k modules."""

    n_prev: int
    n_layer: int
    sub_widths: tuple
    input_sub_widths: tuple = None

    def __post_init__(self):
        subs = tuple(int(s) for s in self.sub_widths)
        if not subs or min(subs) < 1 or sum(subs) != self.n_layer:
            raise DomainError(f"sub-widths {subs} must be positive and sum to {self.n_layer}")
        object.__setattr__(self, "sub_widths", subs)
        if self.input_sub_widths is not None:
            ins = tuple(int(s) for s in self.input_sub_widths)
            if len(ins) != len(subs) or min(ins) < 1 or sum(ins) != self.n_prev:
                raise DomainError(
                    f"input sub-widths {ins} must be {len(subs)} positive parts summing to {self.n_prev}"
                )
            object.__setattr__(self, "input_sub_widths", ins)

    @property
    def k(self):
        return len(self.sub_widths)


def _widths(widths, name="widths"):
    widths = [int(w) for w in widths]
    if not widths:
        raise DomainError(f"{name} must not be empty")
    if min(widths) < 1:
        raise DomainError(f"{name} must be positive, got {widths}")
    return widths


def polytope_bound_dense(hidden_widths):
    """Upper bound 2^(n_1 + ... + n_L) on the number of linear regions."""
    return BigCount.of(1 << sum(_widths(hidden_widths, "hidden_widths")))


def polytope_pair_count_modular(n_prev, partition):
    """Half-space condition count for a modular layer: sum_i 2^n_prev * 2^(n_l^i).

    The previous layer's width is deliberately left unsplit.
    """
    if not isinstance(partition, ModularPartition):
        subs = _widths(partition, "partition")
        partition = ModularPartition(int(n_prev), sum(subs), tuple(subs))
    if partition.n_prev != n_prev or n_prev < 1:
        raise DomainError(f"n_prev={n_prev} does not match the partition")
    return BigCount.of(sum((1 << n_prev) << s for s in partition.sub_widths))


def polytope_pair_count_dense(n_prev, n_layer):
    return BigCount.of(1 << (int(n_prev) + int(n_layer)))


def polytope_pair_count_block_modular(partition):
    """Variant that also splits the inputs: sum_i 2^(n_prev^i) * 2^(n_l^i).

    Not the formula used elsewhere in this module; offered for comparison only.
    """
    if partition.input_sub_widths is None:
        raise DomainError("block-modular count needs input_sub_widths")
    return BigCount.of(
        sum(1 << (a + b) for a, b in zip(partition.input_sub_widths, partition.sub_widths))
    )


def _jl_threshold(n, eps, ctx):
    # n * eps^2 / 8, with eps taken as its exact binary value
    e = decimal.Decimal(eps)
    return ctx.divide(ctx.multiply(ctx.multiply(decimal.Decimal(n), e), e), 8)


def _jl_holds(m, threshold, ctx):
    return decimal.Decimal(m).ln(ctx) < threshold


def jl_capacity(n, eps):
    """Largest m with n > 8 ln(m) / eps^2.

    The candidate floor(e^x) comes from a high-precision exponential and is
    then checked at m and m + 1 with high-precision logarithms, since
    doubles cannot separate ln m from ln(m + 1) once m passes ~1e15.
    """
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    x = n * eps * eps / 8.0
    ctx = decimal.Context(prec=int(x / math.log(10)) + 40)
    threshold = _jl_threshold(n, eps, ctx)
    m = max(1, int(threshold.exp(ctx).to_integral_value(decimal.ROUND_CEILING)) - 1)
    while m > 1 and not _jl_holds(m, threshold, ctx):
        m -= 1
    while _jl_holds(m + 1, threshold, ctx):
        m += 1
    return m


def modular_capacity_comparison(partition):
    """Natural logs of e^(n^1) + ... + e^(n^k) and e^(n^1 + ... + n^k).

    Returns ``(modular_log, dense_log, gap)``.
    """
    subs = np.array(_widths(partition, "partition"), dtype=np.float64)
    top = subs.max()
    modular_log = float(top + math.log(np.exp(subs - top).sum()))
    dense_log = float(subs.sum())
    return modular_log, dense_log, dense_log - modular_log
