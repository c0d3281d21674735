"""Per-layer magnitude top-k mask construction and the sparse weight view.

The active set A holds the top D-fraction of a layer's weights by absolute
value; the backward set B extends A to the top (D+M)-fraction and receives
gradient updates. Ties break toward the lowest flat index, which makes the
selection deterministic and makes top-k results nested (k1 <= k2 implies
A_k1 is a subset of A_k2), so A is a subset of B by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SparsitySpec:
    """Forward/backward sparsity targets and the mask refresh period.

    s_fwd is the fraction of weights that are zero in the forward view, so
    the forward density is d = 1 - s_fwd. s_bwd is the fraction receiving
    no updates; it cannot exceed s_fwd because the backward set contains
    the forward set.
    """

    s_fwd: float = 0.0
    s_bwd: float = 0.0
    refresh_period: int = 1
    dense_exempt_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.s_fwd < 1.0:
            raise ValueError(f"s_fwd must be in [0, 1), got {self.s_fwd}")
        if not 0.0 <= self.s_bwd <= self.s_fwd:
            raise ValueError(
                f"s_bwd must be in [0, s_fwd={self.s_fwd}], got {self.s_bwd}"
            )
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        object.__setattr__(
            self, "dense_exempt_layers", frozenset(self.dense_exempt_layers)
        )

    @property
    def d(self):
        """Forward density D = 1 - s_fwd."""
        return 1.0 - self.s_fwd

    @property
    def m(self):
        """Extra backward density M = s_fwd - s_bwd."""
        return self.s_fwd - self.s_bwd


@dataclass
class MaskPair:
    """Per-layer sorted index sets: a (forward-active) within b (updatable)."""

    a_indices: dict
    b_indices: dict
    step_built: int = 0

    def validate(self):
        if set(self.a_indices) != set(self.b_indices):
            raise ValueError("a and b must cover the same layers")
        for name, a in self.a_indices.items():
            b = self.b_indices[name]
            if a.size and not is_subset(a, b):
                raise ValueError(f"layer {name!r}: a is not a subset of b")
        return self

    def copy(self):
        return MaskPair(
            {k: v.copy() for k, v in self.a_indices.items()},
            {k: v.copy() for k, v in self.b_indices.items()},
            self.step_built,
        )


def is_subset(small, big):
    """Whether every entry of sorted index array `small` occurs in `big`."""
    small = np.asarray(small)
    big = np.asarray(big)
    if small.size == 0:
        return True
    pos = np.searchsorted(big, small)
    if pos[-1] >= big.size:
        return False
    return bool(np.array_equal(big[pos], small))


def topk_indices(values, k):
    """Indices of the k largest entries by |value|, sorted ascending.

    Equal magnitudes resolve to the lower index (stable order on -|v|),
    so the result is deterministic and nested in k.
    """
    v = np.asarray(values)
    if v.ndim != 1:
        raise ValueError("values must be a flat array")
    if not 0 <= k <= v.size:
        raise ValueError(f"k={k} out of range for {v.size} values")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k == v.size:
        return np.arange(v.size, dtype=np.int64)
    order = np.argsort(-np.abs(v), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def mask_cardinality(n, density):
    """Weight count for one layer: round-half-up, at least one weight."""
    return min(n, max(1, _round_half_up(density * n)))


def compute_masks(theta_layer, spec, layer_name=None):
    """Top-k index sets (a, b) for one layer's current dense weights.

    k_A = max(1, round(D*n)) and k_B = min(n, max(k_A, round((D+M)*n))),
    with round-half-up; dense-exempt layers get all indices for both sets.
    """
    theta = np.asarray(theta_layer).reshape(-1)
    n = theta.size
    if n < 1:
        raise ValueError("empty layer")
    if layer_name is not None and layer_name in spec.dense_exempt_layers:
        full = np.arange(n, dtype=np.int64)
        return full, full.copy()
    k_a = mask_cardinality(n, spec.d)
    k_b = min(n, max(k_a, _round_half_up((spec.d + spec.m) * n)))
    a = topk_indices(theta, k_a)
    b = topk_indices(theta, k_b)
    return a, b


def apply_mask(theta_layer, a_indices):
    """Sparse forward view: theta at the active indices, zero elsewhere."""
    theta = np.asarray(theta_layer).reshape(-1)
    idx = np.asarray(a_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= theta.size):
        raise ValueError(f"mask index out of bounds for layer of size {theta.size}")
    alpha = np.zeros_like(theta)
    alpha[idx] = theta[idx]
    return alpha


def refresh_due(step, spec):
    """True when the masks should be rebuilt from the current weights.

    Step 0 always refreshes (the initial masks), then every refresh_period
    steps after that.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    return step % spec.refresh_period == 0


def random_b_complement(theta_layer, a_indices, k_extra, rng_seed):
    """Backward set = a plus k_extra indices sampled uniformly outside a.

    rng_seed may be an int seed or a numpy Generator; the draw is
    deterministic given either.
    """
    theta = np.asarray(theta_layer).reshape(-1)
    a = np.asarray(a_indices, dtype=np.int64)
    complement = np.setdiff1d(np.arange(theta.size, dtype=np.int64), a)
    if k_extra < 0 or k_extra > complement.size:
        raise ValueError(
            f"k_extra={k_extra} exceeds the {complement.size} inactive indices"
        )
    if k_extra == 0:
        return a.copy()
    rng = np.random.default_rng(rng_seed)
    extra = rng.choice(complement, size=k_extra, replace=False)
    return np.sort(np.concatenate([a, extra]))
