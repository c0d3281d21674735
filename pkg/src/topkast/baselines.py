"""Reference training modes that share the sparse engine: fully dense,
a static random mask fixed at initialization, and SET-style prune/regrow
where dropped low-magnitude connections are replaced by random inactive
ones redrawn from the layer's initialization distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import MaskPair, mask_cardinality

METHOD_TOPKAST = "topkast"
METHOD_DENSE = "dense"
METHOD_STATIC = "static"
METHOD_SET = "set"
METHODS = (METHOD_TOPKAST, METHOD_DENSE, METHOD_STATIC, METHOD_SET)


@dataclass(frozen=True)
class BaselineKind:
    kind: str = METHOD_DENSE
    set_prune_fraction: float = 0.3
    set_update_period: int = 100

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method {self.kind!r}")
        if not 0.0 <= self.set_prune_fraction < 1.0:
            raise ValueError("set_prune_fraction must be in [0, 1)")
        if self.set_update_period < 1:
            raise ValueError("set_update_period must be >= 1")


def static_mask_init(layer_sizes, s_fwd, rng_seed):
    """Uniform random masks with B = A, fixed for the whole run.

    layer_sizes maps layer name to flat weight count; each layer gets
    k_A = max(1, round((1 - s_fwd) * n)) indices sampled without
    replacement. Deterministic given the seed.
    """
    if not 0.0 <= s_fwd < 1.0:
        raise ValueError("s_fwd must be in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    a_sets = {}
    for name in sorted(layer_sizes):
        n = int(layer_sizes[name])
        k = mask_cardinality(n, 1.0 - s_fwd)
        a_sets[name] = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    b_sets = {name: a.copy() for name, a in a_sets.items()}
    return MaskPair(a_sets, b_sets, step_built=0)


def set_regrow(theta_layer, a_indices, prune_fraction, init_sampler, rng_seed):
    """One SET update on a layer: drop the smallest-magnitude active
    weights, regrow the same count at random inactive positions.

    Mutates theta_layer in place at the regrown positions, writing fresh
    values from init_sampler(count, rng). Returns the new sorted active
    set; cardinality is preserved. Dropped master values are left in
    place; they are masked out and would be overwritten on re-selection.
    """
    theta = np.asarray(theta_layer).reshape(-1)
    a = np.asarray(a_indices, dtype=np.int64)
    k = int(np.floor(prune_fraction * a.size))
    if k == 0:
        return a.copy()
    rng = np.random.default_rng(rng_seed)
    # Keep the |a|-k largest magnitudes; ties keep the lower flat index,
    # mirroring the top-k tie rule used everywhere else.
    mags = np.abs(theta[a])
    order = np.argsort(-mags, kind="stable")
    kept = np.sort(a[order[: a.size - k]])
    complement = np.setdiff1d(np.arange(theta.size, dtype=np.int64), a)
    if k > complement.size:
        raise ValueError(
            f"cannot regrow {k} connections: only {complement.size} inactive"
        )
    grown = np.sort(rng.choice(complement, size=k, replace=False))
    theta[grown] = np.asarray(init_sampler(k, rng), dtype=theta.dtype)
    return np.sort(np.concatenate([kept, grown]))
