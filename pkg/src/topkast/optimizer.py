"""The sparse update rule: primary-loss gradients on the backward set B,
the exploration regularizer, SGD with optional momentum, the learning-rate
schedule, and the ablation switches (random B selection, exploration stop).

Master weights outside B are never written; that restriction is asserted,
not assumed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .masking import (
    MaskPair,
    apply_mask,
    compute_masks,
    is_subset,
    random_b_complement,
    refresh_due,
)
from .tensor import SparseGrad


class SupportViolation(RuntimeError):
    """A gradient record carries indices outside the layer's backward set."""


B_SELECTION_TOPK = "topk"
B_SELECTION_RANDOM = "random"

# Stream tags for stateless per-step RNG derivation (seed, stream, step).
MASK_STREAM = 1


@dataclass
class AblationSwitches:
    b_selection: str = B_SELECTION_TOPK
    stop_exploration_at_step: int = None
    reg_exponent: int = 1

    def __post_init__(self):
        if self.b_selection not in (B_SELECTION_TOPK, B_SELECTION_RANDOM):
            raise ValueError(f"unknown b_selection {self.b_selection!r}")
        if self.reg_exponent not in (1, 2):
            raise ValueError("reg_exponent must be 1 or 2")


@dataclass
class OptimizerState:
    """Everything the update rule reads and writes.

    velocity buffers are dense-shaped for simplicity but only entries inside
    B are meaningful; entries leaving B keep stale values unless
    zero_momentum_on_mask_change is set.
    """

    store: "DenseParamStore"
    spec: "SparsitySpec"
    masks: MaskPair = None
    step: int = 0
    learning_rate: float = 0.1
    reg_coeff: float = 1e-4
    momentum: float = 0.0
    velocity: dict = None
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    zero_momentum_on_mask_change: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.momentum > 0 and self.velocity is None:
            self.velocity = {
                name: np.zeros(self.store.size(name), dtype=self.store.get(name).dtype)
                for name in self.store.names()
            }

    def exploration_stopped(self):
        stop = self.ablation.stop_exploration_at_step
        return stop is not None and self.step >= stop


def exploration_loss(theta_layer, a_indices, b_indices, d, exponent=1):
    """Magnitude penalty: |theta|^p on A plus |theta|^p / D on B \\ A.

    Weights outside B are not penalized at all. D must be positive; the
    1/D scaling on the exploration slice grows as the network gets sparser.
    """
    if d <= 0:
        raise ValueError("density d must be positive")
    theta = np.asarray(theta_layer).reshape(-1)
    a = np.asarray(a_indices, dtype=np.int64)
    b = np.asarray(b_indices, dtype=np.int64)
    if not is_subset(a, b):
        raise ValueError("a must be a subset of b")
    b_not_a = np.setdiff1d(b, a, assume_unique=True)
    pa = np.abs(theta[a]) ** exponent
    pe = np.abs(theta[b_not_a]) ** exponent
    return float(pa.sum() + pe.sum() / d)


def exploration_grad(theta_layer, a_indices, b_indices, d, exponent=1):
    """Gradient of exploration_loss; support is exactly b_indices.

    p=1 uses the sign subgradient with sign(0) = 0; p=2 is 2*theta. The
    B \\ A slice is scaled by 1/D, same as the loss.
    """
    if d <= 0:
        raise ValueError("density d must be positive")
    theta = np.asarray(theta_layer).reshape(-1)
    a = np.asarray(a_indices, dtype=np.int64)
    b = np.asarray(b_indices, dtype=np.int64)
    if not is_subset(a, b):
        raise ValueError("a must be a subset of b")
    tb = theta[b]
    if exponent == 1:
        vals = np.sign(tb)
    elif exponent == 2:
        vals = 2.0 * tb
    else:
        raise ValueError("exponent must be 1 or 2")
    in_a = np.isin(b, a, assume_unique=True)
    vals = np.where(in_a, vals, vals / theta.dtype.type(d))
    return SparseGrad("", b.copy(), vals.astype(theta.dtype))


def _merge_records(primary, reg, lam):
    """Combine primary + lam*reg on the union of their supports."""
    if reg is None or lam == 0.0 or reg.indices.size == 0:
        return primary.indices, primary.values
    if np.array_equal(primary.indices, reg.indices):
        return primary.indices, primary.values + primary.values.dtype.type(lam) * reg.values
    union = np.union1d(primary.indices, reg.indices)
    out = np.zeros(union.size, dtype=primary.values.dtype)
    out[np.searchsorted(union, primary.indices)] += primary.values
    out[np.searchsorted(union, reg.indices)] += primary.values.dtype.type(lam) * reg.values
    return union, out


def apply_update(state, primary_grads, reg_grads=None, lr=None):
    """One SGD(+momentum) write: theta_i -= lr * (primary_i + lam * reg_i).

    Every record's support must lie inside the layer's backward set; a
    violation raises instead of silently densifying the update. Layers the
    mask pair does not cover (biases) update densely. Increments the step
    counter.
    """
    lr = state.learning_rate if lr is None else lr
    reg_by_name = {}
    if reg_grads:
        reg_by_name = {g.param: g for g in reg_grads}
    masked = set(state.masks.b_indices) if state.masks is not None else set()
    for grad in primary_grads:
        name = grad.param
        theta = state.store.flat(name)
        if name in masked:
            b = state.masks.b_indices[name]
            if grad.indices.size and not is_subset(grad.indices, b):
                raise SupportViolation(
                    f"primary gradient for {name!r} leaves the backward set"
                )
            reg = reg_by_name.get(name)
            if reg is not None and reg.indices.size and not is_subset(reg.indices, b):
                raise SupportViolation(
                    f"regularizer gradient for {name!r} leaves the backward set"
                )
        idx, vals = _merge_records(grad, reg_by_name.get(name), state.reg_coeff)
        if idx.size == 0:
            continue
        if state.momentum > 0:
            v = state.velocity[name]
            v[idx] = theta.dtype.type(state.momentum) * v[idx] + vals
            step_vals = v[idx]
        else:
            step_vals = vals
        theta[idx] -= theta.dtype.type(lr) * step_vals
    state.step += 1
    return state


def rebuild_masks(state):
    """Recompute MaskPair from the current master weights.

    Honors the ablation switches: random B complement sampling (seeded
    statelessly by (seed, stream, step)) and the exploration stop, which
    freezes B to A. Biases are not masked and do not appear in the pair.
    """
    spec = state.spec
    stopped = state.exploration_stopped()
    a_sets, b_sets = {}, {}
    for name in state.store.maskable_names():
        theta = state.store.flat(name)
        a, b = compute_masks(theta, spec, layer_name=name)
        if stopped:
            b = a.copy()
        elif state.ablation.b_selection == B_SELECTION_RANDOM and b.size > a.size:
            rng = np.random.default_rng([state.seed, MASK_STREAM, state.step, hash_name(name)])
            b = random_b_complement(theta, a, b.size - a.size, rng)
        a_sets[name] = a
        b_sets[name] = b
    new_masks = MaskPair(a_sets, b_sets, step_built=state.step)
    if state.zero_momentum_on_mask_change and state.velocity is not None:
        for name, b in b_sets.items():
            keep = np.zeros(state.store.size(name), dtype=bool)
            keep[b] = True
            state.velocity[name][~keep] = 0.0
    state.masks = new_masks
    return new_masks


def hash_name(name):
    """Stable small integer for a layer name, usable in a seed sequence."""
    return sum((i + 1) * ord(c) for i, c in enumerate(name)) % (2**31)


def masked_view(state):
    """The sparse parameter dict alpha: masked weights, biases as-is."""
    alpha = {}
    for name in state.store.names():
        arr = state.store.get(name)
        if state.masks is not None and name in state.masks.a_indices:
            alpha[name] = apply_mask(arr.reshape(-1), state.masks.a_indices[name]).reshape(arr.shape)
        else:
            alpha[name] = arr
    return alpha


def effective_b(state):
    """Backward sets for this step: B, or A while exploration is stopped."""
    masks = state.masks
    if state.exploration_stopped():
        return {name: masks.a_indices[name] for name in masks.a_indices}
    return dict(masks.b_indices)


def train_step(state, graph, x, y, lr=None):
    """One full sparse training step; mutates state, returns step metrics.

    Order: refresh masks when due, materialize the masked view, forward,
    backward restricted to B (biases dense), exploration gradients on B,
    apply the combined update. The loss reported is the primary loss.
    """
    t0 = time.perf_counter()
    refreshed = False
    if state.masks is None or refresh_due(state.step, state.spec):
        rebuild_masks(state)
        refreshed = True

    alpha = masked_view(state)
    loss = graph.forward(alpha, x, y)

    b_eff = effective_b(state)
    active = dict(b_eff)
    for name in state.store.names():
        if name not in active:
            active[name] = np.arange(state.store.size(name), dtype=np.int64)
    primary = graph.backward(1.0, active)

    reg = None
    reg_loss = 0.0
    if state.reg_coeff > 0:
        reg = []
        p = state.ablation.reg_exponent
        for name in state.store.maskable_names():
            theta = state.store.flat(name)
            a, b = state.masks.a_indices[name], b_eff[name]
            rec = exploration_grad(theta, a, b, state.spec.d, p)
            rec.param = name
            reg.append(rec)
            reg_loss += exploration_loss(theta, a, b, state.spec.d, p)

    apply_update(state, primary, reg, lr=lr)
    return {
        "loss": float(loss),
        "reg_loss": reg_loss,
        "refreshed": refreshed,
        "lr": state.learning_rate if lr is None else lr,
        "duration_s": time.perf_counter() - t0,
    }


def lr_schedule(base_lr, step, total_steps, warmup_frac=0.05,
                decay_milestones=(0.6, 0.85), decay_factor=0.1):
    """Linear warmup to base_lr, then multiplicative drops at milestones."""
    warmup_steps = int(round(warmup_frac * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    lr = base_lr
    for frac in decay_milestones:
        if step >= int(round(frac * total_steps)):
            lr *= decay_factor
    return lr
