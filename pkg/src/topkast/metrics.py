"""Mask-dynamics instrumentation and training-cost accounting.

Churn measures the normalized symmetric difference between active masks at
two points in training; the reservoir fraction tracks how much of the
never-selected-at-init weight pool the active set ever reaches. FLOP
estimates report what true sparse kernels would cost for the masked-dense
execution actually performed; the counting convention is stated on the
report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FLOP_CONVENTION = (
    "2 flops per multiply-add; per linear layer (n x m) and example: "
    "dense forward 2nm; sparse forward 2*D*nm; backward splits into the "
    "input-activation gradient at forward density (2*D*nm) plus the "
    "weight gradient at backward density (2*(D+M)*nm); top-k overhead is "
    "nm*log2(nm) comparisons per refresh, amortized over the refresh "
    "period. Bias and activation flops are not counted."
)


@dataclass
class MaskSnapshot:
    """Active-mask bitmaps for every masked layer at one step."""

    step: int
    bits: dict

    @classmethod
    def from_masks(cls, step, masks, layer_sizes):
        bits = {}
        for name, a in masks.a_indices.items():
            m = np.zeros(int(layer_sizes[name]), dtype=bool)
            m[a] = True
            bits[name] = m
        return cls(step, bits)


@dataclass
class ChurnStats:
    per_layer: dict
    min: float
    mean: float
    max: float


def mask_churn(snap_a, snap_b):
    """Fraction of mask bits that differ, per layer and min/mean/max."""
    if set(snap_a.bits) != set(snap_b.bits):
        raise ValueError("snapshots cover different layers")
    per_layer = {}
    for name, m1 in snap_a.bits.items():
        m2 = snap_b.bits[name]
        if m1.shape != m2.shape:
            raise ValueError(f"layer {name!r}: mask sizes differ")
        per_layer[name] = float(np.count_nonzero(m1 != m2) / m1.size)
    vals = list(per_layer.values())
    return ChurnStats(per_layer, min(vals), sum(vals) / len(vals), max(vals))


def reservoir_activation(c0, a_history):
    """Fraction of the initial reservoir that the active set ever touched.

    c0 is the index set outside B at step 0; a_history is the union of all
    active sets so far. Empty reservoirs count as 0.
    """
    c0 = np.asarray(c0, dtype=np.int64)
    if c0.size == 0:
        return 0.0
    hist = np.asarray(a_history, dtype=np.int64)
    return float(np.intersect1d(c0, hist).size / c0.size)


class ReservoirTracker:
    """Aggregates reservoir activation across layers over a run.

    The reservoir C0 is fixed at step 0 as the complement of the initial
    backward set; the tracked fraction is monotone non-decreasing.
    """

    def __init__(self, initial_masks, layer_sizes):
        self.c0 = {}
        self.hist = {}
        for name, b in initial_masks.b_indices.items():
            n = int(layer_sizes[name])
            inside = np.zeros(n, dtype=bool)
            inside[b] = True
            self.c0[name] = ~inside
            self.hist[name] = np.zeros(n, dtype=bool)
        self.update(initial_masks)

    def update(self, masks):
        for name, a in masks.a_indices.items():
            self.hist[name][a] = True

    def fraction(self):
        hits = sum(int(np.count_nonzero(self.c0[n] & self.hist[n])) for n in self.c0)
        total = sum(int(np.count_nonzero(self.c0[n])) for n in self.c0)
        return hits / total if total else 0.0


@dataclass
class LayerFlops:
    name: str
    n: int
    m: int
    density: float
    backward_density: float
    dense_fwd: float
    sparse_fwd: float
    dense_bwd: float
    sparse_bwd: float
    topk_per_step: float
    # Closed-form ratios (exact by construction, not float quotients).
    fwd_ratio: float
    input_grad_ratio: float
    weight_grad_ratio: float
    bwd_ratio: float


@dataclass
class FlopReport:
    convention: str
    layers: list
    dense_fwd: float = 0.0
    sparse_fwd: float = 0.0
    dense_bwd: float = 0.0
    sparse_bwd: float = 0.0
    topk_per_step: float = 0.0
    fwd_ratio: float = 0.0
    bwd_ratio: float = 0.0

    def summary_lines(self):
        lines = [self.convention, ""]
        for l in self.layers:
            lines.append(
                f"{l.name}: {l.n}x{l.m} D={l.density:.4g} "
                f"fwd_ratio={l.fwd_ratio:.4g} weight_grad_ratio={l.weight_grad_ratio:.4g}"
            )
        lines.append(
            f"total: fwd_ratio={self.fwd_ratio:.6g} bwd_ratio={self.bwd_ratio:.6g} "
            f"topk_per_step={self.topk_per_step:.6g}"
        )
        return lines


def flop_estimate(graph, spec):
    """Per-example FLOP accounting for every matmul layer in the graph.

    Dense-exempt layers count at density 1. Totals are layer sums; the
    total ratios divide summed counts, while per-layer ratios are the
    closed forms D and D+M.
    """
    layers = []
    for node in graph.nodes:
        if node.op != "matmul":
            continue
        name = node.param
        n, m = graph.param_shapes[name]
        exempt = name in spec.dense_exempt_layers
        d = 1.0 if exempt else spec.d
        dm = 1.0 if exempt else min(1.0, spec.d + spec.m)
        params = n * m
        dense_fwd = 2.0 * params
        sparse_fwd = d * dense_fwd
        dense_bwd = 4.0 * params  # 2nm input grad + 2nm weight grad
        sparse_bwd = d * 2.0 * params + dm * 2.0 * params
        topk = 0.0 if exempt else params * math.log2(params) / spec.refresh_period
        layers.append(
            LayerFlops(
                name=name,
                n=n,
                m=m,
                density=d,
                backward_density=dm,
                dense_fwd=dense_fwd,
                sparse_fwd=sparse_fwd,
                dense_bwd=dense_bwd,
                sparse_bwd=sparse_bwd,
                topk_per_step=topk,
                fwd_ratio=d,
                input_grad_ratio=d,
                weight_grad_ratio=dm,
                bwd_ratio=(d + dm) / 2.0,
            )
        )
    report = FlopReport(convention=FLOP_CONVENTION, layers=layers)
    for l in layers:
        report.dense_fwd += l.dense_fwd
        report.sparse_fwd += l.sparse_fwd
        report.dense_bwd += l.dense_bwd
        report.sparse_bwd += l.sparse_bwd
        report.topk_per_step += l.topk_per_step
    if layers:
        report.fwd_ratio = report.sparse_fwd / report.dense_fwd
        report.bwd_ratio = report.sparse_bwd / report.dense_bwd
    return report
