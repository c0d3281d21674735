"""Dense tensors and a sequential MLP compute graph with reverse-mode
differentiation whose parameter gradients are restricted to declared index
sets.

The graph is a chain of primitive ops (matmul, bias-add, relu, fused
softmax-cross-entropy, fused mean-squared-error, elementwise add/scale).
Forward records the activations needed for backward; backward emits, per
parameter slot, gradient values only at the requested flat indices and never
materializes entries outside those sets. Input-activation gradients are
computed densely per example, as the chain rule requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Shape of an input, parameter, or target does not fit the graph."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in an intermediate or output value."""


class GraphStateError(RuntimeError):
    """Graph used out of order, e.g. backward before forward."""


def require_finite(values, context):
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite values in {context}")


class Tensor:
    """Row-major dense tensor: an explicit shape over a flat value buffer."""

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"dimensions must be positive, got {shape}")
        data = np.asarray(data)
        if data.ndim != 1:
            raise DimensionError("data buffer must be flat (1-D)")
        if data.dtype not in FLOAT_DTYPES:
            data = data.astype(np.float64)
        n = int(np.prod(shape))
        if n != data.size:
            raise DimensionError(
                f"shape {shape} holds {n} scalars but data has {data.size}"
            )
        require_finite(data, "tensor data")
        self.shape = shape
        self.data = data

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        return cls(arr.shape if arr.ndim > 0 else (1,), arr.reshape(-1))

    def to_array(self):
        return self.data.reshape(self.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype):
        return Tensor(self.shape, self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class DenseParamStore:
    """Named dense master parameter arrays.

    Weight matrices are maskable; bias vectors are registered with
    maskable=False and always train dense.
    """

    def __init__(self):
        self._arrays = {}
        self._maskable = {}

    def add(self, name, array, maskable=True):
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        array = np.ascontiguousarray(array)
        if array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        self._arrays[name] = array
        self._maskable[name] = bool(maskable)

    def get(self, name):
        return self._arrays[name]

    def flat(self, name):
        # C-contiguous, so this is a writable view over the same memory.
        return self._arrays[name].reshape(-1)

    def is_maskable(self, name):
        return self._maskable[name]

    def names(self):
        return list(self._arrays)

    def maskable_names(self):
        return [n for n in self._arrays if self._maskable[n]]

    def shape(self, name):
        return self._arrays[name].shape

    def size(self, name):
        return self._arrays[name].size

    def as_dict(self):
        return dict(self._arrays)

    def copy(self):
        clone = DenseParamStore()
        for name, arr in self._arrays.items():
            clone.add(name, arr.copy(), self._maskable[name])
        return clone

    def astype(self, dtype):
        clone = DenseParamStore()
        for name, arr in self._arrays.items():
            clone.add(name, arr.astype(dtype), self._maskable[name])
        return clone


@dataclass
class SparseGrad:
    """Gradient values for one parameter slot at the given flat indices."""

    param: str
    indices: np.ndarray
    values: np.ndarray

    def to_dense(self, shape):
        out = np.zeros(int(np.prod(shape)), dtype=self.values.dtype)
        out[self.indices] = self.values
        return out.reshape(shape)


# Node kinds understood by the graph walker.
MATMUL = "matmul"
BIAS_ADD = "bias_add"
RELU = "relu"
SOFTMAX_XENT = "softmax_xent"
MSE = "mse"
ADD = "add"
SCALE = "scale"

LOSS_OPS = (SOFTMAX_XENT, MSE)


@dataclass
class Node:
    op: str
    param: str = None
    const: float = None


class ComputeGraph:
    """Acyclic chain of primitive ops over one running activation.

    Nodes execute in sequence (the topological order is the list order);
    each parameter slot is bound to exactly one layer of a DenseParamStore
    by name. An instance holds the activation trace between a forward and
    the matching backward, so it is single-context during that pair.
    """

    def __init__(self, nodes, param_shapes, input_dim):
        self.nodes = list(nodes)
        self.param_shapes = dict(param_shapes)
        self.input_dim = int(input_dim)
        self.param_slots = [n.param for n in self.nodes if n.param is not None]
        if len(set(self.param_slots)) != len(self.param_slots):
            raise ValueError("each parameter slot may be bound only once")
        for slot in self.param_slots:
            if slot not in self.param_shapes:
                raise ValueError(f"no shape declared for parameter {slot!r}")
        self._trace = None

    @property
    def has_loss(self):
        return bool(self.nodes) and self.nodes[-1].op in LOSS_OPS

    def _check_params(self, params):
        for slot in self.param_slots:
            if slot not in params:
                raise DimensionError(f"missing parameter {slot!r}")
            got = params[slot].shape
            want = self.param_shapes[slot]
            if tuple(got) != tuple(want):
                raise DimensionError(
                    f"parameter {slot!r}: expected shape {want}, got {got}"
                )

    def forward(self, params, x, targets=None):
        """Run the chain on a batch; records activations for backward.

        params maps slot name to an array of the declared shape (pass the
        masked view for sparse training). x is (batch, input_dim) or a
        single (input_dim,) example; a Tensor is accepted for either. The
        output depends only on the nonzero entries of the masked params.
        """
        if isinstance(x, Tensor):
            x = x.to_array()
        params = {
            k: (v.to_array() if isinstance(v, Tensor) else np.asarray(v))
            for k, v in params.items()
        }
        self._check_params(params)
        x = np.asarray(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"input must be (batch, {self.input_dim}), got {x.shape}"
            )

        trace = {"params": params, "acts": [], "single": single}
        h = x
        for i, node in enumerate(self.nodes):
            rec = {"input": h}
            if node.op == MATMUL:
                w = params[node.param]
                if h.shape[1] != w.shape[0]:
                    raise DimensionError(
                        f"node {i} (matmul {node.param!r}): input width "
                        f"{h.shape[1]} vs weight rows {w.shape[0]}"
                    )
                h = h @ w
            elif node.op == BIAS_ADD:
                b = params[node.param]
                if h.shape[1] != b.shape[0]:
                    raise DimensionError(
                        f"node {i} (bias_add {node.param!r}): width "
                        f"{h.shape[1]} vs bias length {b.shape[0]}"
                    )
                h = h + b
            elif node.op == RELU:
                # Subgradient at exactly 0 is 0: the mask is strict.
                rec["mask"] = h > 0
                h = np.maximum(h, 0)
            elif node.op == SOFTMAX_XENT:
                if targets is None:
                    raise GraphStateError("softmax_xent needs integer targets")
                labels = np.asarray(targets).reshape(-1)
                if labels.shape[0] != h.shape[0]:
                    raise DimensionError(
                        f"node {i} (softmax_xent): {h.shape[0]} logits rows "
                        f"vs {labels.shape[0]} labels"
                    )
                shifted = h - h.max(axis=1, keepdims=True)
                logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
                logp = shifted - logz
                rec["probs"] = np.exp(logp)
                rec["labels"] = labels
                h = -logp[np.arange(h.shape[0]), labels].mean(dtype=h.dtype)
            elif node.op == MSE:
                if targets is None:
                    raise GraphStateError("mse needs target values")
                t = np.asarray(targets, dtype=h.dtype)
                if t.ndim == 1:
                    t = t[:, None] if h.ndim == 2 and h.shape[1] == 1 else t
                if t.shape != h.shape:
                    raise DimensionError(
                        f"node {i} (mse): output {h.shape} vs targets {t.shape}"
                    )
                rec["resid"] = h - t
                h = (rec["resid"] ** 2).mean(dtype=h.dtype)
            elif node.op == ADD:
                h = h + h.dtype.type(node.const)
            elif node.op == SCALE:
                h = h * h.dtype.type(node.const)
            else:
                raise ValueError(f"unknown op {node.op!r}")
            require_finite(h, f"node {i} ({node.op})")
            rec["output"] = h
            trace["acts"].append(rec)
        self._trace = trace
        out = h
        if single and getattr(out, "ndim", 0) == 2:
            out = out[0]
        return out

    def backward(self, loss_grad_seed, active_grad_sets):
        """Backpropagate from a scalar output, emitting sparse param grads.

        active_grad_sets maps slot name to a sorted array of flat indices;
        slots absent from the mapping get an empty gradient record. Returns
        one SparseGrad per parameter slot, in slot order.
        """
        if self._trace is None:
            raise GraphStateError("backward called before forward")
        trace = self._trace
        params = trace["params"]
        final = trace["acts"][-1]["output"]
        if np.ndim(final) != 0:
            raise GraphStateError(
                "backward needs a scalar-valued graph (end with a loss op)"
            )
        dtype = final.dtype
        grads = {}

        g = np.asarray(loss_grad_seed, dtype=dtype)
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            rec = trace["acts"][i]
            x = rec["input"]
            if node.op == MATMUL:
                w = params[node.param]
                m = w.shape[1]
                idx = self._slot_indices(node.param, active_grad_sets)
                if idx.size:
                    rows, cols = idx // m, idx % m
                    vals = (x[:, rows] * g[:, cols]).sum(axis=0)
                else:
                    vals = np.zeros(0, dtype=dtype)
                grads[node.param] = SparseGrad(node.param, idx, vals)
                g = g @ w.T
            elif node.op == BIAS_ADD:
                idx = self._slot_indices(node.param, active_grad_sets)
                vals = g[:, idx].sum(axis=0) if idx.size else np.zeros(0, dtype=dtype)
                grads[node.param] = SparseGrad(node.param, idx, vals)
            elif node.op == RELU:
                g = g * rec["mask"]
            elif node.op == SOFTMAX_XENT:
                probs, labels = rec["probs"], rec["labels"]
                batch = probs.shape[0]
                gl = probs.copy()
                gl[np.arange(batch), labels] -= 1
                g = gl * (g / dtype.type(batch))
            elif node.op == MSE:
                resid = rec["resid"]
                g = resid * (g * dtype.type(2.0 / resid.size))
            elif node.op == ADD:
                pass
            elif node.op == SCALE:
                g = g * dtype.type(node.const)
        return [grads[slot] for slot in self.param_slots]

    def _slot_indices(self, slot, active_grad_sets):
        idx = active_grad_sets.get(slot)
        if idx is None:
            return np.zeros(0, dtype=np.int64)
        idx = np.asarray(idx, dtype=np.int64)
        n = int(np.prod(self.param_shapes[slot]))
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"active set for {slot!r} out of bounds (size {n})")
        return idx

    def output_width(self):
        """Width of the activation feeding the final (loss) node."""
        width = self.input_dim
        for node in self.nodes:
            if node.op == MATMUL:
                width = self.param_shapes[node.param][1]
        return width


def mlp_graph(layer_dims, loss=SOFTMAX_XENT, prefix=""):
    """Build a relu MLP chain over the given dims, e.g. [784, 300, 100, 10].

    Parameters are named w0/b0, w1/b1, ... Hidden layers get relu; the final
    linear output feeds the fused loss node (or no loss when loss=None).
    """
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dims")
    nodes = []
    shapes = {}
    for i in range(len(layer_dims) - 1):
        w, b = f"{prefix}w{i}", f"{prefix}b{i}"
        shapes[w] = (layer_dims[i], layer_dims[i + 1])
        shapes[b] = (layer_dims[i + 1],)
        nodes.append(Node(MATMUL, param=w))
        nodes.append(Node(BIAS_ADD, param=b))
        if i < len(layer_dims) - 2:
            nodes.append(Node(RELU))
    if loss is not None:
        if loss not in LOSS_OPS:
            raise ValueError(f"unknown loss {loss!r}")
        nodes.append(Node(loss))
    return ComputeGraph(nodes, shapes, layer_dims[0])


def init_mlp_params(layer_dims, seed, dtype=np.float32, prefix=""):
    """He-initialized DenseParamStore matching mlp_graph's naming.

    Returns the store plus the per-layer weight init scales (SET regrowth
    draws fresh weights from the same distribution).
    """
    rng = np.random.default_rng(seed)
    store = DenseParamStore()
    scales = {}
    for i in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
        store.add(f"{prefix}w{i}", w, maskable=True)
        store.add(f"{prefix}b{i}", np.zeros(fan_out, dtype=dtype), maskable=False)
        scales[f"{prefix}w{i}"] = std
    return store, scales


def finite_diff_grad(graph, params, x, targets, param_name, offset, h=1e-5):
    """Central finite difference of the scalar graph output at one weight.

    Requires 64-bit parameters; perturbs params[param_name] at flat index
    offset by +/- h and returns the symmetric difference quotient.
    """
    arr = np.asarray(params[param_name])
    if arr.dtype != np.float64:
        raise ValueError("finite_diff_grad requires float64 parameters")
    flat = arr.reshape(-1).copy()
    base = flat[offset]

    def loss_at(value):
        flat[offset] = value
        probe = dict(params)
        probe[param_name] = flat.reshape(arr.shape)
        return float(graph.forward(probe, x, targets))

    hi = loss_at(base + h)
    lo = loss_at(base - h)
    flat[offset] = base
    return (hi - lo) / (2.0 * h)
