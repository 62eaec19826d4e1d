"""Dense float64 tensors with a define-by-run reverse-mode differentiation tape.

The op set is deliberately closed: matmul, add, mul, relu, concat_last_axis,
mean, sum, plus detach, l2_normalize, softmax_cross_entropy and batch_norm.
Elementwise ops allow only exact shape matches, scalars, and trailing-axis
(bias-style) broadcasts; there is no general broadcasting.

A Tape is rebuilt per forward pass. Nodes are appended in execution order, so
insertion order is a topological order and backward() is a single reverse
sweep. Tensors and the tape they link to are confined to one thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray

DEFAULT_NORM_EPS = 1e-12
BATCH_NORM_EPS = 1e-5


def _as_array(values) -> Array:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A dense float64 value, optionally linked to a node on a Tape.

    Tensors are treated as immutable once created; ops return new tensors.
    ``grad`` is populated on tape leaves by :func:`backward`.
    """

    __slots__ = ("values", "grad", "tape", "tape_id")

    def __init__(self, values, tape: Optional["Tape"] = None, tape_id: Optional[int] = None):
        self.values = _as_array(values)
        self.grad: Optional[Array] = None
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return detach(self)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def __add__(self, other) -> "Tensor":
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _wrap(other))

    def __repr__(self) -> str:
        link = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor(shape={self.shape}{link})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Backward callbacks receive the output adjoint and return one gradient
# array per recorded (tape-linked) input, in input order.
BackwardFn = Callable[[Array], tuple]


@dataclass
class TapeNode:
    op_kind: str
    input_ids: tuple
    backward_fn: Optional[BackwardFn]


class Tape:
    """Append-only record of differentiable operations.

    Every node's inputs appear earlier in the sequence, so reverse insertion
    order is a valid order for the backward sweep. Saved activations live in
    each node's backward closure.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, values) -> Tensor:
        """Register ``values`` as a differentiable leaf (parameter or input)."""
        arr = values.values if isinstance(values, Tensor) else _as_array(values)
        node_id = self._append("leaf", (), None)
        t = Tensor(arr, self, node_id)
        self._leaves[node_id] = t
        return t

    def leaf_ids(self) -> tuple:
        return tuple(self._leaves.keys())

    def _append(self, op_kind: str, input_ids: Sequence[int], backward_fn) -> int:
        self.nodes.append(TapeNode(op_kind, tuple(input_ids), backward_fn))
        return len(self.nodes) - 1


def _record(op_kind: str, inputs: Sequence[Tensor], out_values: Array, grad_fns) -> Tensor:
    """Record one op on the (single) tape its inputs live on, if any.

    Detached tensors keep tape provenance but no node id; they anchor the
    result to the tape without contributing a gradient path.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError(f"{op_kind}: operands belong to different tapes")
    if tape is None:
        return Tensor(out_values)
    linked = [(t.tape_id, fn) for t, fn in zip(inputs, grad_fns) if t.tape_id is not None]
    input_ids = tuple(i for i, _ in linked)
    fns = tuple(fn for _, fn in linked)

    def backward_fn(gout: Array) -> tuple:
        return tuple(fn(gout) for fn in fns)

    node_id = tape._append(op_kind, input_ids, backward_fn)
    return Tensor(out_values, tape, node_id)


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar, tape-linked loss.

    Returns a map from tape_id to gradient Tensor covering every leaf on the
    tape; leaves unreachable from the loss get exact zeros. Each leaf's
    ``grad`` slot is populated as well.
    """
    if loss.tape is None:
        raise ContractError("backward: loss is not linked to a tape")
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    # A loss that is itself detached has no node; every leaf gets zeros.
    start = loss.tape_id if loss.tape_id is not None else -1
    adjoint: dict[int, Array] = {} if start < 0 else {start: np.ones_like(loss.values)}
    for node_id in range(start, -1, -1):
        gout = adjoint.get(node_id)
        if gout is None:
            continue
        node = tape.nodes[node_id]
        if node.backward_fn is None:
            continue
        for input_id, g in zip(node.input_ids, node.backward_fn(gout)):
            if g is None:
                continue
            prev = adjoint.get(input_id)
            adjoint[input_id] = g if prev is None else prev + g
    grads: dict[int, Tensor] = {}
    for node_id, leaf in tape._leaves.items():
        g = adjoint.get(node_id)
        if g is None:
            g = np.zeros_like(leaf.values)
        leaf.grad = g
        grads[node_id] = Tensor(g)
    return grads


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _check_elementwise(op_kind: str, sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, scalars, and trailing-axis broadcasts only."""
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op_kind}: cannot combine shapes {sa} and {sb}")


def _reduce_to(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    reduced = g.sum(axis=tuple(range(extra))) if extra else g
    return reduced.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("add", a.shape, b.shape)
    out = a.values + b.values
    return _record(
        "add",
        (a, b),
        out,
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise("mul", a.shape, b.shape)
    out = a.values * b.values
    av, bv = a.values, b.values
    return _record(
        "mul",
        (a, b),
        out,
        (lambda g: _reduce_to(g * bv, a.shape), lambda g: _reduce_to(g * av, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values
    return _record(
        "matmul",
        (a, b),
        out,
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.values > 0
    out = np.where(mask, x.values, 0.0)
    return _record("relu", (x,), out, (lambda g: g * mask,))


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_last_axis: needs at least one input")
    lead = tensors[0].shape[:-1] if tensors[0].values.ndim else None
    if lead is None:
        raise ShapeError("concat_last_axis: scalar inputs have no axis to concatenate")
    for t in tensors[1:]:
        if t.values.ndim != tensors[0].values.ndim or t.shape[:-1] != lead:
            raise ShapeError(
                "concat_last_axis: shapes must agree in all but the last axis, got "
                f"{[t.shape for t in tensors]}"
            )
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.values for t in tensors], axis=-1)

    def slice_fn(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[..., lo:hi]

    return _record("concat_last_axis", tensors, out, tuple(slice_fn(i) for i in range(len(tensors))))


def reduce_mean(x) -> Tensor:
    x = _wrap(x)
    out = np.asarray(x.values.mean())
    n = x.size
    shape = x.shape
    return _record("mean", (x,), out, (lambda g: np.full(shape, float(g) / n),))


def reduce_sum(x) -> Tensor:
    x = _wrap(x)
    out = np.asarray(x.values.sum())
    shape = x.shape
    return _record("sum", (x,), out, (lambda g: np.full(shape, float(g)),))


def detach(x) -> Tensor:
    """Same values, no tape node: consumers treat it as a constant.

    Tape provenance is retained so graphs built purely on detached values
    still resolve against the tape's leaves (with exact zero gradients).
    """
    x = _wrap(x)
    return Tensor(x.values, tape=x.tape, tape_id=None)


_FORWARD_OPS = {
    "matmul": (matmul, 2),
    "add": (add, 2),
    "mul": (mul, 2),
    "relu": (relu, 1),
    "concat_last_axis": (concat_last_axis, None),
    "mean": (reduce_mean, 1),
    "sum": (reduce_sum, 1),
}


def forward_op(op_kind: str, inputs: Sequence[Tensor]) -> Tensor:
    """Dispatch one of the closed op kinds over ``inputs``."""
    if op_kind not in _FORWARD_OPS:
        raise ContractError(f"forward_op: unknown op kind {op_kind!r}")
    fn, arity = _FORWARD_OPS[op_kind]
    if arity is None:
        return fn(list(inputs))
    if len(inputs) != arity:
        raise ContractError(f"forward_op: {op_kind} takes {arity} inputs, got {len(inputs)}")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------


def l2_normalize(x, axis: int = -1, eps: float = DEFAULT_NORM_EPS) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    The divisor is max(norm, eps), so slices with norm below eps (dead
    features) pass through scaled by 1/eps instead of producing NaN.
    """
    if eps <= 0:
        raise ContractError(f"l2_normalize: eps must be positive, got {eps}")
    x = _wrap(x)
    v = x.values
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v / denom
    keep = (norm >= eps).astype(np.float64)

    def gx(g: Array) -> Array:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (g - keep * out * inner) / denom

    return _record("l2_normalize", (x,), out, (gx,))


def softmax_cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Batch-mean (optionally class-weighted) softmax cross-entropy.

    logits: [B, L]; labels: length-B class indices; class_weights: optional
    length-L positive weights. Uses max-subtraction for stability. With all
    weights equal to 1 the result is bit-identical to the unweighted loss.
    """
    logits = _wrap(logits)
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B, L], got {logits.shape}")
    batch, num_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(
            f"softmax_cross_entropy: labels must have shape ({batch},), got {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(
            f"softmax_cross_entropy: label out of range [0, {num_classes})"
        )
    if class_weights is None:
        weights = np.ones(num_classes)
    else:
        weights = _as_array(class_weights)
        if weights.shape != (num_classes,):
            raise ShapeError(
                f"softmax_cross_entropy: class_weights must have shape ({num_classes},), "
                f"got {weights.shape}"
            )
        if np.any(weights <= 0):
            raise ContractError("softmax_cross_entropy: class_weights must be positive")

    v = logits.values
    shifted = v - v.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    per_sample_w = weights[labels]
    out = np.asarray((per_sample_w * -log_probs[rows, labels]).mean())
    probs = np.exp(log_probs)

    def glogits(g: Array) -> Array:
        grad = probs * (per_sample_w / batch)[:, None]
        grad[rows, labels] -= per_sample_w / batch
        return float(g) * grad

    return _record("softmax_cross_entropy", (logits,), out, (glogits,))


@dataclass
class NormStatsState:
    """Per-feature running statistics for one normalization layer.

    ``mode`` selects batch statistics (train) or running statistics (eval)
    at forward time. Exact whole-set recomputation uses the accumulator
    fields via begin/finish_accumulation and a parallel mean/M2 merge.
    """

    running_mean: Array
    running_var: Array
    mode: str = "train"  # "train" | "eval"
    accumulating: bool = False
    acc_count: int = 0
    acc_mean: Optional[Array] = None
    acc_m2: Optional[Array] = None

    @classmethod
    def for_features(cls, num_features: int) -> "NormStatsState":
        return cls(np.zeros(num_features), np.ones(num_features))

    def begin_accumulation(self) -> None:
        self.accumulating = True
        self.acc_count = 0
        self.acc_mean = np.zeros_like(self.running_mean)
        self.acc_m2 = np.zeros_like(self.running_var)

    def merge_batch(self, batch: Array) -> None:
        """Merge one chunk's statistics into the accumulator (order-exact)."""
        n_b = batch.shape[0]
        if n_b == 0:
            return
        mean_b = batch.mean(axis=0)
        m2_b = ((batch - mean_b) ** 2).sum(axis=0)
        n_a = self.acc_count
        total = n_a + n_b
        delta = mean_b - self.acc_mean
        self.acc_mean = self.acc_mean + delta * (n_b / total)
        self.acc_m2 = self.acc_m2 + m2_b + delta * delta * (n_a * n_b / total)
        self.acc_count = total

    def finish_accumulation(self) -> None:
        if self.acc_count == 0:
            raise ContractError("norm stats accumulation saw no data")
        self.running_mean = self.acc_mean
        self.running_var = self.acc_m2 / self.acc_count
        self.accumulating = False
        self.acc_mean = None
        self.acc_m2 = None
        self.mode = "eval"

    def clone(self) -> "NormStatsState":
        return NormStatsState(self.running_mean.copy(), self.running_var.copy(), self.mode)


def batch_norm(x, state: NormStatsState, gamma_scale, beta_shift, momentum: float) -> Tensor:
    """Normalize [B, F] activations per feature.

    Train mode uses batch statistics (population variance) and folds them
    into the running statistics as running <- (1-momentum)*running +
    momentum*batch. Eval mode normalizes by running statistics only. While
    a state is accumulating, the op behaves like eval and merges the raw
    input into the state's exact aggregate.
    """
    x, gamma_scale, beta_shift = _wrap(x), _wrap(gamma_scale), _wrap(beta_shift)
    if x.values.ndim != 2:
        raise ShapeError(f"batch_norm: input must be [B, F], got {x.shape}")
    batch = x.shape[0]
    v = x.values

    if state.accumulating:
        state.merge_batch(v)
        use_running = True
    elif state.mode == "train":
        if batch < 2:
            raise ContractError("batch_norm: train mode requires a batch of at least 2 samples")
        use_running = False
    else:
        use_running = True

    if use_running:
        inv_std = 1.0 / np.sqrt(state.running_var + BATCH_NORM_EPS)
        x_hat = (v - state.running_mean) * inv_std
        out = gamma_scale.values * x_hat + beta_shift.values
        gamma_v = gamma_scale.values

        def gx_eval(g: Array) -> Array:
            return g * gamma_v * inv_std

        return _record(
            "batch_norm",
            (x, gamma_scale, beta_shift),
            out,
            (gx_eval, lambda g: (g * x_hat).sum(axis=0), lambda g: g.sum(axis=0)),
        )

    mu = v.mean(axis=0)
    var = v.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BATCH_NORM_EPS)
    x_hat = (v - mu) * inv_std
    out = gamma_scale.values * x_hat + beta_shift.values
    state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
    state.running_var = (1.0 - momentum) * state.running_var + momentum * var
    gamma_v = gamma_scale.values

    def gx_train(g: Array) -> Array:
        g_hat = g * gamma_v
        return (inv_std / batch) * (
            batch * g_hat - g_hat.sum(axis=0) - x_hat * (g_hat * x_hat).sum(axis=0)
        )

    return _record(
        "batch_norm",
        (x, gamma_scale, beta_shift),
        out,
        (gx_train, lambda g: (g * x_hat).sum(axis=0), lambda g: g.sum(axis=0)),
    )
