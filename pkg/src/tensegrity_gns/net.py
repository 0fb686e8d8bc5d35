"""Differentiable numeric substrate: tape autodiff, MLP, LSTM, Adam.

A small reverse-mode engine over numpy arrays. Forward operations build
a DAG of :class:`Tensor` nodes; :func:`backward` walks it once and
accumulates exact gradients into the participating parameters. Shared
parameters (the same weight used across nodes, edges, or unrolled
steps) sum their gradients, which is what weight sharing requires.

Conventions: all activations are 2-d arrays (rows = batch of nodes or
edges, columns = features); float64 throughout so finite-difference
checks hold at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Tensor:
    """A value plus enough bookkeeping to backpropagate through it."""

    __slots__ = ("value", "grad", "parents", "bwd", "param")

    def __init__(self, value, parents=(), bwd=None, param=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.param = param

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape),
                             _unbroadcast(g * a.value, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul mismatch {a.shape} x {b.shape}")
    return Tensor(a.value @ b.value, (a, b),
                  lambda g: (g @ b.value.T, a.value.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(y, (a,), lambda g: (g * y * (1.0 - y),))


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor(np.concatenate(values, axis=axis), tuple(parts), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)
    return Tensor(a.value[..., start:stop], (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=int)

    def bwd(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)
    return Tensor(a.value[idx], (a,), bwd)


def segment_sum(a: Tensor, idx: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets given by `idx`."""
    idx = np.asarray(idx, dtype=int)
    out = np.zeros((num_segments,) + a.value.shape[1:])
    np.add.at(out, idx, a.value)
    return Tensor(out, (a,), lambda g: (g[idx],))


def sum_all(a: Tensor) -> Tensor:
    return Tensor(np.asarray(a.value.sum()), (a,),
                  lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise layer normalization with learnable scale and shift."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.value * xhat + beta.value

    def bwd(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        g_xhat = g * gamma.value
        g_x = inv * (g_xhat - g_xhat.mean(axis=-1, keepdims=True)
                     - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
        return (g_x, _unbroadcast(g_gamma, gamma.shape),
                _unbroadcast(g_beta, beta.shape))
    return Tensor(y, (a, gamma, beta), bwd)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients of parameter-bound leaves are accumulated (+=) into their
    :class:`ParamTensor.grad` arrays, so repeated appearances of a shared
    parameter across the graph sum correctly.
    """
    if loss.value.size != 1:
        raise TapeStateError("backward expects a scalar loss")
    if loss.bwd is None and not loss.parents and loss.param is None:
        raise TapeStateError("backward called on a tensor with no recorded forward")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.value)

    for node in reversed(topo):
        if node.bwd is None or node.grad is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g

    for node in topo:
        if node.param is not None and node.grad is not None:
            node.param.grad += node.grad


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamTensor:
    name: str
    shape: tuple
    values: np.ndarray
    grad: np.ndarray

    @property
    def size(self) -> int:
        return self.values.size


class ParamStore:
    """Named parameter registry shared by model components."""

    def __init__(self):
        self.params: dict[str, ParamTensor] = {}

    def add(self, name: str, values: np.ndarray) -> ParamTensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        values = np.asarray(values, dtype=float)
        p = ParamTensor(name=name, shape=values.shape, values=values,
                        grad=np.zeros_like(values))
        self.params[name] = p
        return p

    def glorot(self, name: str, fan_in: int, fan_out: int,
               rng: np.random.Generator, shape: tuple | None = None) -> ParamTensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape if shape is not None else (fan_in, fan_out)
        return self.add(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple) -> ParamTensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> ParamTensor:
        return self.add(name, np.ones(shape))

    def bind(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {name: Tensor(p.values, param=p) for name, p in self.params.items()}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def names(self) -> list[str]:
        return sorted(self.params.keys())

    def total_size(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([self.params[n].values.ravel() for n in self.names()])

    def set_flat_values(self, flat: np.ndarray) -> None:
        offset = 0
        for n in self.names():
            p = self.params[n]
            p.values[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise ShapeError("flat parameter vector has wrong length")

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.values.copy() for n, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            self.params[n].values[...] = v


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    in_width: int
    hidden_width: int
    out_width: int
    num_hidden_layers: int = 2
    activation: str = "relu"
    layer_norm_output: bool = False

    def __post_init__(self):
        if min(self.in_width, self.hidden_width, self.out_width) <= 0:
            raise ShapeError("MLP widths must be positive")
        if self.num_hidden_layers < 1:
            raise ShapeError("MLP needs at least one hidden layer")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation}")


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec,
             rng: np.random.Generator) -> None:
    widths = [spec.in_width] + [spec.hidden_width] * spec.num_hidden_layers \
        + [spec.out_width]
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.glorot(f"{prefix}.W{i}", w_in, w_out, rng)
        store.zeros(f"{prefix}.b{i}", (w_out,))
    if spec.layer_norm_output:
        store.ones(f"{prefix}.ln_g", (spec.out_width,))
        store.zeros(f"{prefix}.ln_b", (spec.out_width,))


def mlp_forward(spec: MlpSpec, bound: dict[str, Tensor], prefix: str,
                x: Tensor) -> Tensor:
    if x.value.shape[-1] != spec.in_width:
        raise ShapeError(
            f"{prefix}: input width {x.value.shape[-1]} != spec {spec.in_width}")
    h = x
    n_layers = spec.num_hidden_layers + 1
    for i in range(n_layers):
        h = add(matmul(h, bound[f"{prefix}.W{i}"]), bound[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    if spec.layer_norm_output:
        h = layer_norm(h, bound[f"{prefix}.ln_g"], bound[f"{prefix}.ln_b"])
    return h


# ---------------------------------------------------------------------------
# LSTM cell (gate order: input, forget, candidate, output)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LstmSpec:
    input_width: int
    state_width: int

    def __post_init__(self):
        if self.input_width <= 0 or self.state_width <= 0:
            raise ShapeError("LSTM widths must be positive")


def init_lstm(store: ParamStore, prefix: str, spec: LstmSpec,
              rng: np.random.Generator) -> None:
    four = 4 * spec.state_width
    store.glorot(f"{prefix}.Wx", spec.input_width, four, rng)
    store.glorot(f"{prefix}.Wh", spec.state_width, four, rng)
    store.zeros(f"{prefix}.b", (four,))


def lstm_step(spec: LstmSpec, bound: dict[str, Tensor], prefix: str,
              x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    if x.value.shape[-1] != spec.input_width:
        raise ShapeError(f"{prefix}: LSTM input width {x.value.shape[-1]}"
                         f" != spec {spec.input_width}")
    if h.value.shape[-1] != spec.state_width or c.value.shape[-1] != spec.state_width:
        raise ShapeError(f"{prefix}: LSTM state width mismatch")
    z = add(add(matmul(x, bound[f"{prefix}.Wx"]), matmul(h, bound[f"{prefix}.Wh"])),
            bound[f"{prefix}.b"])
    w = spec.state_width
    i = sigmoid(slice_cols(z, 0, w))
    f = sigmoid(slice_cols(z, w, 2 * w))
    g = tanh(slice_cols(z, 2 * w, 3 * w))
    o = sigmoid(slice_cols(z, 3 * w, 4 * w))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# optimizer: Adam with bias correction and per-epoch learning-rate decay
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    decay_rate: float = 0.995
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(opt: OptimizerState, store: ParamStore) -> None:
    """Adaptive-moment update; zeroes gradients afterwards."""
    opt.step_count += 1
    t = opt.step_count
    for name in store.names():
        p = store.params[name]
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.values)
            opt.v[name] = np.zeros_like(p.values)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1.0 - opt.beta1 ** t)
        v_hat = opt.v[name] / (1.0 - opt.beta2 ** t)
        p.values -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)
        p.grad[...] = 0.0


def decay_learning_rate(opt: OptimizerState) -> None:
    """Applied once per epoch by the training loop."""
    opt.learning_rate *= opt.decay_rate
