"""Dense feed-forward networks with explicit caches and hand-derived backprop.

There is no autodiff graph anywhere in this package: each layer's backward
pass is written out so the split execution can ship exact gradient payloads
between parties.  `finite_diff_grads` is the independent oracle used by the
test suite and the `gradcheck` command; it only ever calls the forward pass.

Conventions: batches are row-major (`x` is batch x features), a layer
computes ``a = act(x @ W + b)`` with `W` of shape in_dim x out_dim, and all
parameters live in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Matrix, Rng, matmul, transpose

__all__ = [
    "ACTIVATIONS",
    "DenseLayer",
    "Mlp",
    "ForwardCache",
    "GradientSet",
    "SgdConfig",
    "SgdState",
    "init_mlp",
    "forward",
    "backward",
    "softmax_cross_entropy",
    "sgd_step",
    "finite_diff_grads",
    "count_params",
    "count_flops_per_sample",
]

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return np.array(z)


def _activation_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d act/d z, from the cached pre-activation z and post-activation a."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """One affine map plus activation: ``a = act(x @ weights + bias)``."""

    weights: Matrix
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != self.weights.cols:
            raise ShapeError(
                f"bias length {b.shape[0]} does not match {self.weights.cols} output units"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        b.setflags(write=False)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.rows

    @property
    def out_dim(self) -> int:
        return self.weights.cols


@dataclass(frozen=True, eq=False)
class Mlp:
    """A chain of dense layers; consecutive dims must agree."""

    layers: tuple[DenseLayer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("Mlp needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.out_dim != cur.in_dim:
                raise ShapeError(
                    f"layer {i - 1} outputs {prev.out_dim} units but layer {i} expects {cur.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Per-layer pre/post activations for one batch, plus the batch input."""

    x: Matrix
    pre: tuple[Matrix, ...]
    post: tuple[Matrix, ...]

    @property
    def depth(self) -> int:
        return len(self.pre)


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Loss gradients for every parameter of one Mlp, layer by layer."""

    weights: tuple[Matrix, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if not (self.learning_rate >= 0.0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True, eq=False)
class SgdState:
    """Momentum buffers, one per parameter tensor."""

    w_vel: tuple[np.ndarray, ...]
    b_vel: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, net: Mlp) -> "SgdState":
        return cls(
            tuple(np.zeros((l.in_dim, l.out_dim)) for l in net.layers),
            tuple(np.zeros(l.out_dim) for l in net.layers),
        )


def init_mlp(dims: Sequence[int], activations, rng: Rng) -> Mlp:
    """Glorot-uniform weights, zero biases.

    `dims` lists layer widths input-first, so ``[4, 3, 2]`` builds two
    layers.  `activations` is either one name applied to every layer or a
    sequence with one name per layer.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ConfigError(f"need at least [in, out] dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    if isinstance(activations, str):
        acts = [activations] * (len(dims) - 1)
    else:
        acts = list(activations)
        if len(acts) != len(dims) - 1:
            raise ConfigError(
                f"got {len(acts)} activations for {len(dims) - 1} layers"
            )
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, (fan_in, fan_out))
        layers.append(DenseLayer(Matrix(w), np.zeros(fan_out), acts[i]))
    return Mlp(tuple(layers))


def forward(net: Mlp, x: Matrix) -> tuple[Matrix, ForwardCache]:
    """Run the net on a batch; returns the output and the caches backward needs."""
    if x.cols != net.in_dim:
        raise ShapeError(f"input has {x.cols} features but the net expects {net.in_dim}")
    pre: list[Matrix] = []
    post: list[Matrix] = []
    a = x
    for layer in net.layers:
        z = Matrix(matmul(a, layer.weights).array + layer.bias)
        a = Matrix(_activate(layer.activation, z.array))
        pre.append(z)
        post.append(a)
    return a, ForwardCache(x=x, pre=tuple(pre), post=tuple(post))


def backward(net: Mlp, cache: ForwardCache, grad_out: Matrix) -> tuple[GradientSet, Matrix]:
    """Backpropagate d loss/d output through the net.

    Returns the parameter gradients and d loss/d input; the latter is what a
    server ships back across the cut.
    """
    if cache.depth != net.n_layers:
        raise ShapeError(
            f"cache depth {cache.depth} does not match {net.n_layers} layers"
        )
    if grad_out.shape != cache.post[-1].shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output {cache.post[-1].shape}"
        )
    n_layers = net.n_layers
    grads_w: list[Matrix] = [None] * n_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = grad_out.array * _activation_deriv(
        net.layers[-1].activation, cache.pre[-1].array, cache.post[-1].array
    )
    grad_in = None
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        inp = cache.x if i == 0 else cache.post[i - 1]
        delta_m = Matrix(delta)
        grads_w[i] = matmul(transpose(inp), delta_m)
        grads_b[i] = delta.sum(axis=0)
        g_in = matmul(delta_m, transpose(layer.weights))
        if i > 0:
            delta = g_in.array * _activation_deriv(
                net.layers[i - 1].activation, cache.pre[i - 1].array, cache.post[i - 1].array
            )
        else:
            grad_in = g_in
    return GradientSet(tuple(grads_w), tuple(grads_b)), grad_in


def softmax_cross_entropy(logits: Matrix, labels) -> tuple[float, Matrix]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    The gradient is ``(softmax - one_hot) / batch_size``; the loss uses the
    max-shifted log-sum-exp form so large logits do not overflow.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != logits.rows:
        raise DataError(f"{logits.rows} logit rows but {y.shape[0]} labels")
    if y.size == 0:
        raise DataError("empty label batch")
    if y.min() < 0 or y.max() >= logits.cols:
        raise DataError(
            f"labels must lie in [0, {logits.cols}), got range [{y.min()}, {y.max()}]"
        )
    z = logits.array
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    rows = np.arange(n)
    loss = float((lse[:, 0] - z[rows, y]).mean())
    p = np.exp(z - lse)
    p[rows, y] -= 1.0
    return loss, Matrix(p / n)


def sgd_step(
    net: Mlp, grads: GradientSet, cfg: SgdConfig, state: SgdState | None = None
) -> tuple[Mlp, SgdState]:
    """One SGD(+momentum) update: ``v = m*v + g; w = w - lr*v``.

    Pure: returns a new net and new state.  `state=None` means zero
    velocities, so the first step reduces to plain SGD.
    """
    if len(grads.weights) != net.n_layers or len(grads.biases) != net.n_layers:
        raise ShapeError(
            f"gradient set covers {len(grads.weights)} layers, net has {net.n_layers}"
        )
    if state is None:
        state = SgdState.zeros(net)
    new_layers: list[DenseLayer] = []
    new_wv: list[np.ndarray] = []
    new_bv: list[np.ndarray] = []
    for layer, gw, gb, vw, vb in zip(
        net.layers, grads.weights, grads.biases, state.w_vel, state.b_vel
    ):
        if gw.shape != (layer.in_dim, layer.out_dim) or gb.shape != (layer.out_dim,):
            raise ShapeError(
                f"gradient shapes {gw.shape}/{gb.shape} do not match layer "
                f"({layer.in_dim}, {layer.out_dim})"
            )
        nvw = cfg.momentum * vw + gw.array
        nvb = cfg.momentum * vb + gb
        w = Matrix(layer.weights.array - cfg.learning_rate * nvw)
        b = layer.bias - cfg.learning_rate * nvb
        new_layers.append(DenseLayer(w, b, layer.activation))
        new_wv.append(nvw)
        new_bv.append(nvb)
    return Mlp(tuple(new_layers)), SgdState(tuple(new_wv), tuple(new_bv))


def _with_entry(net: Mlp, layer_idx: int, which: str, entry, value: float) -> Mlp:
    """Copy of `net` with a single weight or bias entry replaced."""
    layers = list(net.layers)
    layer = layers[layer_idx]
    if which == "w":
        w = np.array(layer.weights.array)
        w[entry] = value
        layers[layer_idx] = DenseLayer(Matrix(w), layer.bias, layer.activation)
    else:
        b = np.array(layer.bias)
        b[entry] = value
        layers[layer_idx] = DenseLayer(layer.weights, b, layer.activation)
    return Mlp(tuple(layers))


def finite_diff_grads(loss_fn: Callable[[Mlp], float], net: Mlp, h: float = 1e-6) -> GradientSet:
    """Central-difference gradient of `loss_fn` w.r.t. every parameter of `net`.

    O(#params) loss evaluations per side, so keep the nets small; this is a
    verification oracle, not a training path.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    gw: list[Matrix] = []
    gb: list[np.ndarray] = []
    for li, layer in enumerate(net.layers):
        w = layer.weights.array
        grad_w = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                up = loss_fn(_with_entry(net, li, "w", (i, j), w[i, j] + h))
                down = loss_fn(_with_entry(net, li, "w", (i, j), w[i, j] - h))
                grad_w[i, j] = (up - down) / (2.0 * h)
        grad_b = np.zeros_like(layer.bias)
        for j in range(layer.bias.shape[0]):
            up = loss_fn(_with_entry(net, li, "b", j, layer.bias[j] + h))
            down = loss_fn(_with_entry(net, li, "b", j, layer.bias[j] - h))
            grad_b[j] = (up - down) / (2.0 * h)
        gw.append(Matrix(grad_w))
        gb.append(grad_b)
    return GradientSet(tuple(gw), tuple(gb))


def count_params(net: Mlp) -> int:
    """Trainable scalars: weights plus biases over all layers."""
    return sum(l.in_dim * l.out_dim + l.out_dim for l in net.layers)


def count_flops_per_sample(net: Mlp) -> int:
    """Forward flops for one sample: 2*in*out multiply-adds, +out bias adds,
    +out per nonlinear activation (identity costs nothing)."""
    total = 0
    for l in net.layers:
        total += 2 * l.in_dim * l.out_dim + l.out_dim
        if l.activation != "identity":
            total += l.out_dim
    return total
