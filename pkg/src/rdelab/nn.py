"""Dense ReLU networks with hand-written backprop and Adam.

Weights are stored as ``(out, in)`` matrices so a batch ``X`` of shape
``(B, in)`` maps to ``X @ W.T + b``.  Every function here is pure: inputs are
never mutated and new arrays are returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "AdamState",
    "GradientSet",
    "make_rng",
    "mlp_init",
    "forward",
    "predict",
    "backward",
    "adam_step",
    "adam_init",
    "reset_layers",
    "softmax",
    "norm_pdf",
    "norm_cdf",
    "norm_ppf",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN/inf shows up where finite values are required."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``.

    The same pair always reproduces the same draws; distinct streams are
    statistically independent (SeedSequence spawn keys).
    """
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream) & 0xFFFFFFFFFFFFFFFF,))
    return np.random.Generator(np.random.PCG64(seq))


def _layout(layer_dims) -> list[tuple[int, int, int, int]]:
    """Offsets ``(w_start, w_end, b_end, fan_out)`` of each layer in a flat buffer."""
    out, pos = [], 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w_end = pos + fan_in * fan_out
        out.append((pos, w_end, w_end + fan_out, fan_out))
        pos = w_end + fan_out
    return out


def _views(flat: np.ndarray, layer_dims) -> tuple[list[np.ndarray], list[np.ndarray]]:
    ws, bs = [], []
    for (start, w_end, b_end, fan_out), fan_in in zip(_layout(layer_dims), layer_dims[:-1]):
        ws.append(flat[start:w_end].reshape(fan_out, fan_in))
        bs.append(flat[w_end:b_end])
    return ws, bs


def n_params(layer_dims) -> int:
    return sum(i * o + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


class _FlatParams:
    """Per-layer weight/bias arrays that are views into one flat vector."""

    def __init__(self, layer_dims, flat: np.ndarray):
        self.layer_dims = tuple(layer_dims)
        self.flat = flat
        self.weights, self.biases = _views(flat, self.layer_dims)

    @classmethod
    def zeros_like(cls, other: "_FlatParams"):
        return cls(other.layer_dims, np.zeros_like(other.flat))

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self):
        return type(self)(self.layer_dims, self.flat.copy())

    def __eq__(self, other) -> bool:
        return (type(self) is type(other) and self.layer_dims == other.layer_dims
                and np.array_equal(self.flat, other.flat))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(layer_dims={list(self.layer_dims)})"


class Mlp(_FlatParams):
    """ReLU hidden layers, identity output. ``weights[l]`` has shape (out, in)."""

    @property
    def n_layers(self) -> int:
        return len(self.weights)


class GradientSet(_FlatParams):
    pass


@dataclass
class AdamState:
    m: GradientSet
    v: GradientSet
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step_count, self.beta1, self.beta2, self.eps_hat)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    batched: bool = True


def _check_dims(layer_dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"layer_dims needs at least 2 entries, got {list(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer widths must be positive, got {list(dims)}")
    return dims


def _init_layer(net: Mlp, i: int, rng: np.random.Generator) -> None:
    fan_out, fan_in = net.weights[i].shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    net.weights[i][...] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    net.biases[i][...] = 0.0


def mlp_init(layer_dims, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    dims = _check_dims(layer_dims)
    net = Mlp(dims, np.zeros(n_params(dims)))
    for i in range(net.n_layers):
        _init_layer(net, i, rng)
    return net


def forward(net: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate ``net`` on a single input vector or a ``(B, in)`` batch.

    Hidden layers use ReLU, the output layer is linear.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input width {x.shape[-1] if x.ndim else 0} does not match {net.layer_dims[0]}")
    if not math.isfinite(h.sum()):
        raise NonFiniteError("non-finite network input")
    cache = ForwardCache(h, batched=batched)
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if i < last else z
        cache.pre.append(z)
        cache.post.append(h)
    return (h if batched else h[0]), cache


def predict(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Cache-free forward pass for inference; no input validation."""
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h


def backward(net: Mlp, cache: ForwardCache, output_grad) -> GradientSet:
    """Parameter gradients given dL/d(output); sums over the batch axis."""
    g = np.asarray(output_grad, dtype=float)
    if not cache.batched:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} does not match cached output {cache.post[-1].shape}")
    n = net.n_layers
    out = GradientSet(net.layer_dims, np.empty_like(net.flat))
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (cache.pre[i] > 0.0)
        below = cache.post[i - 1] if i > 0 else cache.inputs
        np.matmul(g.T, below, out=out.weights[i])
        g.sum(axis=0, out=out.biases[i])
        if i > 0:
            g = g @ net.weights[i]
    return out


def adam_init(net: Mlp) -> AdamState:
    return AdamState(GradientSet(net.layer_dims, np.zeros_like(net.flat)),
                     GradientSet(net.layer_dims, np.zeros_like(net.flat)))


def adam_step(net: Mlp, grads: GradientSet, state: AdamState, lr: float) -> tuple[Mlp, AdamState]:
    if lr <= 0:
        raise ValueError("lr must be positive")
    if grads.flat.shape != net.flat.shape:
        raise ValueError("gradient shapes do not match the network")
    g = grads.flat
    if not math.isfinite(g.sum()):
        raise NonFiniteError("non-finite gradient")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps_hat
    m = b1 * state.m.flat + (1.0 - b1) * g
    v = b2 * state.v.flat + (1.0 - b2) * (g * g)
    step = (lr / (1.0 - b1**t)) * m / (np.sqrt(v / (1.0 - b2**t)) + eps)
    return (
        Mlp(net.layer_dims, net.flat - step),
        AdamState(GradientSet(net.layer_dims, m), GradientSet(net.layer_dims, v), t, b1, b2, eps),
    )


def reset_layers(net: Mlp, state: AdamState, depth: int, rng: np.random.Generator) -> tuple[Mlp, AdamState]:
    """Re-initialize the last ``depth`` layers of ``net``.

    Adam moments of those layers are zeroed. The step counter is only cleared
    on a full reset, so partially reset agents keep their bias-correction
    schedule.
    """
    n = net.n_layers
    if not 0 <= depth <= n:
        raise ValueError(f"reset depth {depth} outside [0, {n}]")
    net = net.copy()
    state = state.copy()
    for i in range(n - depth, n):
        _init_layer(net, i, rng)
        for buf in (state.m, state.v):
            buf.weights[i][...] = 0.0
            buf.biases[i][...] = 0.0
    if depth == n:
        state.step_count = 0
    return net, state


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def norm_cdf(x: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-x / _SQRT2)


# Acklam's rational approximation coefficients
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Inverse standard normal CDF: rational approximation plus one Newton step."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile needs p in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    return x - (norm_cdf(x) - p) / norm_pdf(x)
