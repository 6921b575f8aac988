"""A small reverse-mode network toolkit in numpy.

Only what the estimator needs: 1-D convolution, ReLU, statistical pooling,
fully connected layers and a sigmoid, chained by ``Sequential``, plus ADAM
and a central finite-difference gradient checker.

Layers cache what their backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises StateError.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, StateError

STAT_POOL_EPS = 1e-8


class Tensor:
    """An array with a same-shaped gradient buffer."""

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.data.shape}, dtype={self.data.dtype})"


class Layer:
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()


def _init_weights(rng: np.random.Generator, shape: tuple, fan_in: int, init: str, dtype):
    """``uniform``: weights and biases in +-sqrt(1/fan_in).
    ``he``: weights in +-sqrt(6/fan_in) (variance-preserving ahead of a ReLU), zero biases.
    """
    if init == "uniform":
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype), rng.uniform(-bound, bound, shape[0]).astype(dtype)
    if init == "he":
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype), np.zeros(shape[0], dtype=dtype)
    raise ValueError(f"unknown init {init!r}")


class Conv1d(Layer):
    """Stride-1 cross-correlation with 'same' zero padding.

    For kernel size k the input is padded with ``(k - 1) // 2`` zeros on the
    left and the remainder on the right, so kernel 4 pads 1 left / 2 right.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng=None, dtype=np.float32, init="uniform"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        w, b = _init_weights(
            np.random.default_rng(rng), (out_channels, in_channels, kernel_size), in_channels * kernel_size, init, dtype
        )
        self.weight = Tensor(w, "conv.weight")
        self.bias = Tensor(b, "conv.bias")

    @property
    def padding(self) -> tuple[int, int]:
        left = (self.kernel_size - 1) // 2
        return left, self.kernel_size - 1 - left

    def parameters(self):
        return [self.weight, self.bias]

    def _columns(self, xp_item: np.ndarray, t: int, buf: np.ndarray) -> np.ndarray:
        """im2col for one batch item: (c, t + k - 1) -> (c * k, t), row index c * k + j."""
        for j in range(self.kernel_size):
            buf[:, j, :] = xp_item[:, j : j + t]
        return buf.reshape(-1, t)

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv1d expects (batch, {self.in_channels}, time), got {x.shape}")
        b, c, t = x.shape
        if t < self.kernel_size:
            raise ShapeError(f"time length {t} shorter than kernel {self.kernel_size}")
        left, right = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        w = self.weight.data.reshape(self.out_channels, -1)
        out = np.empty((b, self.out_channels, t), dtype=np.result_type(x.dtype, w.dtype))
        buf = np.empty((c, self.kernel_size, t), dtype=xp.dtype)
        # one 2-D GEMM per item keeps BLAS on contiguous operands
        for i in range(b):
            np.matmul(w, self._columns(xp[i], t, buf), out=out[i])
        out += self.bias.data[None, :, None]
        # only the padded input is kept; columns are rebuilt in backward
        self._cache = xp
        return out

    def backward(self, grad_out):
        xp = self._cached()
        b, c, _ = xp.shape
        t = grad_out.shape[2]
        k = self.kernel_size
        w_t = np.ascontiguousarray(self.weight.data.reshape(self.out_channels, -1).T)
        grad_w = np.zeros((self.out_channels, c * k), dtype=np.float64)
        dxp = np.zeros_like(xp)
        buf = np.empty((c, k, t), dtype=xp.dtype)
        for i in range(b):
            g = grad_out[i]
            grad_w += g @ self._columns(xp[i], t, buf).T
            dcols = (w_t @ g).reshape(c, k, t)
            for j in range(k):
                dxp[i, :, j : j + t] += dcols[:, j, :]
        self.weight.grad += grad_w.reshape(self.weight.shape).astype(self.weight.grad.dtype)
        self.bias.grad += grad_out.sum(axis=(0, 2), dtype=np.float64).astype(self.bias.grad.dtype)
        left, _ = self.padding
        return dxp[:, :, left : left + t]


class ReLU(Layer):
    def forward(self, x):
        y = np.maximum(x, 0)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cached()
        return grad_out * (y > 0)


class StatPool(Layer):
    """(batch, channels, time) -> (batch, 2*channels): per-channel means, then stds.

    The standard deviation is the population one with ``STAT_POOL_EPS`` added
    under the square root. Temporal sums accumulate in float64.
    """

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] < 2:
            raise ShapeError(f"StatPool expects (batch, channels, time>=2), got {x.shape}")
        mean = x.mean(axis=2, dtype=np.float64)
        centered = x - mean[:, :, None].astype(x.dtype)
        var = np.einsum("bct,bct->bc", centered, centered, dtype=np.float64) / x.shape[2]
        std = np.sqrt(var + STAT_POOL_EPS)
        self._cache = (centered, std)
        return np.concatenate([mean, std], axis=1).astype(x.dtype)

    def backward(self, grad_out):
        centered, std = self._cached()
        c = centered.shape[1]
        t = centered.shape[2]
        g_mean = (grad_out[:, :c] / t).astype(centered.dtype)
        g_scale = (grad_out[:, c:] / (t * std)).astype(centered.dtype)
        return g_mean[:, :, None] + g_scale[:, :, None] * centered


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32, init="uniform"):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        w, b = _init_weights(np.random.default_rng(rng), (out_features, in_features), in_features, init, dtype)
        self.weight = Tensor(w, "linear.weight")
        self.bias = Tensor(b, "linear.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad_out):
        x = self._cached()
        self.weight.grad += grad_out.T @ x
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.data


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cached()
        return grad_out * y * (1.0 - y)


class Sequential(Layer):
    """Feed-forward chain; ``backward`` replays the recorded forward in reverse."""

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, grad_out):
        self._cached()
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    skipped_steps: int = 0


class Adam:
    """ADAM with bias correction over a fixed list of tensors.

    A step whose gradients contain NaN or Inf is skipped entirely and counted
    in ``state.skipped_steps``.
    """

    def __init__(self, params: Sequence[Tensor], lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(
            first_moment=[np.zeros(p.shape, dtype=np.float64) for p in self.params],
            second_moment=[np.zeros(p.shape, dtype=np.float64) for p in self.params],
            learning_rate=lr,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )

    def step(self) -> bool:
        st = self.state
        if not all(np.all(np.isfinite(p.grad)) for p in self.params):
            st.skipped_steps += 1
            return False
        st.step_count += 1
        bc1 = 1.0 - st.beta1**st.step_count
        bc2 = 1.0 - st.beta2**st.step_count
        for p, m, v in zip(self.params, st.first_moment, st.second_moment):
            g = p.grad.astype(np.float64, copy=False)
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            update = st.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + st.epsilon)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
        return True

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, floor)``."""
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def numeric_gradient(f: Callable[[], float], array: np.ndarray, indices: Iterable[tuple], step: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. selected entries of ``array`` (mutated in place)."""
    out = []
    for idx in indices:
        orig = array[idx]
        h = step * max(1.0, abs(float(orig)))
        array[idx] = orig + h
        fp = f()
        array[idx] = orig - h
        fm = f()
        array[idx] = orig
        out.append((fp - fm) / (2.0 * h))
    return np.array(out)


def check_layer_gradients(
    layer: Layer,
    x: np.ndarray,
    rng=None,
    step: float = 1e-6,
    max_entries: int | None = 40,
) -> list[GradCheckResult]:
    """Compare analytic and central-difference gradients for a layer (or chain).

    The scalar objective is ``sum(forward(x) * w)`` for a fixed random ``w``.
    Checks the input gradient and every parameter; at most ``max_entries``
    randomly chosen entries per tensor are perturbed.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    w = rng.standard_normal(y.shape)

    def objective():
        return float(np.sum(layer.forward(x) * w))

    for p in layer.parameters():
        p.zero_grad()
    layer.forward(x)
    grad_x = layer.backward(w.astype(y.dtype))

    targets = [("input", x, grad_x)] + [(p.name or f"param{i}", p.data, p.grad.copy()) for i, p in enumerate(layer.parameters())]
    results = []
    for name, array, analytic in targets:
        all_idx = list(np.ndindex(array.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = numeric_gradient(objective, array, all_idx, step)
        ana = np.array([analytic[i] for i in all_idx])
        results.append(GradCheckResult(name, relative_error(ana, num), ana, num))
    return results
