"""Dense float64 primitives with explicit forward/backward contracts.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order.  Every
layer exposes ``forward`` (caching whatever its backward needs) and
``backward`` (returning the input gradient and accumulating parameter
gradients into a shared :class:`Parameters` store).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BCE_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values produced in {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray):
    """Return (dA, dB) for C = A @ B."""
    return dc @ b.T, a.T @ dc


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def bce_loss(p, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[eps, 1 - eps]``; the gradient is taken through the
    clamp (zero where the clamp is active).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss length mismatch: {p.shape} vs {y.shape}")
    n = p.size
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    grad = np.where((p < BCE_EPS) | (p > 1.0 - BCE_EPS), 0.0, grad)
    return float(loss), grad


def bce_with_logits(z, y) -> tuple[float, np.ndarray]:
    """Loss of ``bce_loss(sigmoid(z), y)`` with gradient w.r.t. the logit ``z``.

    Numerically identical to composing :func:`sigmoid` and :func:`bce_loss`
    away from the clamp region; used by the models to avoid ``p(1-p)``
    underflow on saturated logits.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise DimensionError(f"bce_loss length mismatch: {z.shape} vs {y.shape}")
    p = sigmoid(z)
    loss, _ = bce_loss(p, y)
    return loss, (p - y) / z.size


class Parameters:
    """Named float64 tensors with same-shaped gradient buffers."""

    def __init__(self):
        self.values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.values[name] = as_tensor(value).copy()
        self.grads[name] = np.zeros_like(self.values[name])
        return self.values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "Parameters":
        out = Parameters()
        for k, v in self.values.items():
            out.add(k, v)
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.values):
            missing = set(self.values) ^ set(arrays)
            raise KeyError(f"parameter name set differs: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self.values[k].shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.values[k].shape}")
            self.values[k][...] = v


@dataclass
class GradTape:
    """Records layer calls in forward order; ``backward`` replays them reversed."""

    records: list = field(default_factory=list)

    def record(self, layer) -> None:
        self.records.append(layer)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.records):
            dy = layer.backward(dy)
        return dy

    def clear(self) -> None:
        self.records.clear()


class Linear:
    """y = x W + b with W of shape (fan_in, fan_out)."""

    def __init__(self, params: Parameters, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.w_name, self.b_name = f"{name}.w", f"{name}.b"
        params.add(self.w_name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.add(self.b_name, np.zeros(fan_out))
        self.params = params
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return matmul(x, self.params[self.w_name]) + self.params[self.b_name]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw = matmul_backward(self._x, self.params[self.w_name], dy)
        self.params.grads[self.w_name] += dw
        self.params.grads[self.b_name] += dy.sum(axis=0)
        return dx


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return sigmoid_backward(self._y, dy)


class MLP:
    """Linear/ReLU stack; hidden layers get ReLU, the output layer does not
    unless ``final_activation`` is set."""

    def __init__(self, params: Parameters, name: str, sizes: list[int],
                 rng: np.random.Generator, final_activation: bool = True):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.layers.append(Linear(params, f"{name}.{i}", a, b, rng))
            if final_activation or i < len(sizes) - 2:
                self.layers.append(ReLU())

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: str = ""

    def __bool__(self):
        return self.passed


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))


def grad_check(forward: Callable[[np.ndarray], np.ndarray],
               backward: Callable[[np.ndarray], np.ndarray],
               x: np.ndarray, tol: float, *, h: float = 1e-5,
               params: Parameters | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The scalar checked is ``sum(forward(x) * r)`` for a fixed random ``r``,
    so every output coordinate contributes.  If ``params`` is given, their
    gradients (accumulated by ``backward``) are checked as well.
    """
    x = as_tensor(x).copy()
    rng = np.random.default_rng(seed)
    try:
        y = forward(x)
        check_finite(y, "forward")
        r = rng.standard_normal(y.shape)
        if params is not None:
            params.zero_grad()
        dx = backward(r)
        check_finite(dx, "backward")
    except NumericalError as exc:
        return GradCheckReport(np.inf, tol, False, str(exc))

    def objective() -> float:
        return float(np.sum(forward(x) * r))

    worst, worst_name = 0.0, ""
    targets = [("input", x, dx)]
    if params is not None:
        targets += [(n, params[n], params.grads[n].copy()) for n in params]
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = objective()
            flat[i] = old - h
            fm = objective()
            flat[i] = old
            numeric[i] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(numeric)):
            return GradCheckReport(np.inf, tol, False, f"non-finite difference in {name}")
        err = float(_rel_err(analytic.reshape(-1), numeric).max(initial=0.0))
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, tol, worst <= tol, worst_name)
