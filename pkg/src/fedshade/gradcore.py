"""Dense numerics for the fixed network topology.

Tensors are plain float64 numpy arrays.  Convolutions are 3x3, stride 1,
zero padding 1, batched as (N, C, H, W).  Every forward op has a matching
backward op taking the upstream gradient and whatever the forward cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


Layout = tuple[Segment, ...]


def make_layout(named_shapes: Iterable[tuple[str, tuple[int, ...]]]) -> Layout:
    segments, offset = [], 0
    for name, shape in named_shapes:
        seg = Segment(name, tuple(int(s) for s in shape), offset)
        if seg.size < 1:
            raise ValueError(f"segment {name!r} is empty")
        segments.append(seg)
        offset = seg.stop
    return tuple(segments)


class ParamVector:
    """A flat float64 vector with named, contiguous, reshaped views."""

    __slots__ = ("data", "layout", "_index")

    def __init__(self, data: np.ndarray, layout: Layout):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError("ParamVector data must be 1-D")
        expected = layout[-1].stop if layout else 0
        if data.size != expected:
            raise ValueError(f"data length {data.size} != layout size {expected}")
        self.data = data
        self.layout = layout
        self._index = {seg.name: seg for seg in layout}

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout[-1].stop), layout)

    @property
    def size(self) -> int:
        return self.data.size

    def segment(self, name: str) -> Segment:
        return self._index[name]

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self._index[name]
        return self.data[seg.offset : seg.stop].reshape(seg.shape)

    def __setitem__(self, name: str, value) -> None:
        seg = self._index[name]
        self.data[seg.offset : seg.stop] = np.asarray(value, dtype=np.float64).ravel()

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.layout)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data, self.layout)

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def __repr__(self) -> str:
        names = ", ".join(seg.name for seg in self.layout)
        return f"ParamVector(d={self.size}, segments=[{names}])"


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _windows(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"weight must be (C_out, C_in, 3, 3), got {weight.shape}")
    if xb.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {xb.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match C_out={weight.shape[0]}")
    out = np.einsum("nchwij,ocij->nohw", _windows(xb), weight, optimize=True)
    out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    gb, squeeze = _as_batch(grad_out)
    xb, _ = _as_batch(x)
    if gb.shape[0] != xb.shape[0] or gb.shape[2:] != xb.shape[2:] or gb.shape[1] != weight.shape[0]:
        raise ValueError(f"grad_out {grad_out.shape} inconsistent with input {x.shape}")
    grad_weight = np.einsum("nohw,nchwij->ocij", gb, _windows(xb), optimize=True)
    grad_bias = gb.sum(axis=(0, 2, 3))
    flipped = weight[:, :, ::-1, ::-1]
    grad_input = np.einsum("nohwij,ocij->nchw", _windows(gb), flipped, optimize=True)
    return (grad_input[0] if squeeze else grad_input), grad_weight, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0.0)


def tanh_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward of tanh given its output ``y``."""
    return grad_out * (1.0 - y * y)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(N, in) @ (out, in).T + bias."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    return x @ weight.T + bias


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return 2.0 * (pred - target) / pred.size


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    params.check_layout(grads)
    return params.with_data(params.data - lr * grads.data)


def grad_check(
    fn: Callable[[np.ndarray], float],
    grad: np.ndarray,
    x: np.ndarray,
    epsilon: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between ``grad`` and central differences of ``fn`` at ``x``.

    ``n_coords`` samples a random coordinate subset; the relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    flat = x.ravel()
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = fn(x)
        flat[i] = orig - epsilon
        f_minus = fn(x)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        denom = max(abs(grad[i]), abs(numeric), floor)
        worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst
