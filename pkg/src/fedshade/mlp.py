"""Two-layer tanh perceptron used by the allocator and the attackers."""

from __future__ import annotations

import numpy as np

from .gradcore import ParamVector, dense_backward, dense_forward, make_layout, tanh_backward


def mlp_layout(n_in: int, hidden: int, n_out: int):
    return make_layout(
        [
            ("fc1.weight", (hidden, n_in)),
            ("fc1.bias", (hidden,)),
            ("fc2.weight", (n_out, hidden)),
            ("fc2.bias", (n_out,)),
        ]
    )


def mlp_init(
    rng: np.random.Generator, n_in: int, hidden: int, n_out: int, out_scale: float = 1.0
) -> ParamVector:
    params = ParamVector.zeros(mlp_layout(n_in, hidden, n_out))
    a1, a2 = np.sqrt(1.0 / n_in), np.sqrt(1.0 / hidden) * out_scale
    params["fc1.weight"] = rng.uniform(-a1, a1, size=(hidden, n_in))
    params["fc2.weight"] = rng.uniform(-a2, a2, size=(n_out, hidden))
    return params


def mlp_forward(params: ParamVector, x: np.ndarray):
    """Returns ``(out, cache)`` for a (N, n_in) batch."""
    h = np.tanh(dense_forward(x, params["fc1.weight"], params["fc1.bias"]))
    out = dense_forward(h, params["fc2.weight"], params["fc2.bias"])
    return out, (x, h)


def mlp_backward(params: ParamVector, cache, grad_out: np.ndarray):
    """Returns ``(grad_params, grad_input)``."""
    x, h = cache
    grads = params.zeros_like()
    g_h, grads["fc2.weight"], grads["fc2.bias"] = dense_backward(grad_out, h, params["fc2.weight"])
    g_z = tanh_backward(g_h, h)
    g_x, grads["fc1.weight"], grads["fc1.bias"] = dense_backward(g_z, x, params["fc1.weight"])
    return grads, g_x
