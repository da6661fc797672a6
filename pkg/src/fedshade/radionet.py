"""Two-stage fully convolutional pathloss predictor.

Stage 1 maps (building, tx raster) to a coarse map; stage 2 maps
(building, tx raster, coarse map) to the refined map.  Each stage is three 3x3
convolutions with ReLU between them and a linear last layer.

All parameters live in one :class:`ParamVector`; segment order is
conv1a.weight, conv1a.bias, conv1b..., conv1c..., conv2a..., conv2b..., conv2c....
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import (
    Layout,
    ParamVector,
    conv2d_backward,
    conv2d_forward,
    make_layout,
    mse_backward,
    mse_loss,
    relu_backward,
    relu_forward,
)

TX_CHANNEL = 1
STAGE1 = ("conv1a", "conv1b", "conv1c")
STAGE2 = ("conv2a", "conv2b", "conv2c")
PHASES = ("stage1", "stage2", "joint")


@dataclass(frozen=True)
class NetConfig:
    hidden_channels: int = 8
    stage1_in_channels: int = 2
    stage2_in_channels: int = 3

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")
        if (self.stage1_in_channels, self.stage2_in_channels) != (2, 3):
            raise ValueError("stage inputs are fixed at 2 and 3 channels")


def _conv_shapes(config: NetConfig) -> list[tuple[str, int, int]]:
    h = config.hidden_channels
    return [
        ("conv1a", h, config.stage1_in_channels),
        ("conv1b", h, h),
        ("conv1c", 1, h),
        ("conv2a", h, config.stage2_in_channels),
        ("conv2b", h, h),
        ("conv2c", 1, h),
    ]


def net_layout(config: NetConfig) -> Layout:
    named = []
    for name, c_out, c_in in _conv_shapes(config):
        named.append((f"{name}.weight", (c_out, c_in, 3, 3)))
        named.append((f"{name}.bias", (c_out,)))
    return make_layout(named)


def init_params(rng: np.random.Generator, config: NetConfig) -> ParamVector:
    """Weights ~ U[-a, a] with a = sqrt(1 / fan_in); biases zero."""
    params = ParamVector.zeros(net_layout(config))
    for name, c_out, c_in in _conv_shapes(config):
        a = np.sqrt(1.0 / (c_in * 9))
        params[f"{name}.weight"] = rng.uniform(-a, a, size=(c_out, c_in, 3, 3))
    return params


def stage_mask(layout: Layout, phase: str) -> np.ndarray:
    """Boolean mask over coordinates trained in ``phase``."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    active = {"stage1": STAGE1, "stage2": STAGE2, "joint": STAGE1 + STAGE2}[phase]
    mask = np.zeros(layout[-1].stop, dtype=bool)
    for seg in layout:
        if seg.name.split(".")[0] in active:
            mask[seg.offset : seg.stop] = True
    return mask


def _stage_forward(params: ParamVector, names, x: np.ndarray):
    cache = []
    h = x
    for i, name in enumerate(names):
        z = conv2d_forward(h, params[f"{name}.weight"], params[f"{name}.bias"])
        cache.append((h, z))
        h = relu_forward(z) if i < len(names) - 1 else z
    return h, cache


def _stage_backward(params: ParamVector, names, cache, grad_out, grads: ParamVector):
    g = grad_out
    for i in reversed(range(len(names))):
        name = names[i]
        h_in, z = cache[i]
        if i < len(names) - 1:
            g = relu_backward(g, z)
        g, gw, gb = conv2d_backward(g, h_in, params[f"{name}.weight"])
        grads[f"{name}.weight"] = gw
        grads[f"{name}.bias"] = gb
    return g


def forward_stage1(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """``x`` is (N, 2, H, W) or (2, H, W): building, tx raster."""
    return _stage_forward(params, STAGE1, x)[0]


def _stage2_input(x: np.ndarray, stage1_out: np.ndarray) -> np.ndarray:
    axis = 0 if x.ndim == 3 else 1
    return np.concatenate([x, stage1_out], axis=axis)


def forward_stage2(params: ParamVector, x: np.ndarray, stage1_out: np.ndarray) -> np.ndarray:
    if stage1_out.shape[-2:] != x.shape[-2:]:
        raise ValueError("stage-1 output and input grids differ")
    return _stage_forward(params, STAGE2, _stage2_input(x, stage1_out))[0]


def predict(params: ParamVector, x: np.ndarray, phase: str = "joint") -> np.ndarray:
    """Output of the stage scored in ``phase`` (stage-1 map for ``stage1``)."""
    coarse = forward_stage1(params, x)
    if phase == "stage1":
        return coarse
    return forward_stage2(params, x, coarse)


def loss_and_grad(
    params: ParamVector, x: np.ndarray, y: np.ndarray, phase: str
) -> tuple[float, ParamVector]:
    """Mean squared error of the phase's output and its gradient.

    ``stage1`` / ``stage2`` leave the other stage's gradient at zero (frozen);
    ``joint`` backpropagates the refined output through both stages.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    grads = params.zeros_like()
    coarse, cache1 = _stage_forward(params, STAGE1, x)
    if phase == "stage1":
        loss = mse_loss(coarse, y)
        _stage_backward(params, STAGE1, cache1, mse_backward(coarse, y), grads)
        return loss, grads
    refined, cache2 = _stage_forward(params, STAGE2, _stage2_input(x, coarse))
    loss = mse_loss(refined, y)
    g_in = _stage_backward(params, STAGE2, cache2, mse_backward(refined, y), grads)
    if phase == "joint":
        g_coarse = g_in[:, 2:3] if g_in.ndim == 4 else g_in[2:3]
        _stage_backward(params, STAGE1, cache1, g_coarse, grads)
    return loss, grads


@dataclass(frozen=True)
class GroupMaskSet:
    """Partition of parameter indices into G groups.

    ``labels[i]`` is the 0-based group of coordinate ``i``.
    """

    labels: np.ndarray
    G: int

    @property
    def d(self) -> int:
        return int(self.labels.size)

    @property
    def masks(self) -> np.ndarray:
        """(G, d) boolean selector matrix."""
        return self.labels[None, :] == np.arange(self.G)[:, None]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.G)

    def indices(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.labels == g)


def build_group_masks(config: NetConfig) -> GroupMaskSet:
    """Group 0: conv1a weights on the tx channel; group 1: conv2a weights on
    the tx channel; group 2: everything else."""
    layout = net_layout(config)
    labels = np.full(layout[-1].stop, 2, dtype=np.int64)
    for group, name in ((0, "conv1a.weight"), (1, "conv2a.weight")):
        seg = next(s for s in layout if s.name == name)
        idx = np.arange(seg.offset, seg.stop).reshape(seg.shape)
        labels[idx[:, TX_CHANNEL].ravel()] = group
    return GroupMaskSet(labels=labels, G=3)
