"""Upload-based transmitter localization.

An observer records the uploads produced by ``S`` single-sample SGD steps,
summarizes each step by per-group statistics (the fingerprint) and regresses
the transmitter position in meters with a small perceptron.

Fingerprint layout: for step ``s`` then group ``g`` the triple
``(l2 norm, mean, std)`` of the masked step vector, i.e. entry
``3 * (s * G + g) + j``.  Means and stds use the group size as divisor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import radionet
from .fedproto import guarded_step
from .gradcore import ParamVector
from .mlp import mlp_backward, mlp_forward, mlp_init
from .radionet import GroupMaskSet

TRACE_MAGIC = b"FTRC"
TRACE_VERSION = 1


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 4
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 400
    train_fraction: float = 0.7
    weight_decay: float = 1e-3
    holdout_fraction: float = 0.25
    probes_per_client: int = 2
    min_traces: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class UploadTrace:
    steps: np.ndarray  # (S, d) transmitted step vectors
    coord_m: np.ndarray  # (2,) true (x, y) meters
    client_id: int = 0
    round_index: int = 0
    map_id: int = 0
    raw: np.ndarray | None = None  # (S, d) pre-defense step deltas, client-side only

    @property
    def S(self) -> int:
        return self.steps.shape[0]


def raw_trace_steps(
    global_params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    phase: str,
    S: int,
    lr: float,
    max_grad_norm: float | None = None,
) -> np.ndarray:
    """Step deltas of ``S`` consecutive single-sample SGD steps, shape (S, d)."""
    params = global_params.copy()
    out = np.empty((S, params.size))
    for s in range(S):
        _, grads = radionet.loss_and_grad(params, x[None], y[None], phase)
        stepped = guarded_step(params, grads, lr, max_grad_norm)
        out[s] = stepped.data - params.data
        params = stepped
    return out


def collect_trace(
    global_params: ParamVector,
    sample,
    phase: str,
    S: int,
    lr: float,
    defend: Callable[[np.ndarray], np.ndarray] | None = None,
    client_id: int = 0,
    round_index: int = 0,
    max_grad_norm: float | None = None,
) -> UploadTrace:
    """Record what an observer sees for ``sample`` (a :class:`RadioSample`).

    ``defend`` maps a raw step delta to the transmitted vector; ``None`` sends
    the raw delta.
    """
    x = np.stack([sample.building, sample.tx_raster]).astype(np.float64)
    y = sample.target[None].astype(np.float64)
    raw = raw_trace_steps(global_params, x, y, phase, S, lr, max_grad_norm)
    sent = raw.copy() if defend is None else np.stack([defend(step) for step in raw])
    return UploadTrace(
        sent,
        np.asarray(sample.tx_coord_m, dtype=np.float64),
        client_id,
        round_index,
        int(sample.map_id),
        raw,
    )


def group_stats(v: np.ndarray, masks: GroupMaskSet):
    """Per-group (norm, mean, std) of the last axis of ``v``; each (..., G)."""
    sel = masks.masks.astype(np.float64)  # (G, d)
    sizes = masks.sizes.astype(np.float64)
    norm = np.sqrt((v * v) @ sel.T)
    mean = (v @ sel.T) / sizes
    centered = v - mean[..., masks.labels]
    std = np.sqrt((centered * centered) @ sel.T / sizes)
    return norm, mean, std


def extract_fingerprint(steps: np.ndarray, masks: GroupMaskSet) -> np.ndarray:
    """(S, d) or (N, S, d) step vectors to (3GS,) or (N, 3GS) fingerprints."""
    norm, mean, std = group_stats(steps, masks)
    fp = np.stack([norm, mean, std], axis=-1)  # (..., S, G, 3)
    return fp.reshape(*fp.shape[:-3], -1)


def fingerprint_backward(
    steps: np.ndarray, masks: GroupMaskSet, grad_fp: np.ndarray
) -> np.ndarray:
    """Gradient of a scalar w.r.t. ``steps`` given its gradient w.r.t. the fingerprint.

    The norm and std terms use 0 as subgradient where the statistic is 0.
    """
    norm, mean, std = group_stats(steps, masks)
    g = grad_fp.reshape(*norm.shape, 3)
    sizes = masks.sizes.astype(np.float64)
    safe_norm = np.where(norm > 0, norm, 1.0)
    safe_std = np.where(std > 0, std, 1.0)
    g_norm = np.where(norm > 0, g[..., 0] / safe_norm, 0.0)
    g_mean = g[..., 1] / sizes
    g_std = np.where(std > 0, g[..., 2] / (sizes * safe_std), 0.0)
    lab = masks.labels
    centered = steps - mean[..., lab]
    return steps * g_norm[..., lab] + g_mean[..., lab] + centered * g_std[..., lab]


@dataclass
class ProxyAttacker:
    """Perceptron from standardized fingerprints to (x, y) in units of ``extent``.

    ``feat_mean``/``feat_scale`` are refreshed when the attacker is trained and
    are constants everywhere else.
    """

    params: ParamVector
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    extent: float

    def predict(self, fps: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.params, (fps - self.feat_mean) / self.feat_scale)
        return (out + 0.5) * self.extent


def proxy_init(
    rng: np.random.Generator, n_features: int, hidden: int, extent: float
) -> ProxyAttacker:
    return ProxyAttacker(
        mlp_init(rng, n_features, hidden, 2, out_scale=0.1),
        np.zeros(n_features),
        np.ones(n_features),
        float(extent),
    )


def fit_scaler(fps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = fps.mean(axis=0)
    std = fps.std(axis=0)
    return mean, np.where(std > 1e-12 * (1.0 + np.abs(mean)), std, 1.0)


def proxy_loss_and_grad(
    proxy: ProxyAttacker, fps: np.ndarray, coords_m: np.ndarray
) -> tuple[float, ParamVector, np.ndarray]:
    """Mean squared localization error in meters^2.

    Returns ``(loss, grad_params, grad_fps)``.
    """
    z = (fps - proxy.feat_mean) / proxy.feat_scale
    out, cache = mlp_forward(proxy.params, z)
    pred = (out + 0.5) * proxy.extent
    diff = pred - coords_m
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    g_pred = 2.0 * diff / len(fps)
    grads, g_z = mlp_backward(proxy.params, cache, g_pred * proxy.extent)
    return loss, grads, g_z / proxy.feat_scale


def proxy_train_step(
    proxy: ProxyAttacker,
    fps: np.ndarray,
    coords_m: np.ndarray,
    lr: float,
    refresh_scaler: bool = True,
) -> tuple[ProxyAttacker, float]:
    """One SGD step on the mean squared error; the loss is scaled by
    ``1 / extent^2`` for the step so ``lr`` is unit-free."""
    if len(fps) == 0:
        raise ValueError("empty proxy batch")
    if refresh_scaler:
        mean, scale = fit_scaler(fps)
        proxy = ProxyAttacker(proxy.params, mean, scale, proxy.extent)
    loss, grads, _ = proxy_loss_and_grad(proxy, fps, coords_m)
    new_params = proxy.params.with_data(proxy.params.data - lr * grads.data / proxy.extent**2)
    return ProxyAttacker(new_params, proxy.feat_mean, proxy.feat_scale, proxy.extent), loss


def split_by_map(
    map_ids: np.ndarray, train_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, test) with no map on both sides."""
    maps = rng.permutation(np.unique(map_ids))
    if len(maps) < 2:
        raise ValueError("need traces from at least two maps")
    n_train = int(np.clip(round(train_fraction * len(maps)), 1, len(maps) - 1))
    train_maps = maps[:n_train]
    in_train = np.isin(map_ids, train_maps)
    return np.flatnonzero(in_train), np.flatnonzero(~in_train)


def train_attacker(
    fps: np.ndarray,
    coords_m: np.ndarray,
    map_ids: np.ndarray,
    config: AttackConfig,
    rng: np.random.Generator,
    extent: float,
) -> Callable[[np.ndarray], np.ndarray]:
    """Full-batch momentum GD with weight decay, early-stopped on held-out maps."""
    if config.holdout_fraction > 0 and len(np.unique(map_ids)) >= 3:
        fit_idx, hold_idx = split_by_map(map_ids, 1.0 - config.holdout_fraction, rng)
    else:
        fit_idx, hold_idx = np.arange(len(fps)), np.arange(0)
    proxy = proxy_init(rng, fps.shape[1], config.hidden, extent)
    mean, scale = fit_scaler(fps[fit_idx])
    proxy = ProxyAttacker(proxy.params, mean, scale, extent)
    x_fit, y_fit = fps[fit_idx], coords_m[fit_idx]
    best, best_loss = proxy.params.data.copy(), np.inf
    velocity = np.zeros_like(best)
    for _ in range(config.epochs):
        if len(hold_idx):
            hold_loss, _, _ = proxy_loss_and_grad(proxy, fps[hold_idx], coords_m[hold_idx])
            if hold_loss < best_loss:
                best_loss, best = hold_loss, proxy.params.data.copy()
        _, grads, _ = proxy_loss_and_grad(proxy, x_fit, y_fit)
        step = grads.data / extent**2 + config.weight_decay * proxy.params.data
        velocity = 0.9 * velocity + step
        proxy.params.data -= config.lr * velocity
    if len(hold_idx):
        hold_loss, _, _ = proxy_loss_and_grad(proxy, fps[hold_idx], coords_m[hold_idx])
        if hold_loss < best_loss:
            best = proxy.params.data.copy()
        proxy.params.data[:] = best
    return proxy.predict


def eval_attacker(
    traces: list[UploadTrace],
    masks: GroupMaskSet,
    config: AttackConfig,
    rng: np.random.Generator,
    extent: float,
    fit: Callable | None = None,
) -> float:
    """Localization RMSE (meters) on traces from maps unseen in training.

    ``fit(fps, coords, map_ids) -> predict`` overrides the default attacker.
    """
    if len(traces) < config.min_traces:
        raise ValueError(f"need at least {config.min_traces} traces, got {len(traces)}")
    fps = np.stack([extract_fingerprint(t.steps, masks) for t in traces])
    coords = np.stack([t.coord_m for t in traces])
    map_ids = np.array([t.map_id for t in traces])
    train_idx, test_idx = split_by_map(map_ids, config.train_fraction, rng)
    if fit is None:
        predict = train_attacker(
            fps[train_idx], coords[train_idx], map_ids[train_idx], config, rng, extent
        )
    else:
        predict = fit(fps[train_idx], coords[train_idx], map_ids[train_idx])
    err = predict(fps[test_idx]) - coords[test_idx]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def centroid_rmse(coords_m: np.ndarray) -> float:
    """RMSE of always predicting the mean position."""
    diff = coords_m - coords_m.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def write_traces(path: str | Path, traces: list[UploadTrace]) -> None:
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", TRACE_VERSION))
        for t in traces:
            S, d = t.steps.shape
            fh.write(struct.pack("<HI", S, d))
            fh.write(np.ascontiguousarray(t.steps, dtype="<f4").tobytes())
            fh.write(struct.pack("<ffHH", t.coord_m[0], t.coord_m[1], t.client_id, t.round_index))


def read_traces(path: str | Path) -> list[UploadTrace]:
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos, traces = 8, []
    while pos < len(raw):
        S, d = struct.unpack_from("<HI", raw, pos)
        pos += 6
        steps = np.frombuffer(raw, dtype="<f4", count=S * d, offset=pos).reshape(S, d)
        pos += 4 * S * d
        x, y, client_id, round_index = struct.unpack_from("<ffHH", raw, pos)
        pos += 12
        traces.append(
            UploadTrace(steps.astype(np.float64), np.array([x, y]), client_id, round_index)
        )
    return traces
