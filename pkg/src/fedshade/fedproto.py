"""Federated rounds: client sampling, local training, weighted aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import radionet
from .gradcore import ParamVector, sgd_step
from .synthdata import RadioDataset


@dataclass
class ClientState:
    client_id: int
    shard: RadioDataset
    p_k: float


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    phase: str  # "stage1" | "stage2" | "joint"
    selected: tuple[int, ...]
    local_epochs: int = 1
    batch_size: int = 16
    local_lr: float = 0.3
    max_grad_norm: float | None = 5.0


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    delta: ParamVector
    sample_count: int
    train_loss: float = float("nan")


def guarded_step(
    params: ParamVector, grads: ParamVector, lr: float, max_grad_norm: float | None
) -> ParamVector:
    """SGD step with the gradient rescaled onto a norm ball.

    Keeps local training finite once heavy upload noise has wrecked the global
    model; inactive whenever ``||grad|| <= max_grad_norm``.
    """
    if max_grad_norm is not None:
        norm = float(np.linalg.norm(grads.data))
        if norm > max_grad_norm:
            grads = grads.with_data(grads.data * (max_grad_norm / norm))
    return sgd_step(params, grads, lr)


def make_clients(data: RadioDataset, shards: list[np.ndarray]) -> list[ClientState]:
    total = sum(len(s) for s in shards)
    return [
        ClientState(k, data.subset(idx), len(idx) / total) for k, idx in enumerate(shards)
    ]


def phase_for_round(r: int, split: int) -> str:
    return "stage1" if r < split else "stage2"


def select_clients(rng: np.random.Generator, K: int, m: int) -> tuple[int, ...]:
    """``m`` distinct client ids, uniform without replacement, returned sorted."""
    if not 1 <= m <= K:
        raise ValueError(f"cannot select {m} of {K} clients")
    return tuple(int(k) for k in np.sort(rng.choice(K, size=m, replace=False)))


def local_train(
    global_params: ParamVector,
    client: ClientState,
    plan: RoundPlan,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Minibatch SGD over the shard for the phase's stage; returns local - global."""
    n = len(client.shard)
    if n == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")
    x_all, y_all = client.shard.inputs(), client.shard.targets()
    params = global_params.copy()
    losses = []
    for _ in range(plan.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            loss, grads = radionet.loss_and_grad(params, x_all[idx], y_all[idx], plan.phase)
            losses.append(loss)
            params = guarded_step(params, grads, plan.local_lr, plan.max_grad_norm)
    delta = global_params.with_data(params.data - global_params.data)
    # frozen coordinates never receive gradient, but make the zero exact
    delta.data[~radionet.stage_mask(delta.layout, plan.phase)] = 0.0
    return ClientUpdate(
        client.client_id,
        plan.round_index,
        delta,
        n,
        float(np.mean(losses)) if losses else float("nan"),
    )


def fedsgd_step(
    global_params: ParamVector,
    client: ClientState,
    plan: RoundPlan,
    rng: np.random.Generator,
) -> ClientUpdate:
    """One SGD step on one minibatch of the composed two-stage loss."""
    n = len(client.shard)
    if n == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")
    idx = rng.permutation(n)[: plan.batch_size]
    loss, grads = radionet.loss_and_grad(
        global_params, client.shard.inputs()[idx], client.shard.targets()[idx], "joint"
    )
    stepped = guarded_step(global_params, grads, plan.local_lr, plan.max_grad_norm)
    delta = global_params.with_data(stepped.data - global_params.data)
    return ClientUpdate(client.client_id, plan.round_index, delta, len(idx), loss)


def aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Sample-count weighted mean of the deltas.

    Summation runs in client-id order so the result does not depend on the
    order of ``updates``.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: (u.client_id, u.round_index))
    ref = ordered[0].delta
    counts = np.array([u.sample_count for u in ordered], dtype=np.float64)
    weights = counts / counts.sum()
    total = np.zeros_like(ref.data)
    for w, u in zip(weights, ordered):
        ref.check_layout(u.delta)
        total += w * u.delta.data
    return ref.with_data(total)


def apply_update(params: ParamVector, aggregated: ParamVector, phase: str) -> ParamVector:
    """Server step with unit rate; coordinates frozen in ``phase`` are discarded."""
    params.check_layout(aggregated)
    active = radionet.stage_mask(params.layout, phase)
    return params.with_data(np.where(active, params.data + aggregated.data, params.data))


def noise_attenuation_check(
    sigma: float,
    K_r: int,
    trials: int,
    rng: np.random.Generator,
    dim: int = 8,
) -> np.ndarray:
    """Per-coordinate empirical std of the mean of ``K_r`` N(0, sigma^2) vectors."""
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    noise = rng.normal(0.0, sigma, size=(trials, K_r, dim))
    return noise.mean(axis=1).std(axis=0)
