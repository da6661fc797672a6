"""Upload defenses under a fixed second-moment noise budget.

Every noise scheme clips the update to l2 norm ``C`` and then spends the same
budget ``B = d * (C * nu)**2`` of expected squared noise:

* ``uniform``: N(0, (C nu)^2) on every coordinate;
* ``directed_uniform``: the whole budget on the transmitter-coupled groups;
* ``adaptive``: a per-client perceptron maps upload statistics to softmax
  weights ``w`` and group ``g`` receives energy ``B * w_g`` spread evenly over
  its ``d_g`` coordinates.

The allocator is trained with a reparameterized gradient: noise is
``sigma_g(eta) * eps`` with ``eps`` held fixed for the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import radionet
from .attack import (
    ProxyAttacker,
    extract_fingerprint,
    fingerprint_backward,
    proxy_init,
    proxy_loss_and_grad,
    proxy_train_step,
)
from .gradcore import ParamVector
from .mlp import mlp_backward, mlp_forward, mlp_init
from .radionet import GroupMaskSet

SCHEMES = ("none", "clip_only", "fedsgd", "uniform", "directed_uniform", "adaptive")
NOISE_SCHEMES = ("uniform", "directed_uniform", "adaptive")
SENSITIVE_GROUPS = (0, 1)


class AllocatorDivergence(FloatingPointError):
    """Raised when allocator logits or gradients stop being finite."""


@dataclass(frozen=True)
class DefenseConfig:
    scheme: str = "none"
    clip_C: float = 1.0
    noise_multiplier: float = 3.0
    lambda_p: float = 1.0
    lambda_h: float = 0.1
    allocator_lr: float = 0.3
    proxy_lr: float = 0.05
    proxy_steps_per_round: int = 4
    allocator_steps_per_round: int = 4
    allocator_hidden: int = 32
    allocator_grad_clip: float = 1.0
    trace_buffer: int = 32

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.clip_C <= 0:
            raise ValueError("clip_C must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.lambda_p <= 0 or self.lambda_h <= 0:
            raise ValueError("lambda_p and lambda_h must be positive")

    @property
    def sigma0(self) -> float:
        return self.clip_C * self.noise_multiplier

    def budget(self, d: int) -> float:
        return d * self.sigma0**2


def clip(delta, C: float):
    """Scale ``delta`` (array or ParamVector) onto the l2 ball of radius ``C``."""
    if C <= 0:
        raise ValueError("clip threshold must be positive")
    data = delta.data if isinstance(delta, ParamVector) else np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(data))
    out = data if norm <= C else data * (C / norm)
    return delta.with_data(out.copy()) if isinstance(delta, ParamVector) else out.copy()


def _vec(delta) -> np.ndarray:
    return delta.data if isinstance(delta, ParamVector) else np.asarray(delta, dtype=np.float64)


def extract_stats(delta, masks: GroupMaskSet, r: int, R: int, phase: float) -> np.ndarray:
    """Upload descriptor of length 4G+3.

    Per group: l2 norm, mean |x|, population std, d_g/d.  Then the global
    l2 norm, r/R, and the phase indicator.
    """
    v = _vec(delta)
    sel = masks.masks.astype(np.float64)
    sizes = masks.sizes.astype(np.float64)
    norm = np.sqrt(sel @ (v * v))
    mean_abs = sel @ np.abs(v) / sizes
    mean = sel @ v / sizes
    centered = v - mean[masks.labels]
    std = np.sqrt(sel @ (centered * centered) / sizes)
    per_group = np.stack([norm, mean_abs, std, sizes / masks.d], axis=1).ravel()
    return np.concatenate([per_group, [np.linalg.norm(v), r / max(R, 1), float(phase)]])


def phase_indicator(phase: str) -> float:
    return 0.0 if phase == "stage1" else 1.0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    pos = w > 0
    return float(-np.sum(w[pos] * np.log(w[pos])))


def allocator_init(rng: np.random.Generator, G: int, hidden: int = 32) -> ParamVector:
    return mlp_init(rng, 4 * G + 3, hidden, G, out_scale=0.1)


def allocator_logits(allocator: ParamVector, stats: np.ndarray):
    """Logits for (N, 4G+3) stats; inputs are log1p-compressed.  Returns (logits, cache)."""
    logits, cache = mlp_forward(allocator, np.log1p(np.atleast_2d(stats)))
    if not np.all(np.isfinite(logits)):
        raise AllocatorDivergence("allocator produced non-finite logits")
    return logits, cache


@dataclass
class NoisePlan:
    w: np.ndarray
    E: np.ndarray
    sigma: np.ndarray


def plan_from_weights(w: np.ndarray, B: float, masks: GroupMaskSet) -> NoisePlan:
    E = np.maximum(B * w, 0.0)
    return NoisePlan(w, E, np.sqrt(E / masks.sizes))


def allocate(stats: np.ndarray, allocator: ParamVector, B: float, masks: GroupMaskSet) -> NoisePlan:
    if B <= 0:
        raise ValueError("budget must be positive")
    logits, _ = allocator_logits(allocator, stats)
    return plan_from_weights(softmax(logits[0]), B, masks)


def privatize_uniform(clipped, sigma0: float, rng: np.random.Generator):
    v = _vec(clipped)
    out = v + sigma0 * rng.standard_normal(v.shape)
    return clipped.with_data(out) if isinstance(clipped, ParamVector) else out


def directed_sigma(masks: GroupMaskSet, B: float) -> float:
    d_sens = int(sum(masks.sizes[g] for g in SENSITIVE_GROUPS))
    if d_sens == 0:
        raise ValueError("no sensitive coordinates")
    return float(np.sqrt(B / d_sens))


def privatize_directed(clipped, masks: GroupMaskSet, B: float, rng: np.random.Generator):
    v = _vec(clipped)
    sigma = directed_sigma(masks, B)
    sens = np.isin(masks.labels, SENSITIVE_GROUPS)
    out = v.copy()
    out[sens] += sigma * rng.standard_normal(int(sens.sum()))
    return clipped.with_data(out) if isinstance(clipped, ParamVector) else out


def privatize_adaptive(clipped, plan: NoisePlan, masks: GroupMaskSet, rng: np.random.Generator):
    v = _vec(clipped)
    if len(plan.sigma) != masks.G:
        raise ValueError("plan and masks disagree on the number of groups")
    out = v + plan.sigma[masks.labels] * rng.standard_normal(v.shape)
    return clipped.with_data(out) if isinstance(clipped, ParamVector) else out


@dataclass
class AllocatorProblem:
    """Everything the allocator objective needs, with the noise draws frozen.

    Upload terms use the client's own update; proxy terms use buffered trace
    steps of shape (J, S, d).
    """

    B: float
    masks: GroupMaskSet
    snapshot: ParamVector
    active: np.ndarray
    phase: str
    eval_x: np.ndarray
    eval_y: np.ndarray
    upload_stats: np.ndarray
    upload_clipped: np.ndarray
    upload_eps: np.ndarray
    proxy: ProxyAttacker | None
    trace_stats: np.ndarray  # (J, S, 4G+3)
    trace_clipped: np.ndarray  # (J, S, d)
    trace_eps: np.ndarray  # (J, S, d)
    trace_coords: np.ndarray  # (J, 2)
    lambda_p: float
    lambda_h: float


def allocator_objective(allocator: ParamVector, prob: AllocatorProblem):
    """``L_task - lambda_p * L_proxy - lambda_h * H(w)`` and its gradient in eta.

    Returns ``(loss, grad, parts)`` with ``parts`` holding the three terms and
    the upload weights.
    """
    masks, lab = prob.masks, prob.masks.labels
    n_feat = prob.upload_stats.size
    J = len(prob.trace_coords)
    use_proxy = prob.proxy is not None and J > 0
    stats = prob.upload_stats[None]
    if use_proxy:
        stats = np.vstack([stats, prob.trace_stats.reshape(-1, n_feat)])
    logits, cache = allocator_logits(allocator, stats)
    w = softmax(logits)
    scale = np.sqrt(prob.B / masks.sizes)  # sigma_g = scale_g * sqrt(w_g)
    sigma = scale * np.sqrt(w)
    g_sigma = np.zeros_like(sigma)

    # one-step lookahead through the server update
    noise = sigma[0][lab] * prob.upload_eps
    theta = prob.snapshot.with_data(
        np.where(prob.active, prob.snapshot.data + prob.upload_clipped + noise, prob.snapshot.data)
    )
    task, g_theta = radionet.loss_and_grad(theta, prob.eval_x, prob.eval_y, prob.phase)
    g_sigma[0] = np.bincount(
        lab, weights=np.where(prob.active, g_theta.data, 0.0) * prob.upload_eps, minlength=masks.G
    )

    proxy_loss = 0.0
    if use_proxy:
        S = prob.trace_clipped.shape[1]
        sig_tr = sigma[1:].reshape(J, S, masks.G)
        sent = prob.trace_clipped + sig_tr[..., lab] * prob.trace_eps
        fps = extract_fingerprint(sent, masks)
        proxy_loss, _, g_fps = proxy_loss_and_grad(prob.proxy, fps, prob.trace_coords)
        g_sent = fingerprint_backward(sent, masks, g_fps)
        g_sig_tr = (g_sent * prob.trace_eps) @ masks.masks.T.astype(np.float64)
        g_sigma[1:] = -prob.lambda_p * g_sig_tr.reshape(J * S, masks.G)

    H = entropy(w[0])
    loss = task - prob.lambda_p * proxy_loss - prob.lambda_h * H

    safe_w = np.maximum(w, 1e-300)
    g_w = g_sigma * scale / (2.0 * np.sqrt(safe_w))
    g_w[0] += prob.lambda_h * (np.log(safe_w[0]) + 1.0)
    g_logits = w * (g_w - np.sum(w * g_w, axis=1, keepdims=True))
    grads, _ = mlp_backward(allocator, cache, g_logits)
    if not np.all(np.isfinite(grads.data)):
        raise AllocatorDivergence("allocator gradient is not finite")
    parts = {"task": task, "proxy": proxy_loss, "entropy": H, "w": w[0]}
    return float(loss), grads, parts


def allocator_update(
    allocator: ParamVector, prob: AllocatorProblem, lr: float, grad_clip: float | None = None
) -> tuple[ParamVector, dict]:
    """One (optionally norm-clipped) gradient step on the allocator objective."""
    loss, grads, parts = allocator_objective(allocator, prob)
    g = grads.data
    norm = float(np.linalg.norm(g))
    if grad_clip is not None and norm > grad_clip:
        g = g * (grad_clip / norm)
    parts["loss"], parts["grad_norm"] = loss, norm
    return allocator.with_data(allocator.data - lr * g), parts


@dataclass
class Telemetry:
    w: np.ndarray | None = None
    sigma: np.ndarray | None = None
    clipped: bool = False


@dataclass
class ClientDefense:
    """Per-client defense state: allocator, proxy attacker, and raw trace buffer."""

    config: DefenseConfig
    masks: GroupMaskSet
    allocator: ParamVector | None = None
    proxy: ProxyAttacker | None = None
    buffer: list = field(default_factory=list)  # (raw (S,d), stats (S,F), coord (2,))

    @classmethod
    def create(
        cls,
        config: DefenseConfig,
        masks: GroupMaskSet,
        rng: np.random.Generator,
        steps: int,
        proxy_hidden: int,
        extent: float,
    ) -> "ClientDefense":
        if config.scheme != "adaptive":
            return cls(config, masks)
        allocator = allocator_init(rng, masks.G, config.allocator_hidden)
        proxy = proxy_init(rng, 3 * masks.G * steps, proxy_hidden, extent)
        return cls(config, masks, allocator, proxy)

    @property
    def B(self) -> float:
        return self.config.budget(self.masks.d)

    def apply(self, raw: np.ndarray, stats: np.ndarray | None, rng: np.random.Generator):
        """Transmitted vector for one raw delta; returns ``(sent, telemetry)``."""
        cfg = self.config
        scheme = cfg.scheme
        if scheme in ("none", "fedsgd"):
            return raw.copy(), Telemetry()
        clipped = clip(raw, cfg.clip_C)
        was_clipped = bool(np.linalg.norm(raw) > cfg.clip_C)
        if scheme == "clip_only" or cfg.noise_multiplier == 0:
            return clipped, Telemetry(clipped=was_clipped)
        sizes = self.masks.sizes
        if scheme == "uniform":
            sigma = np.full(self.masks.G, cfg.sigma0)
            w = sizes / self.masks.d
            return privatize_uniform(clipped, cfg.sigma0, rng), Telemetry(w, sigma, was_clipped)
        if scheme == "directed_uniform":
            s = directed_sigma(self.masks, self.B)
            sens = np.isin(np.arange(self.masks.G), SENSITIVE_GROUPS)
            sigma = np.where(sens, s, 0.0)
            w = np.where(sens, sizes, 0) / sizes[sens].sum()
            return privatize_directed(clipped, self.masks, self.B, rng), Telemetry(w, sigma, was_clipped)
        plan = allocate(stats, self.allocator, self.B, self.masks)
        sent = privatize_adaptive(clipped, plan, self.masks, rng)
        return sent, Telemetry(plan.w, plan.sigma, was_clipped)

    def remember(self, raw_steps: np.ndarray, stats: np.ndarray, coord_m: np.ndarray) -> None:
        self.buffer.append((raw_steps, stats, np.asarray(coord_m, dtype=np.float64)))
        del self.buffer[: -self.config.trace_buffer]

    def _buffer_arrays(self):
        raw = np.stack([b[0] for b in self.buffer])
        stats = np.stack([b[1] for b in self.buffer])
        coords = np.stack([b[2] for b in self.buffer])
        clipped = np.stack([[clip(step, self.config.clip_C) for step in tr] for tr in raw])
        return clipped, stats, coords

    def train_proxy(self, rng: np.random.Generator) -> float:
        """One proxy step on the buffer privatized under the current allocator."""
        clipped, stats, coords = self._buffer_arrays()
        J, S, _ = clipped.shape
        logits, _ = allocator_logits(self.allocator, stats.reshape(J * S, -1))
        sigma = np.sqrt(self.B * softmax(logits) / self.masks.sizes).reshape(J, S, -1)
        sent = clipped + sigma[..., self.masks.labels] * rng.standard_normal(clipped.shape)
        fps = extract_fingerprint(sent, self.masks)
        self.proxy, loss = proxy_train_step(self.proxy, fps, coords, self.config.proxy_lr)
        return loss

    def train_allocator(
        self,
        snapshot: ParamVector,
        phase: str,
        eval_x: np.ndarray,
        eval_y: np.ndarray,
        upload_raw: np.ndarray,
        upload_stats: np.ndarray,
        rng: np.random.Generator,
    ) -> dict:
        clipped, stats, coords = self._buffer_arrays()
        prob = AllocatorProblem(
            B=self.B,
            masks=self.masks,
            snapshot=snapshot,
            active=radionet.stage_mask(snapshot.layout, phase),
            phase=phase,
            eval_x=eval_x,
            eval_y=eval_y,
            upload_stats=upload_stats,
            upload_clipped=clip(upload_raw, self.config.clip_C),
            upload_eps=rng.standard_normal(upload_raw.shape),
            proxy=self.proxy,
            trace_stats=stats,
            trace_clipped=clipped,
            trace_eps=rng.standard_normal(clipped.shape),
            trace_coords=coords,
            lambda_p=self.config.lambda_p,
            lambda_h=self.config.lambda_h,
        )
        self.allocator, parts = allocator_update(
            self.allocator, prob, self.config.allocator_lr, self.config.allocator_grad_clip
        )
        return parts
