"""Noise schedule, forward corruption, the noise predictor and unguided sampling.

Timesteps are 1-based throughout: ``t`` runs from ``T`` (noisiest) down to 1,
and ``alpha_bar(0) == 1`` stands for the clean signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .nn import Module, fan_in_normal
from .tensor import Tensor

EMBED_DIM = 32

Predictor = Callable[[Tensor, "int | np.ndarray"], Tensor]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside 1..{self.steps}")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])


def make_schedule(steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear-in-beta schedule including both endpoints."""
    if steps < 1:
        raise ConfigError(f"schedule needs at least one step, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, steps, dtype=np.float64) if steps > 1 else np.array([beta_min])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _per_sample(values: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(values, dtype=like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))


def q_sample(x0: Tensor, t, eps, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is either one timestep for the whole batch or one per sample.
    """
    x0 = tn.as_tensor(x0)
    eps = tn.as_tensor(eps, like=x0)
    if x0.shape != eps.shape:
        raise tn.ShapeError(f"q_sample: x0 {x0.shape} and eps {eps.shape} differ")
    ts = np.atleast_1d(np.asarray(t))
    ab = np.array([sched.alpha_bar_at(sched.check_t(s)) for s in ts])
    if ts.size == 1 and np.ndim(t) == 0:
        a, b = np.sqrt(ab[0]), np.sqrt(1.0 - ab[0])
        return tn.add(tn.mul(x0, a), tn.mul(eps, b))
    a = _per_sample(np.sqrt(ab), x0)
    b = _per_sample(np.sqrt(1.0 - ab), x0)
    return tn.add(tn.mul(x0, a), tn.mul(eps, b))


def compute_sigma2(t: int, sched: NoiseSchedule) -> float:
    """DDPM posterior variance written in the DDIM form with cumulative products."""
    t = sched.check_t(t)
    if t == 1:
        return 0.0
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    return (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)


def timestep_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class NoisePredictor(Module):
    """Timestep-conditioned noise estimator on B×H×W×D feature maps.

    A stride-2 conv, two gated residual blocks, a stride-2 transposed conv
    and a conv head.  An MLP on the timestep embedding emits per-channel
    scale/shift for every normalization and a gate for each residual branch;
    the prediction is ``x_t + head(...)``.
    """

    N_RES = 2
    # conditioning layout: (scale, shift) for down, (scale, shift, gate) per
    # residual block, (scale, shift) for up
    _COND_SLOTS = 2 + 3 * N_RES + 2

    def __init__(self, depth: int, seed: int = 0, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.depth = depth
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        d, e = depth, embed_dim
        self.add_param("mlp.w1", fan_in_normal(rng, (e, e), e))
        self.add_param("mlp.b1", np.zeros(e, np.float32))
        self.add_param("mlp.w2", np.zeros((e, self._COND_SLOTS * d), np.float32))
        self.add_param("mlp.b2", self.neutral_conditioning())
        self.add_param("down.w", fan_in_normal(rng, (3, 3, d, d), 9 * d))
        for i in range(self.N_RES):
            self.add_param(f"res{i}.w", fan_in_normal(rng, (3, 3, d, d), 9 * d))
        self.add_param("up.w", fan_in_normal(rng, (3, 3, d, d), 9 * d))
        self.add_param("out.w", fan_in_normal(rng, (3, 3, d, d), 9 * d, gain=0.1))
        self.add_param("out.b", np.zeros(d, np.float32))

    def neutral_conditioning(self) -> np.ndarray:
        """Bias vector giving scale=1, shift=0, gate=0 in every slot."""
        d = self.depth
        parts = [np.ones(d), np.zeros(d)]
        for _ in range(self.N_RES):
            parts += [np.ones(d), np.zeros(d), np.zeros(d)]
        parts += [np.ones(d), np.zeros(d)]
        return np.concatenate(parts).astype(np.float32)

    def conditioning(self, t, batch: int, dtype) -> list[Tensor]:
        ts = np.atleast_1d(np.asarray(t))
        if ts.size == 1:
            ts = np.repeat(ts, batch)
        emb = Tensor(timestep_embedding(ts, self.embed_dim), dtype=dtype)
        p = self.params
        h = tn.relu(tn.add(tn.matmul(emb, p["mlp.w1"]), p["mlp.b1"]))
        c = tn.add(tn.matmul(h, p["mlp.w2"]), p["mlp.b2"])
        c = tn.reshape(c, (batch, 1, 1, self._COND_SLOTS, self.depth))
        slots = []
        for i in range(self._COND_SLOTS):
            onehot = np.zeros((1, 1, 1, self._COND_SLOTS, 1), dtype=dtype)
            onehot[0, 0, 0, i, 0] = 1
            slots.append(tn.sum(tn.mul(c, onehot), axis=3))
        return slots

    def __call__(self, x: Tensor, t) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.depth:
            raise tn.ShapeError(f"NoisePredictor: expected B×H×W×{self.depth}, got {x.shape}")
        if x.shape[1] % 2 or x.shape[2] % 2 or x.shape[1] < 2 or x.shape[2] < 2:
            raise tn.ShapeError(f"NoisePredictor: spatial dims must be even and >= 2, got {x.shape}")
        p = self.params
        cond = iter(self.conditioning(t, x.shape[0], x.dtype))

        def film(h):
            scale, shift = next(cond), next(cond)
            return tn.relu(tn.add(tn.mul(tn.standardize(h), scale), shift))

        h = film(tn.conv2d(x, p["down.w"], stride=2))
        for i in range(self.N_RES):
            r = film(tn.conv2d(h, p[f"res{i}.w"]))
            h = tn.add(h, tn.mul(r, next(cond)))
        u = film(tn.conv_transpose2d(h, p["up.w"]))
        delta = tn.add(tn.conv2d(u, p["out.w"]), p["out.b"])
        return tn.add(x, delta)


def diffusion_loss(model: Predictor, x0_batch, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Mean squared error between injected and predicted noise.

    One timestep per sample, uniform over 1..T, drawn before the noise.
    """
    x0 = tn.as_tensor(x0_batch)
    if x0.ndim == 0 or x0.shape[0] == 0:
        raise ValueError("diffusion_loss: empty batch")
    t = rng.integers(1, sched.steps + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    return tn.mean(tn.square(tn.sub(Tensor(eps, dtype=x0.dtype), model(x_t, t))))


def posterior_params(model: Predictor, x_t, t: int, sched: NoiseSchedule) -> tuple[Tensor, float]:
    """Reverse-step mean rebuilt from the noise estimate, and its variance."""
    t = sched.check_t(t)
    x_t = tn.as_tensor(x_t)
    eps_hat = model(x_t, t)
    coef = sched.beta_at(t) / np.sqrt(1.0 - sched.alpha_bar_at(t))
    mu = tn.mul(tn.sub(x_t, tn.mul(eps_hat, coef)), 1.0 / np.sqrt(sched.alpha_at(t)))
    return mu, compute_sigma2(t, sched)


def unguided_step(model: Predictor, x_t, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    mu, sigma2 = posterior_params(model, x_t, t, sched)
    if t == 1:
        return mu
    z = rng.standard_normal(mu.shape).astype(mu.dtype)
    return tn.add(mu, Tensor(np.sqrt(sigma2) * z, dtype=mu.dtype))
