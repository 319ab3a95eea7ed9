"""Distillation and task losses.

Feature losses operate on batched maps (B×H×W×D) or pooled vectors (B×D)
and average over the batch; single unbatched inputs are accepted too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .diffusion import ConfigError
from .tensor import Tensor

PROB_CLAMP = 1e-7
BIAS_MODES = ("gaussian", "zero")


@dataclass(frozen=True)
class LshHead:
    """Frozen random hyperplanes: W ~ N(0,1) of shape D×M, b per ``bias_mode``."""

    depth: int
    num_hashes: int
    seed: int
    bias_mode: str = "gaussian"
    W: np.ndarray = field(init=False, repr=False, compare=False)
    b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.num_hashes < 1 or self.depth < 1:
            raise ConfigError("LSH head needs positive depth and hash count")
        rng = np.random.default_rng(self.seed)
        W = rng.standard_normal((self.depth, self.num_hashes)).astype(np.float32)
        if self.bias_mode == "gaussian":
            b = rng.standard_normal(self.num_hashes).astype(np.float32)
        else:
            b = np.zeros(self.num_hashes, np.float32)
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    def preactivation(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.depth:
            raise tn.ShapeError(f"LSH head: vector length {v.shape[-1]} != depth {self.depth}")
        return tn.add(tn.matmul(v, Tensor(self.W, dtype=v.dtype)), Tensor(self.b, dtype=v.dtype))


def local_loss(f, f_hat) -> Tensor:
    """Per-element mean squared difference.

    Gradient routing is the caller's business: pass a detached ``f_hat`` to
    keep it a fixed target.
    """
    f, f_hat = tn.as_tensor(f), tn.as_tensor(f_hat)
    if f.shape != f_hat.shape:
        raise tn.ShapeError(f"local_loss: shapes {f.shape} and {f_hat.shape} differ")
    return tn.mean(tn.square(tn.sub(f, f_hat)))


def soft_codes(v, head: LshHead) -> Tensor:
    return tn.sigmoid(head.preactivation(tn.as_tensor(v)))


def hash_codes(v_hat, head: LshHead) -> np.ndarray:
    """Binary codes: 1 where the pre-activation is strictly positive."""
    v = tn.as_tensor(v_hat)
    with tn.no_grad():
        s = head.preactivation(v.detach()).data
    return (s > 0).astype(v.dtype)


def global_loss(v, v_hat, head: LshHead) -> Tensor:
    """Binary cross-entropy of soft codes of ``v`` against hash codes of ``v_hat``."""
    v = tn.as_tensor(v)
    delta = hash_codes(v_hat, head)
    rho = tn.clip(soft_codes(v, head), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = tn.mul(tn.log(rho), delta)
    neg = tn.mul(tn.log(tn.sub(1.0, rho)), 1.0 - delta)
    return tn.mul(tn.mean(tn.add(pos, neg)), -1.0)


def dskd_loss(f, f_hat, head: LshHead, gamma: float = 1.0) -> Tensor:
    """Local MSE plus gamma times the LSH global loss on pooled features."""
    f, f_hat = tn.as_tensor(f), tn.as_tensor(f_hat)
    local = local_loss(f, f_hat)
    if gamma == 0:
        return local
    glob = global_loss(tn.global_avg_pool(f), tn.global_avg_pool(f_hat).detach(), head)
    return tn.add(local, tn.mul(glob, gamma))


def kd_loss(student_logits, teacher_logits, tau: float = 4.0) -> Tensor:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), batch mean."""
    if tau <= 0:
        raise ValueError(f"KD temperature must be positive, got {tau}")
    s, t = tn.as_tensor(student_logits), tn.as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise tn.ShapeError(f"kd_loss: student {s.shape} and teacher {t.shape} logits differ")
    tz = t.data.astype(np.float64) / tau
    tz = tz - tz.max(axis=-1, keepdims=True)
    log_pt = tz - np.log(np.exp(tz).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = tn.log_softmax(tn.mul(s, 1.0 / tau))
    per = tn.sum(tn.mul(tn.sub(Tensor(log_pt, dtype=s.dtype), log_ps), Tensor(pt, dtype=s.dtype)), axis=-1)
    return tn.mul(tn.mean(per), tau * tau)


def task_loss(student_logits, y) -> Tensor:
    """Cross-entropy against integer labels, batch mean."""
    z = tn.as_tensor(student_logits)
    single = z.ndim == 1
    if single:
        z = tn.reshape(z, (1, -1))
    ys = np.atleast_1d(np.asarray(y)).astype(np.int64)
    c = z.shape[-1]
    if ys.shape[0] != z.shape[0] or ((ys < 0) | (ys >= c)).any():
        raise IndexError(f"task_loss: labels {ys.tolist()} incompatible with logits {z.shape}")
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(ys)), ys] = 1
    return tn.mul(tn.mean(tn.sum(tn.mul(tn.log_softmax(z), onehot), axis=-1)), -1.0)


def total_loss(task: float, dskd: float, diff: float, kd: float, alpha: float = 1.0) -> float:
    return task + alpha * dskd + diff + kd


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    gamma: float = 1.0
    tau: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or self.tau <= 0:
            raise ConfigError(f"invalid loss weights {self}")
