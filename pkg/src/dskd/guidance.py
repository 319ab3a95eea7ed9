"""Teacher-classifier guidance for denoising student features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .diffusion import ConfigError, NoisePredictor, NoiseSchedule, posterior_params
from .nn import Module, fan_in_normal
from .tensor import Tensor

ADAPTER_GRAD_MODES = ("through_blend", "frozen")


@dataclass(frozen=True)
class TeacherClassifier:
    """GAP followed by a linear map; weights are D×C, never trained here."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def depth(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def _check(self, x) -> None:
        if np.shape(x)[-1] != self.depth:
            raise tn.ShapeError(f"teacher classifier: feature depth {np.shape(x)[-1]} != {self.depth}")

    def logits(self, x) -> Tensor:
        x = tn.as_tensor(x)
        self._check(x.data)
        w = Tensor(self.weight, dtype=x.dtype)
        b = Tensor(self.bias, dtype=x.dtype)
        return tn.add(tn.matmul(tn.global_avg_pool(x), w), b)


def classifier_logits(tc: TeacherClassifier, x) -> Tensor:
    return tc.logits(x)


def _as_labels(y, batch: int | None, num_classes: int) -> np.ndarray:
    ys = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(ys.dtype, np.integer):
        if not np.all(ys == np.round(ys)):
            raise IndexError(f"class labels must be integers, got {y!r}")
        ys = ys.astype(np.int64)
    if ((ys < 0) | (ys >= num_classes)).any():
        raise IndexError(f"class label out of range 0..{num_classes - 1}: {y!r}")
    if batch is not None and ys.size == 1 and batch > 1:
        ys = np.repeat(ys, batch)
    return ys


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classifier_grad(tc: TeacherClassifier, x_t, y) -> np.ndarray:
    """Closed-form gradient of log p(y | x) wrt the feature map.

    Accepts a single H×W×D map with scalar ``y`` or a batch B×H×W×D with one
    label per sample.
    """
    x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
    tc._check(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, h, w, _ = x.shape
    ys = _as_labels(y, b, tc.num_classes)
    W = tc.weight.astype(np.float64)
    logits = x.mean(axis=(1, 2)) @ W + tc.bias
    p = _softmax(logits)
    direction = W[:, ys].T - p @ W.T  # B×D
    g = np.broadcast_to((direction / (h * w))[:, None, None, :], x.shape)
    g = np.ascontiguousarray(g)
    return g[0] if single else g


def teacher_log_prob(tc: TeacherClassifier, x, y) -> np.ndarray:
    """Per-sample log p(y | x) under the teacher classifier."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    ys = _as_labels(y, x.shape[0], tc.num_classes)
    z = x.mean(axis=(1, 2)) @ tc.weight.astype(np.float64) + tc.bias
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return logp[np.arange(len(ys)), ys]


def guided_step(model, tc: TeacherClassifier, x_t, t: int, y, k: float, sched: NoiseSchedule, rng) -> Tensor:
    """One reverse step with the mean shifted by k * sigma_t^2 * grad log p(y|x_t)."""
    if k < 0:
        raise ValueError(f"guidance scale must be nonnegative, got {k}")
    x_t = tn.as_tensor(x_t)
    g = classifier_grad(tc, x_t.data, y) if k != 0 else None
    mu, sigma2 = posterior_params(model, x_t, t, sched)
    if t == 1:
        return mu
    if g is not None:
        mu = tn.add(mu, Tensor(k * sigma2 * g, dtype=mu.dtype))
    z = rng.standard_normal(mu.shape).astype(mu.dtype)
    return tn.add(mu, Tensor(np.sqrt(sigma2) * z, dtype=mu.dtype))


@dataclass(frozen=True)
class GuidanceConfig:
    k: float = 1.0
    T: int = 2
    target_label_source: str = "ground_truth"

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"guidance k must be >= 0, got {self.k}")
        if self.T < 1:
            raise ConfigError(f"guidance T must be >= 1, got {self.T}")
        if self.target_label_source != "ground_truth":
            raise ConfigError("only ground-truth guidance labels are supported")


class NoiseAdapter(Module):
    """conv3x3 -> relu -> GAP -> linear -> sigmoid, one mixing coefficient per sample."""

    def __init__(self, depth: int, seed: int = 0, width: int = 8):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.depth = depth
        self.add_param("conv.w", fan_in_normal(rng, (3, 3, depth, width), 9 * depth))
        self.add_param("conv.b", np.zeros(width, np.float32))
        self.add_param("fc.w", fan_in_normal(rng, (width, 1), width, gain=1.0))
        self.add_param("fc.b", np.zeros(1, np.float32))

    def __call__(self, f) -> Tensor:
        p = self.params
        h = tn.relu(tn.add(tn.conv2d(tn.as_tensor(f), p["conv.w"]), p["conv.b"]))
        z = tn.add(tn.matmul(tn.global_avg_pool(h), p["fc.w"]), p["fc.b"])
        return tn.reshape(tn.sigmoid(z), (-1,))


def adapter_init(adapter: NoiseAdapter, f_stu, rng) -> tuple[Tensor, np.ndarray]:
    """Blend the student map with fresh noise: kappa * f + (1 - kappa) * eps."""
    f = tn.as_tensor(f_stu)
    batched = f.ndim == 4
    if not batched:
        f = tn.reshape(f, (1,) + f.shape)
    kappa = adapter(f)
    eps = Tensor(rng.standard_normal(f.shape).astype(f.dtype), dtype=f.dtype)
    kap = tn.reshape(kappa, (-1, 1, 1, 1))
    x_T = tn.add(tn.mul(kap, f), tn.mul(tn.sub(1.0, kap), eps))
    if not batched:
        x_T = tn.reshape(x_T, x_T.shape[1:])
    return x_T, kappa.data.copy()


def denoise_student(
    model: NoisePredictor,
    tc: TeacherClassifier,
    adapter: NoiseAdapter,
    f_stu,
    y,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    rng,
    adapter_grad: str = "through_blend",
) -> tuple[Tensor, np.ndarray]:
    """Run the guided chain t = T..1 starting from the adapter blend of ``f_stu``.

    The result is a supervision target: it never carries gradient to the
    student or the noise predictor.  With ``adapter_grad="through_blend"``
    the adapter parameters stay on the tape.
    """
    if cfg.T != sched.steps:
        raise ConfigError(f"guidance T={cfg.T} does not match schedule length {sched.steps}")
    if adapter_grad not in ADAPTER_GRAD_MODES:
        raise ConfigError(f"adapter_grad must be one of {ADAPTER_GRAD_MODES}, got {adapter_grad!r}")
    f = tn.as_tensor(f_stu).detach()
    frozen_model = model.detached() if isinstance(model, Module) else model

    def chain():
        x, kappa = adapter_init(adapter, f, rng)
        for t in range(cfg.T, 0, -1):
            x = guided_step(frozen_model, tc, x, t, y, cfg.k, sched, rng)
        return x, kappa

    if adapter_grad == "frozen":
        with tn.no_grad():
            return chain()
    return chain()
