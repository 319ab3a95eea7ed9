"""Toy convolutional teacher/student networks and the depth projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .diffusion import ConfigError
from .guidance import TeacherClassifier
from .nn import Module, fan_in_normal
from .tensor import Tensor


@dataclass(frozen=True)
class ConvNetSpec:
    input_shape: tuple[int, int, int] = (16, 16, 1)
    widths: tuple[int, ...] = (16, 32)
    num_classes: int = 4
    convs_per_stage: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H, W, C) with positive extents, got {self.input_shape}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be a nonempty list of positive ints, got {self.widths}")
        if self.num_classes < 2 or self.convs_per_stage < 1:
            raise ConfigError("need num_classes >= 2 and convs_per_stage >= 1")
        h, w = self.feature_hw
        if h < 2 or w < 2:
            raise ConfigError(f"feature map {h}x{w} too small; need at least 2x2 at the distillation tap")

    @property
    def depth(self) -> int:
        return self.widths[-1]

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.input_shape[:2]
        for _ in self.widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def as_array(self) -> np.ndarray:
        """Flat encoding used to persist the architecture inside checkpoints."""
        return np.array(
            [*self.input_shape, self.num_classes, self.convs_per_stage, len(self.widths), *self.widths], np.float32
        )

    @classmethod
    def from_array(cls, arr) -> "ConvNetSpec":
        v = [int(x) for x in np.asarray(arr).ravel()]
        n = v[5]
        return cls(input_shape=tuple(v[:3]), num_classes=v[3], convs_per_stage=v[4], widths=tuple(v[6 : 6 + n]))


class ModelBundle(Module):
    """Feature extractor plus GAP + linear classifier.

    Each stage opens with a stride-2 conv; every conv is followed by
    per-channel standardization with a learned scale/shift, then relu.
    """

    def __init__(self, spec: ConvNetSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        c_in = spec.input_shape[2]
        for i, width in enumerate(spec.widths):
            for j in range(spec.convs_per_stage):
                self.add_param(f"stage{i}.conv{j}.w", fan_in_normal(rng, (3, 3, c_in, width), 9 * c_in))
                self.add_param(f"stage{i}.norm{j}.scale", np.ones(width, np.float32))
                self.add_param(f"stage{i}.norm{j}.shift", np.zeros(width, np.float32))
                c_in = width
        self.add_param("cls.w", fan_in_normal(rng, (spec.depth, spec.num_classes), spec.depth, gain=1.0))
        self.add_param("cls.b", np.zeros(spec.num_classes, np.float32))

    def features(self, x) -> Tensor:
        h = tn.as_tensor(x)
        if h.ndim != 4 or h.shape[1:] != self.spec.input_shape:
            raise tn.ShapeError(f"expected B×{'×'.join(map(str, self.spec.input_shape))} input, got {h.shape}")
        p = self.params
        for i in range(len(self.spec.widths)):
            for j in range(self.spec.convs_per_stage):
                stride = 2 if j == 0 else 1
                h = tn.standardize(tn.conv2d(h, p[f"stage{i}.conv{j}.w"], stride=stride))
                h = tn.relu(tn.add(tn.mul(h, p[f"stage{i}.norm{j}.scale"]), p[f"stage{i}.norm{j}.shift"]))
        return h

    def logits_from_features(self, f: Tensor) -> Tensor:
        return tn.add(tn.matmul(tn.global_avg_pool(f), self.params["cls.w"]), self.params["cls.b"])

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        f = self.features(x)
        return f, self.logits_from_features(f)

    def classifier(self) -> TeacherClassifier:
        return TeacherClassifier(
            weight=self.params["cls.w"].data.astype(np.float32).copy(),
            bias=self.params["cls.b"].data.astype(np.float32).copy(),
        )


def build_model(spec: ConvNetSpec, seed: int) -> ModelBundle:
    return ModelBundle(spec, seed)


def extract_features(bundle: ModelBundle, batch) -> Tensor:
    return bundle.features(batch)


class Projector(Module):
    """Per-position linear map from student depth to teacher depth."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if d_in == d_out:
            w = np.eye(d_in, dtype=np.float32)
        else:
            w = fan_in_normal(np.random.default_rng(seed), (d_in, d_out), d_in, gain=1.0)
        self.add_param("w", w)
        self.add_param("b", np.zeros(d_out, np.float32))

    def __call__(self, f) -> Tensor:
        f = tn.as_tensor(f)
        if f.shape[-1] != self.d_in:
            raise tn.ShapeError(f"projector: expected depth {self.d_in}, got {f.shape}")
        return tn.add(tn.matmul(f, self.params["w"]), self.params["b"])


def projector(student_features, proj: Projector) -> Tensor:
    return proj(student_features)
