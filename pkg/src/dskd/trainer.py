"""Teacher pretraining, the joint distillation loop, checkpoints and ablations."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .config import RunConfig, dump_config
from .data import Dataset, corrupt_labels, few_shot_split, make_splits, read_container, write_container
from .diffusion import NoisePredictor, NoiseSchedule, diffusion_loss, make_schedule
from .guidance import GuidanceConfig, NoiseAdapter, TeacherClassifier, denoise_student
from .losses import LshHead, global_loss, kd_loss, local_loss, task_loss
from .networks import ConvNetSpec, ModelBundle, Projector, build_model
from .nn import SGD
from .tensor import Tensor

log = logging.getLogger(__name__)

MIN_TEACHER_ACC = 0.95
EVAL_BATCH = 256
ABLATION_AXES = {
    "T": ("schedule__T", int),
    "k": ("guidance__k", float),
    "M": ("losses__M", int),
    "alpha": ("losses__alpha", float),
    "fraction": ("dataset__fraction", float),
    "noise_ratio": ("dataset__noise_ratio", float),
}
STREAMS = ("data", "diffusion", "guidance")


class TeacherQualityError(RuntimeError):
    pass


# rng persistence ---------------------------------------------------------------


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _int_to_u16(value: int, chunks: int) -> list[int]:
    return [(value >> (16 * i)) & 0xFFFF for i in range(chunks)]


def rng_state_array(gen: np.random.Generator) -> np.ndarray:
    """PCG64 state as 16-bit limbs, exactly representable in float32."""
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be checkpointed")
    limbs = (
        _int_to_u16(st["state"]["state"], 8)
        + _int_to_u16(st["state"]["inc"], 8)
        + [st["has_uint32"]]
        + _int_to_u16(st["uinteger"], 2)
    )
    return np.array(limbs, dtype=np.float32)


def rng_from_array(arr) -> np.random.Generator:
    v = [int(x) for x in np.asarray(arr).ravel()]
    if len(v) != 19:
        raise ValueError("malformed rng state tensor")

    def join(limbs):
        return sum(x << (16 * i) for i, x in enumerate(limbs))

    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": join(v[0:8]), "inc": join(v[8:16])},
        "has_uint32": v[16],
        "uinteger": join(v[17:19]),
    }
    return gen


# specs and data ----------------------------------------------------------------


def net_specs(cfg: RunConfig) -> tuple[ConvNetSpec, ConvNetSpec]:
    d = cfg.dataset
    shape = (d.height, d.width, d.channels)
    teacher = ConvNetSpec(shape, tuple(cfg.teacher.widths), d.num_classes, cfg.teacher.convs_per_stage)
    student = ConvNetSpec(shape, tuple(cfg.student.widths), d.num_classes, cfg.student.convs_per_stage)
    if teacher.feature_hw != student.feature_hw:
        raise ValueError(f"teacher map {teacher.feature_hw} and student map {student.feature_hw} differ spatially")
    return teacher, student


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(clean train, distillation train, test).  Few-shot split first, then label noise."""
    d = cfg.dataset
    train, test = make_splits(
        d.num_classes, d.train_per_class, d.test_per_class, d.height, d.width, d.noise_sd, cfg.seeds.data, d.channels
    )
    distill = train
    if d.fraction < 1.0:
        distill = few_shot_split(distill, d.fraction, seed=cfg.seeds.data)
    if d.noise_ratio > 0:
        noisy = corrupt_labels(distill, d.noise_ratio, seed=cfg.seeds.data + 1)
        log.info("corrupted %d of %d labels", int((noisy.labels != distill.labels).sum()), len(distill))
        distill = noisy
    return train, distill, test


def count_corrupted(cfg: RunConfig, distill: Dataset) -> int:
    if cfg.dataset.noise_ratio == 0:
        return 0
    clean = make_splits(
        cfg.dataset.num_classes, cfg.dataset.train_per_class, 1, cfg.dataset.height, cfg.dataset.width,
        cfg.dataset.noise_sd, cfg.seeds.data, cfg.dataset.channels,
    )[0]
    if cfg.dataset.fraction < 1.0:
        clean = few_shot_split(clean, cfg.dataset.fraction, seed=cfg.seeds.data)
    return int((clean.labels != distill.labels).sum())


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def evaluate(bundle: ModelBundle, ds: Dataset, batch_size: int = EVAL_BATCH) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    with tn.no_grad():
        for i in range(0, len(ds), batch_size):
            _, logits = bundle(Tensor(ds.images[i : i + batch_size]))
            correct += int((logits.data.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return correct / len(ds)


# teacher -------------------------------------------------------------------------


def pretrain_teacher(cfg: RunConfig, train: Dataset, test: Dataset, spec: ConvNetSpec | None = None):
    """Train the teacher on cross-entropy alone; returns (bundle, test accuracy)."""
    spec = spec or net_specs(cfg)[0]
    teacher = build_model(spec, seed=cfg.seeds.model)
    opt = SGD({f"teacher.{k}": v for k, v in teacher.params.items()}, cfg.optimizer.lr, cfg.optimizer.momentum,
              cfg.optimizer.weight_decay)
    rng = _rng(cfg.seeds.data, 100)
    for epoch in range(cfg.optimizer.teacher_epochs):
        for idx in batches(len(train), cfg.optimizer.batch_size, rng):
            _, logits = teacher(Tensor(train.images[idx]))
            loss = task_loss(logits, train.labels[idx])
            tn.backward(loss)
            opt.step()
            opt.zero_grad()
    acc = evaluate(teacher, test)
    log.info("teacher test accuracy %.4f", acc)
    return teacher.freeze(), acc


def save_teacher(path, teacher: ModelBundle) -> None:
    tensors = {"meta.teacher_spec": teacher.spec.as_array(), **teacher.state_dict("teacher.")}
    write_container(path, tensors)


def load_bundle(path) -> ModelBundle:
    """Rebuild a student or teacher network from any checkpoint that carries its spec."""
    t = read_container(path)
    for role in ("student", "teacher"):
        if f"meta.{role}_spec" in t:
            bundle = ModelBundle(ConvNetSpec.from_array(t[f"meta.{role}_spec"]))
            bundle.load_state_dict(t, prefix=f"{role}.")
            return bundle
    raise ValueError(f"{path}: no network spec stored in checkpoint")


# distillation state ----------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    task_loss: float
    kd_loss: float
    dskd_local: float
    dskd_global: float
    diff_loss: float
    total_loss: float
    train_acc: float
    test_acc: float
    mean_kappa: float
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        del d["wall_seconds"]
        return json.dumps(d)


class DistillState:
    """Everything the training loop owns: networks, optimizer, rng streams."""

    def __init__(self, cfg: RunConfig, teacher: ModelBundle):
        self.cfg = cfg
        t_spec, s_spec = net_specs(cfg)
        if teacher.spec != t_spec:
            raise ValueError("teacher architecture does not match the config")
        seed = cfg.seeds.model
        self.teacher = teacher.freeze()
        self.teacher_cls: TeacherClassifier = teacher.classifier()
        self.student = build_model(s_spec, seed=seed + 1)
        self.projector = Projector(s_spec.depth, t_spec.depth, seed=seed + 2)
        self.adapter = NoiseAdapter(t_spec.depth, seed=seed + 3)
        self.predictor = NoisePredictor(t_spec.depth, seed=seed + 4)
        self.head = LshHead(t_spec.depth, cfg.losses.M, cfg.seeds.lsh, cfg.losses.bias_mode)
        self.sched: NoiseSchedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
        self.guidance = GuidanceConfig(k=cfg.guidance.k, T=cfg.schedule.T)
        o = cfg.optimizer
        self.optimizer = SGD(self.named_parameters(), o.lr, o.momentum, o.weight_decay)
        self.streams = {
            "data": _rng(cfg.seeds.data, 1),
            "diffusion": _rng(cfg.seeds.sampling, 2),
            "guidance": _rng(cfg.seeds.sampling, 3),
        }
        self.epoch = 0

    def modules(self):
        return {"student": self.student, "projector": self.projector, "adapter": self.adapter, "predictor": self.predictor}

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{name}.{k}": v for name, m in self.modules().items() for k, v in m.params.items()}

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "meta.epoch": np.array([self.epoch], np.float32),
            "meta.student_spec": self.student.spec.as_array(),
        }
        for name, m in self.modules().items():
            out.update(m.state_dict(f"{name}."))
        for name in self.named_parameters():
            if name in self.optimizer.buffers:
                out[f"optim.{name}"] = self.optimizer.buffers[name]
        for name in STREAMS:
            out[f"rng.{name}"] = rng_state_array(self.streams[name])
        return out

    def save(self, path) -> None:
        write_container(path, self.state_tensors())

    def load(self, path) -> None:
        t = read_container(path)
        for name, m in self.modules().items():
            m.load_state_dict(t, f"{name}.")
        self.optimizer.load_state_dict({k: v for k, v in t.items() if k.startswith("optim.")})
        for name in STREAMS:
            self.streams[name] = rng_from_array(t[f"rng.{name}"])
        self.epoch = int(t["meta.epoch"][0])

    def teacher_digest(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.teacher.parameters())


def _term(name: str, compute) -> Tensor:
    """Evaluate one loss term, naming it in any non-finite failure."""
    try:
        value = compute()
    except tn.NumericError as exc:
        raise tn.NumericError(f"non-finite {name}: {exc}") from exc
    if not np.isfinite(value.data).all():
        raise tn.NumericError(f"non-finite {name}")
    return value


def train_step(state: DistillState, images: np.ndarray, labels: np.ndarray, dskd: bool = True) -> dict[str, float]:
    """One optimizer step on the combined objective; returns the per-term scalars."""
    cfg = state.cfg
    x = Tensor(images)
    with tn.no_grad():
        f_tea, t_logits = state.teacher(x)
    f_raw, s_logits = state.student(x)
    f_stu = state.projector(f_raw)

    l_diff = _term("diff_loss", lambda: diffusion_loss(state.predictor, f_tea, state.sched, state.streams["diffusion"]))
    l_task = _term("task_loss", lambda: task_loss(s_logits, labels))
    l_kd = _term("kd_loss", lambda: kd_loss(s_logits, t_logits, cfg.losses.tau))

    out = {"dskd_local": 0.0, "dskd_global": 0.0, "kappa": float("nan")}
    total = l_task
    if dskd:
        try:
            f_hat, kappa = denoise_student(
                state.predictor,
                state.teacher_cls,
                state.adapter,
                f_stu.data,
                labels,
                state.guidance,
                state.sched,
                state.streams["guidance"],
                adapter_grad=cfg.adapter_grad,
            )
        except tn.NumericError as exc:
            raise tn.NumericError(f"non-finite denoising chain for dskd_local: {exc}") from exc
        l_local = _term("dskd_local", lambda: local_loss(f_stu, f_hat))
        l_global = _term(
            "dskd_global",
            lambda: global_loss(tn.global_avg_pool(f_stu), tn.global_avg_pool(f_hat).detach(), state.head),
        )
        l_dskd = tn.add(l_local, tn.mul(l_global, cfg.losses.gamma))
        total = tn.add(total, tn.mul(l_dskd, cfg.losses.alpha))
        out.update(dskd_local=l_local.item(), dskd_global=l_global.item(), kappa=float(kappa.mean()))
        out["dskd"] = l_dskd.item()
    else:
        out["dskd"] = 0.0
    total = _term("total_loss", lambda: tn.add(tn.add(total, l_diff), l_kd))

    tn.backward(total)
    state.optimizer.step()
    state.optimizer.zero_grad()

    out.update(
        task_loss=l_task.item(),
        kd_loss=l_kd.item(),
        diff_loss=l_diff.item(),
        total_loss=total.item(),
        correct=float((s_logits.data.argmax(axis=1) == labels).sum()),
    )
    return out


def warmup_diffusion(state: DistillState, ds: Dataset, epochs: int) -> None:
    """Optional predictor-only phase on teacher features before distillation."""
    o = state.cfg.optimizer
    opt = SGD({f"predictor.{k}": v for k, v in state.predictor.params.items()}, o.lr, o.momentum, o.weight_decay)
    for _ in range(epochs):
        for idx in batches(len(ds), state.cfg.optimizer.batch_size, state.streams["data"]):
            with tn.no_grad():
                f_tea = state.teacher.features(Tensor(ds.images[idx]))
            tn.backward(diffusion_loss(state.predictor, f_tea, state.sched, state.streams["diffusion"]))
            opt.step()
            opt.zero_grad()


@dataclass
class TrainResult:
    state: DistillState
    records: list[MetricsRecord]
    teacher_acc: float
    train_size: int
    corrupted: int
    run_dir: Path


def obtain_teacher(cfg: RunConfig, run_dir: Path, train: Dataset, test: Dataset):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "teacher.dskd"
    t_spec = net_specs(cfg)[0]
    if path.exists():
        teacher = load_bundle(path)
        if teacher.spec == t_spec:
            return teacher.freeze(), evaluate(teacher, test)
        log.warning("teacher checkpoint %s does not match config; retraining", path)
    teacher, acc = pretrain_teacher(cfg, train, test, t_spec)
    save_teacher(path, teacher)
    return teacher, acc


def _read_records(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    return [ln for ln in lines if json.loads(ln)["epoch"] <= upto]


def train(
    cfg: RunConfig,
    resume: str | Path | None = None,
    teacher: ModelBundle | None = None,
    dskd: bool = True,
    run_dir: str | Path | None = None,
) -> TrainResult:
    """Run the full distillation loop, writing metrics and checkpoints to the run directory.

    ``dskd=False`` skips the denoising chain and the DSKD terms entirely,
    giving the plain KD baseline.
    """
    cfg.validate()
    run_dir = Path(run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.json")

    clean_train, train_ds, test_ds = load_data(cfg)
    if teacher is None:
        teacher, teacher_acc = obtain_teacher(cfg, run_dir, clean_train, test_ds)
    else:
        teacher_acc = evaluate(teacher, test_ds)
    if teacher_acc < MIN_TEACHER_ACC:
        raise TeacherQualityError(f"teacher test accuracy {teacher_acc:.4f} below {MIN_TEACHER_ACC}")

    state = DistillState(cfg, teacher)
    metrics_path = run_dir / "metrics.jsonl"
    if resume is not None:
        state.load(resume)
        kept = _read_records(metrics_path, state.epoch)
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        metrics_path.write_text("")
        (run_dir / "timing.jsonl").write_text("")
        warmup_diffusion(state, train_ds, cfg.optimizer.diffusion_warmup_epochs)
    digest = state.teacher_digest()

    records: list[MetricsRecord] = []
    for epoch in range(state.epoch, cfg.optimizer.epochs):
        start = time.perf_counter()
        sums: dict[str, float] = {}
        kappas = []
        n_batches = 0
        correct = 0.0
        for idx in batches(len(train_ds), cfg.optimizer.batch_size, state.streams["data"]):
            out = train_step(state, train_ds.images[idx], train_ds.labels[idx], dskd=dskd)
            for key in ("task_loss", "kd_loss", "dskd_local", "dskd_global", "diff_loss", "total_loss"):
                sums[key] = sums.get(key, 0.0) + out[key]
            if dskd:
                kappas.append(out["kappa"])
            correct += out["correct"]
            n_batches += 1
        state.epoch = epoch + 1
        rec = MetricsRecord(
            epoch=state.epoch,
            **{k: v / n_batches for k, v in sums.items()},
            train_acc=correct / len(train_ds),
            test_acc=evaluate(state.student, test_ds),
            mean_kappa=float(np.mean(kappas)) if kappas else 0.0,
            wall_seconds=time.perf_counter() - start,
        )
        records.append(rec)
        with open(metrics_path, "a") as fh:
            fh.write(rec.to_json() + "\n")
        with open(run_dir / "timing.jsonl", "a") as fh:
            fh.write(json.dumps({"epoch": rec.epoch, "wall_seconds": rec.wall_seconds}) + "\n")
        log.info("epoch %d total %.4f test_acc %.4f", rec.epoch, rec.total_loss, rec.test_acc)
        if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            state.save(run_dir / f"ckpt_epoch{state.epoch}.dskd")

    if state.teacher_digest() != digest:
        raise RuntimeError("teacher parameters changed during distillation")
    state.save(run_dir / "final.dskd")
    return TrainResult(state, records, teacher_acc, len(train_ds), count_corrupted(cfg, train_ds), run_dir)


# ablations -----------------------------------------------------------------------

ABLATION_COLUMNS = (
    "axis", "value", "test_acc", "train_acc", "total_loss", "dskd_local", "dskd_global",
    "mean_kappa", "train_items", "corrupted_items", "teacher_acc",
)


def parse_values(axis: str, text: str) -> list:
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    kind = ABLATION_AXES[axis][1]
    try:
        return [kind(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"cannot parse {text!r} as {kind.__name__} values for axis {axis}") from None


def run_ablation(cfg: RunConfig, axis: str, values: Sequence, out_path: str | Path | None = None) -> list[dict]:
    """Train and evaluate once per value, sharing the teacher and every other seed."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key, kind = ABLATION_AXES[axis]
    base = Path(cfg.output_dir)
    base.mkdir(parents=True, exist_ok=True)
    clean_train, _, test = load_data(cfg)
    teacher, _ = obtain_teacher(cfg, base, clean_train, test)
    rows = []
    for value in values:
        value = kind(value)
        run_cfg = cfg.replace(**{key: value, "output_dir": str(base / f"{axis}={value}")})
        res = train(run_cfg, teacher=teacher)
        last = res.records[-1] if res.records else None
        rows.append({
            "axis": axis,
            "value": value,
            "test_acc": last.test_acc if last else evaluate(res.state.student, test),
            "train_acc": last.train_acc if last else float("nan"),
            "total_loss": last.total_loss if last else float("nan"),
            "dskd_local": last.dskd_local if last else float("nan"),
            "dskd_global": last.dskd_global if last else float("nan"),
            "mean_kappa": last.mean_kappa if last else float("nan"),
            "train_items": res.train_size,
            "corrupted_items": res.corrupted,
            "teacher_acc": res.teacher_acc,
        })
    out_path = Path(out_path) if out_path else base / f"ablation_{axis}.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows
