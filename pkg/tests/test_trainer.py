import csv
import json

import numpy as np
import pytest

from dskd import tensor as tn
from dskd import trainer as tr
from dskd.data import Dataset, read_container
from dskd.tensor import Tensor

from conftest import small_config


class FixedPredictor:
    """Stands in for a ModelBundle; returns preset logits in order."""

    def __init__(self, preds, num_classes):
        self.logits = np.eye(num_classes, dtype=np.float32)[preds]
        self.pos = 0

    def __call__(self, x):
        n = len(x.data)
        out = self.logits[self.pos : self.pos + n]
        self.pos += n
        return None, Tensor(out)


def toy_ds(labels, c):
    return Dataset(np.zeros((len(labels), 2, 2, 1), np.float32), np.asarray(labels, np.int64), c)


def test_evaluate_perfect_predictions():
    y = np.arange(300) % 4
    assert tr.evaluate(FixedPredictor(y, 4), toy_ds(y, 4)) == 1.0


def test_evaluate_random_predictor_binomial_bound():
    rng = np.random.default_rng(0)
    y = rng.integers(4, size=10_000)
    acc = tr.evaluate(FixedPredictor(rng.integers(4, size=10_000), 4), toy_ds(y, 4))
    assert abs(acc - 0.25) <= 0.02


def test_evaluate_empty_dataset_is_error():
    with pytest.raises(ValueError):
        tr.evaluate(FixedPredictor([], 4), toy_ds([], 4))


def test_rng_state_round_trip():
    g = np.random.default_rng(123)
    g.standard_normal(17)
    arr = tr.rng_state_array(g)
    assert arr.dtype == np.float32
    h = tr.rng_from_array(arr)
    np.testing.assert_array_equal(g.standard_normal(5), h.standard_normal(5))


def test_teacher_pretraining_deterministic_and_accurate(tmp_path):
    cfg = small_config(tmp_path)
    clean, _, test = tr.load_data(cfg)
    a, acc = tr.pretrain_teacher(cfg, clean, test)
    b, _ = tr.pretrain_teacher(cfg, clean, test)
    assert acc >= tr.MIN_TEACHER_ACC
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_teacher_with_zero_lr_stays_at_chance(tmp_path):
    cfg = small_config(tmp_path, optimizer__lr=0.0)
    clean, _, test = tr.load_data(cfg)
    fresh = tr.build_model(tr.net_specs(cfg)[0], cfg.seeds.model)
    teacher, acc = tr.pretrain_teacher(cfg, clean, test)
    assert acc == pytest.approx(1 / cfg.dataset.num_classes, abs=0.1)
    assert all(fresh.params[k].data.tobytes() == teacher.params[k].data.tobytes() for k in fresh.params)


def _batch(cfg):
    clean, distill, _ = tr.load_data(cfg)
    return distill.images[:16], distill.labels[:16]


def test_train_step_zero_lr_is_noop(tmp_path, shared_teacher):
    cfg = small_config(tmp_path, optimizer__lr=0.0)
    state = tr.DistillState(cfg, shared_teacher)
    before = {k: v.data.copy() for k, v in state.named_parameters().items()}
    out = tr.train_step(state, *_batch(cfg))
    assert all(before[k].tobytes() == v.data.tobytes() for k, v in state.named_parameters().items())
    assert all(np.isfinite(out[k]) for k in ("task_loss", "kd_loss", "diff_loss", "dskd_local", "dskd_global"))


def test_total_is_exact_weighted_sum(tmp_path, shared_teacher):
    for alpha in (0.0, 1.0, 0.37):
        cfg = small_config(tmp_path, losses__alpha=alpha)
        state = tr.DistillState(cfg, shared_teacher)
        out = tr.train_step(state, *_batch(cfg))
        f = np.float32
        recomputed = ((f(out["task_loss"]) + f(alpha) * f(out["dskd"])) + f(out["diff_loss"])) + f(out["kd_loss"])
        assert abs(f(out["total_loss"]) - recomputed) <= np.spacing(recomputed)
        if alpha == 0.0:
            assert out["total_loss"] == float((f(out["task_loss"]) + f(out["diff_loss"])) + f(out["kd_loss"]))


def test_teacher_untouched_by_training(tmp_path, shared_teacher):
    cfg = small_config(tmp_path)
    state = tr.DistillState(cfg, shared_teacher)
    digest = state.teacher_digest()
    images, labels = _batch(cfg)
    for _ in range(3):
        tr.train_step(state, images, labels)
    assert state.teacher_digest() == digest


def test_non_finite_loss_names_the_term(tmp_path, shared_teacher):
    cfg = small_config(tmp_path)
    state = tr.DistillState(cfg, shared_teacher)
    state.predictor.params["out.b"].data[:] = np.float32(3e38)
    with np.errstate(all="ignore"), pytest.raises(tn.NumericError, match="diff"):
        tr.train_step(state, *_batch(cfg))


def test_identical_runs_write_identical_metrics(tmp_path, shared_teacher):
    a = tr.train(small_config(tmp_path), teacher=shared_teacher, run_dir=tmp_path / "a")
    b = tr.train(small_config(tmp_path), teacher=shared_teacher, run_dir=tmp_path / "b")
    assert (a.run_dir / "metrics.jsonl").read_bytes() == (b.run_dir / "metrics.jsonl").read_bytes()
    assert (a.run_dir / "final.dskd").read_bytes() == (b.run_dir / "final.dskd").read_bytes()
    records = [json.loads(x) for x in (a.run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert set(records[0]) == {"epoch", "task_loss", "kd_loss", "dskd_local", "dskd_global", "diff_loss", "total_loss",
                               "train_acc", "test_acc", "mean_kappa"}
    assert json.loads((a.run_dir / "config.json").read_text())["optimizer"]["epochs"] == 2


def test_resume_reproduces_next_epoch(tmp_path, shared_teacher):
    cfg = small_config(tmp_path, optimizer__epochs=3, checkpoint_every=1)
    full = tr.train(cfg, teacher=shared_teacher, run_dir=tmp_path / "full")
    resumed = tr.train(cfg, teacher=shared_teacher, run_dir=tmp_path / "full_copy",
                       resume=tmp_path / "full" / "ckpt_epoch1.dskd")
    assert [r.epoch for r in resumed.records] == [2, 3]
    assert [r.to_json() for r in resumed.records] == [r.to_json() for r in full.records[1:]]
    assert (tmp_path / "full" / "final.dskd").read_bytes() == (tmp_path / "full_copy" / "final.dskd").read_bytes()


def test_checkpoint_save_load_save_is_byte_identical(tmp_path, shared_teacher):
    cfg = small_config(tmp_path, optimizer__epochs=1)
    res = tr.train(cfg, teacher=shared_teacher, run_dir=tmp_path / "r")
    other = tr.DistillState(cfg, shared_teacher)
    other.load(tmp_path / "r" / "final.dskd")
    other.save(tmp_path / "again.dskd")
    assert (tmp_path / "again.dskd").read_bytes() == (tmp_path / "r" / "final.dskd").read_bytes()
    x = Tensor(tr.load_data(cfg)[2].images[:8])
    assert other.student(x)[1].data.tobytes() == res.state.student(x)[1].data.tobytes()
    names = set(read_container(tmp_path / "again.dskd"))
    assert {"meta.epoch", "rng.data", "rng.diffusion", "rng.guidance"} <= names
    assert any(n.startswith("optim.adapter.") for n in names)
    assert any(n.startswith("predictor.") for n in names) and any(n.startswith("projector.") for n in names)


def test_bundle_loads_from_checkpoint(tmp_path, shared_teacher):
    cfg = small_config(tmp_path, optimizer__epochs=1)
    res = tr.train(cfg, teacher=shared_teacher, run_dir=tmp_path / "r")
    student = tr.load_bundle(tmp_path / "r" / "final.dskd")
    test = tr.load_data(cfg)[2]
    assert tr.evaluate(student, test) == tr.evaluate(res.state.student, test)


def test_alpha_zero_equals_baseline_bitwise(tmp_path, shared_teacher):
    zero = tr.train(small_config(tmp_path, losses__alpha=0.0), teacher=shared_teacher, run_dir=tmp_path / "z")
    base = tr.train(small_config(tmp_path), teacher=shared_teacher, dskd=False, run_dir=tmp_path / "b")
    for name, p in base.state.student.params.items():
        assert p.data.tobytes() == zero.state.student.params[name].data.tobytes()
    for name, p in base.state.predictor.params.items():
        assert p.data.tobytes() == zero.state.predictor.params[name].data.tobytes()
    assert [r.test_acc for r in zero.records] == [r.test_acc for r in base.records]


def test_weak_teacher_is_refused(tmp_path):
    cfg = small_config(tmp_path, optimizer__teacher_epochs=0)
    with pytest.raises(tr.TeacherQualityError):
        tr.train(cfg)


def test_teacher_persisted_and_reused(tmp_path):
    cfg = small_config(tmp_path, optimizer__epochs=0)
    first = tr.train(cfg)
    path = first.run_dir / "teacher.dskd"
    stamp = path.stat().st_mtime_ns
    second = tr.train(cfg)
    assert path.stat().st_mtime_ns == stamp and second.teacher_acc == first.teacher_acc


def test_split_then_corrupt_composition(tmp_path):
    cfg = small_config(tmp_path, dataset__fraction=0.5, dataset__noise_ratio=0.3)
    clean, distill, test = tr.load_data(cfg)
    assert len(distill) == 80
    np.testing.assert_array_equal(np.bincount(tr.load_data(cfg.replace(dataset__noise_ratio=0.0))[1].labels), [20] * 4)
    assert tr.count_corrupted(cfg, distill) == 24
    assert len(clean) == 160 and test.split == "test"


def test_ablation_over_k_and_alpha(tmp_path, shared_teacher):
    cfg = small_config(tmp_path, optimizer__epochs=1)
    (tmp_path / "run").mkdir()
    tr.save_teacher(tmp_path / "run" / "teacher.dskd", shared_teacher)
    rows = tr.run_ablation(cfg, "k", [0, 1])
    assert [r["value"] for r in rows] == [0.0, 1.0]
    with open(tmp_path / "run" / "ablation_k.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 2 and list(table[0]) == list(tr.ABLATION_COLUMNS)
    alpha_rows = tr.run_ablation(cfg, "alpha", [0])
    base = tr.train(cfg, teacher=shared_teacher, dskd=False, run_dir=tmp_path / "base")
    assert alpha_rows[0]["test_acc"] == base.records[-1].test_acc


def test_parse_values():
    assert tr.parse_values("T", "1,2,3") == [1, 2, 3]
    assert tr.parse_values("fraction", "0.25, 0.5") == [0.25, 0.5]
    with pytest.raises(ValueError):
        tr.parse_values("depth", "1")
    with pytest.raises(ValueError):
        tr.parse_values("M", "a,b")
