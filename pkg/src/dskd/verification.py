"""Independent numerical oracles behind the ``verify`` command.

Each oracle recomputes its quantity by a route that does not share code with
the implementation it checks: central differences for gradients, dense grid
quadrature for the guided mean, direct Monte-Carlo simulation of the forward
chain, and the random-hyperplane collision law for LSH codes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tn
from .diffusion import NoisePredictor, compute_sigma2, diffusion_loss, make_schedule, NoiseSchedule
from .guidance import TeacherClassifier, classifier_grad, guided_step
from .losses import LshHead, dskd_loss, global_loss, hash_codes, kd_loss, local_loss, task_loss
from .tensor import Tensor, grad_check

log = logging.getLogger(__name__)

GRAD_TOL = 1e-5
MUTANT_SCALE = 1.5


@dataclass
class OracleReport:
    check: str
    error: float
    tolerance: float
    passed: bool
    samples: int
    seed: int

    @classmethod
    def make(cls, check, error, tolerance, samples, seed) -> "OracleReport":
        error = float(error)
        return cls(check, error, float(tolerance), bool(error <= tolerance), int(samples), int(seed))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def format_table(reports: Iterable[OracleReport]) -> str:
    rows = [("check", "error", "tolerance", "result", "samples", "seed")]
    for r in reports:
        rows.append((r.check, f"{r.error:.3e}", f"{r.tolerance:.3e}", "PASS" if r.passed else "FAIL", str(r.samples),
                     str(r.seed)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


# forward marginal -----------------------------------------------------------------


def oracle_forward_marginal(sched: NoiseSchedule, samples: int = 100_000, x0: float = 1.0, seed: int = 0,
                            mean_tol: float = 0.01, var_rel_tol: float = 0.02) -> list[OracleReport]:
    """Simulate the one-step kernel chain and compare with the closed-form marginal at every t."""
    rng = np.random.default_rng(seed)
    betas = [float(b) for b in sched.beta]
    x = np.full(samples, x0, dtype=np.float64)
    reports = [OracleReport.make("marginal_t0_identity", float(np.max(np.abs(x - x0))), 0.0, samples, seed)]
    keep = 1.0
    for t, beta in enumerate(betas, start=1):
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * rng.standard_normal(samples)
        keep *= 1.0 - beta
        mean_err = abs(x.mean() - math.sqrt(keep) * x0)
        var_err = abs(x.var() - (1.0 - keep)) / (1.0 - keep)
        reports.append(OracleReport.make(f"marginal_mean_t{t}", mean_err, mean_tol, samples, seed))
        reports.append(OracleReport.make(f"marginal_var_t{t}", var_err, var_rel_tol, samples, seed))
    return reports


def oracle_sigma2_identity(sched: NoiseSchedule) -> OracleReport:
    """DDIM-form variance against the DDPM posterior variance beta_tilde."""
    worst = 0.0
    for t in range(1, sched.steps + 1):
        if t == 1:
            expected = 0.0
        else:
            ab_t = float(np.prod(1.0 - sched.beta[:t]))
            ab_prev = float(np.prod(1.0 - sched.beta[: t - 1]))
            expected = (1.0 - ab_prev) / (1.0 - ab_t) * float(sched.beta[t - 1])
        worst = max(worst, abs(compute_sigma2(t, sched) - expected))
    return OracleReport.make(f"sigma2_equals_beta_tilde_T{sched.steps}", worst, 1e-12, sched.steps, 0)


# guided mean shift -----------------------------------------------------------------


def _grid_mean(mu, sigma, weight, bias, y, k, extent, n):
    axis = [np.linspace(m - extent * sigma, m + extent * sigma, n) for m in mu]
    gx, gy = np.meshgrid(*axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    z = pts @ weight + bias
    zmax = z.max(axis=1, keepdims=True)
    log_py = z[:, y] - (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
    logw = -((pts - mu) ** 2).sum(axis=1) / (2 * sigma**2) + k * log_py
    w = np.exp(logw - logw.max())
    return (pts * w[:, None]).sum(axis=0) / w.sum()


def mean_shift_error(sigma, weight, bias, y, k, mu, extent=6.0, n=401) -> float:
    """|grid-integrated mean of N(mu, sigma^2 I) * p(y|x)^k  -  (mu + k sigma^2 g)|."""
    if sigma > 0.5 + 1e-12 or extent < 4 or n < 400:
        raise ValueError("grid must span at least 8 sigma with >= 400 points per axis, sigma <= 0.5")
    mu = np.asarray(mu, dtype=np.float64)
    tc = TeacherClassifier(np.asarray(weight, np.float64), np.asarray(bias, np.float64))
    g = classifier_grad(tc, mu.reshape(1, 1, 2), y).reshape(2)
    return float(np.linalg.norm(_grid_mean(mu, sigma, tc.weight, tc.bias, y, k, extent, n) - (mu + k * sigma**2 * g)))


def oracle_mean_shift(sigma: float = 0.05, ks=(0.5, 1.0, 2.0), instances: int = 10, num_classes: int = 3,
                      weight_norm: float = 2.0, seed: int = 0, large_sigma: float = 0.5) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    worst = {k: 0.0 for k in ks}
    worst_zero = 0.0
    regime_ratio = 0.0
    for _ in range(instances):
        w = rng.standard_normal((2, num_classes))
        w *= weight_norm / np.linalg.norm(w)
        b = rng.standard_normal(num_classes)
        mu = rng.standard_normal(2)
        y = int(rng.integers(num_classes))
        for k in ks:
            worst[k] = max(worst[k], mean_shift_error(sigma, w, b, y, k, mu))
        worst_zero = max(worst_zero, mean_shift_error(sigma, w, b, y, 0.0, mu))
        k_max = max(ks)
        small = mean_shift_error(sigma, w, b, y, k_max, mu)
        large = mean_shift_error(large_sigma, w, b, y, k_max, mu)
        regime_ratio = max(regime_ratio, small / large if large > 0 else math.inf)
    for k in ks:
        reports.append(OracleReport.make(f"mean_shift_k{k:g}_sigma{sigma:g}", worst[k] / sigma, 0.05, instances, seed))
    reports.append(OracleReport.make(f"mean_shift_k0_sigma{sigma:g}", worst_zero / sigma, 1e-3, instances, seed))
    # error must grow when sigma leaves the small-variance regime
    reports.append(OracleReport.make(f"mean_shift_regime_sigma{large_sigma:g}", regime_ratio, 0.5, instances, seed))
    return reports


def oracle_guidance_reduction(seed: int = 0, depth: int = 4) -> OracleReport:
    """guided_step with k=0 must reproduce unguided_step bit for bit."""
    from .diffusion import unguided_step

    rng = np.random.default_rng(seed)
    sched = make_schedule(3, 0.1, 0.3)
    model = NoisePredictor(depth, seed=seed)
    for name, p in model.params.items():
        p.data = (p.data + 0.1 * rng.standard_normal(p.shape)).astype(np.float32)
    tc = TeacherClassifier(rng.standard_normal((depth, 3)).astype(np.float32), np.zeros(3, np.float32))
    x = Tensor(rng.standard_normal((4, 4, 4, depth)))
    y = rng.integers(3, size=4)
    mismatches = 0
    with tn.no_grad():
        for t in (3, 2, 1):
            a = guided_step(model, tc, x, t, y, 0.0, sched, np.random.default_rng(seed + t)).data
            b = unguided_step(model, x, t, sched, np.random.default_rng(seed + t)).data
            mismatches += int(a.tobytes() != b.tobytes())
    return OracleReport.make("guided_k0_equals_unguided", mismatches, 0, 3, seed)


# gradients ------------------------------------------------------------------------

GradCase = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _projected(op, out_shape_rng):
    """Scalarize an op's output with a fixed random projection."""
    cache = {}

    def fn(x: Tensor) -> Tensor:
        y = op(x)
        if "r" not in cache:
            cache["r"] = out_shape_rng.standard_normal(y.shape)
        return tn.sum(tn.mul(y, Tensor(cache["r"], dtype=y.dtype)))

    return fn


def _const(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _map_shape(rng, even=False):
    b = int(rng.integers(1, 3))
    h = int(rng.choice([2, 4])) if even else int(rng.integers(2, 5))
    w = int(rng.choice([2, 4])) if even else int(rng.integers(2, 5))
    return (b, h, w, int(rng.integers(1, 4)))


def _case_elementwise(op):
    def make(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        return _projected(op, rng), _away_from_zero(rng, shape)
    return make


def _case_binary(kind, which):
    def make(rng):
        shape = _map_shape(rng)
        other_shape = shape if rng.random() < 0.5 else (1, 1, 1, shape[3])
        other = _const(rng, other_shape)
        f = {"add": tn.add, "sub": tn.sub, "mul": tn.mul}[kind]
        if which == "lhs":
            return _projected(lambda x: f(x, other), rng), rng.standard_normal(shape)
        base = _const(rng, shape)
        return _projected(lambda x: f(base, x), rng), rng.standard_normal(other_shape)
    return make


def _case_reduce(kind):
    def make(rng):
        shape = _map_shape(rng)
        axis = [None, 1, (1, 2), 3][int(rng.integers(4))]
        f = {"sum": tn.sum, "mean": tn.mean}[kind]
        return _projected(lambda x: f(x, axis=axis), rng), rng.standard_normal(shape)
    return make


def _case_matmul(which):
    def make(rng):
        lead = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 3))))
        k, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        if which == "lhs":
            w = _const(rng, (k, n))
            return _projected(lambda x: tn.matmul(x, w), rng), rng.standard_normal(lead + (k,))
        a = _const(rng, lead + (k,))
        return _projected(lambda x: tn.matmul(a, x), rng), rng.standard_normal((k, n))
    return make


def _case_conv(which, stride):
    def make(rng):
        b, h, w, cin = _map_shape(rng, even=stride == 2)
        cout = int(rng.integers(1, 4))
        if which == "x":
            wt = _const(rng, (3, 3, cin, cout))
            return _projected(lambda x: tn.conv2d(x, wt, stride=stride), rng), rng.standard_normal((b, h, w, cin))
        xs = _const(rng, (b, h, w, cin))
        return _projected(lambda x: tn.conv2d(xs, x, stride=stride), rng), rng.standard_normal((3, 3, cin, cout))
    return make


def _case_deconv(which):
    def make(rng):
        b, h, w, cin = _map_shape(rng)
        cout = int(rng.integers(1, 4))
        if which == "x":
            wt = _const(rng, (3, 3, cin, cout))
            return _projected(lambda x: tn.conv_transpose2d(x, wt), rng), rng.standard_normal((b, h, w, cin))
        xs = _const(rng, (b, h, w, cin))
        return _projected(lambda x: tn.conv_transpose2d(xs, x), rng), rng.standard_normal((3, 3, cin, cout))
    return make


def _case_standardize(rng):
    return _projected(tn.standardize, rng), rng.standard_normal(_map_shape(rng))


def _case_softmax(kind):
    def make(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        f = tn.softmax if kind == "softmax" else tn.log_softmax
        return _projected(f, rng), 2 * rng.standard_normal(shape)
    return make


def _case_gap(rng):
    return _projected(tn.global_avg_pool, rng), rng.standard_normal(_map_shape(rng))


def _case_reshape(rng):
    shape = _map_shape(rng)
    return _projected(lambda x: tn.reshape(x, (shape[0], -1)), rng), rng.standard_normal(shape)


def _case_clip(rng):
    shape = (int(rng.integers(1, 6)),)
    x = rng.choice([-1.0, 0.0, 1.0], size=shape) + rng.uniform(-0.4, 0.4, size=shape)
    return _projected(lambda t: tn.clip(t, -0.5, 0.5), rng), x


def _case_log(rng):
    shape = (int(rng.integers(1, 6)),)
    return _projected(tn.log, rng), rng.uniform(0.5, 2.0, size=shape)


def _case_local_loss(rng):
    shape = _map_shape(rng)
    target = _const(rng, shape)
    return (lambda x: local_loss(x, target)), rng.standard_normal(shape)


def _case_global_loss(rng):
    d, m = int(rng.integers(2, 6)), int(rng.integers(1, 9))
    head = LshHead(d, m, seed=int(rng.integers(1 << 30)), bias_mode=["gaussian", "zero"][int(rng.integers(2))])
    v_hat = _const(rng, (int(rng.integers(1, 3)), d))
    return (lambda v: global_loss(v, v_hat, head)), rng.standard_normal(v_hat.shape)


def _case_dskd_loss(rng):
    shape = _map_shape(rng)
    head = LshHead(shape[3], int(rng.integers(1, 9)), seed=int(rng.integers(1 << 30)))
    target = _const(rng, shape)
    gamma = float(rng.uniform(0, 2))
    return (lambda f: dskd_loss(f, target, head, gamma)), rng.standard_normal(shape)


def _case_kd_loss(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    teacher = 2 * rng.standard_normal(shape)
    tau = float(rng.uniform(0.5, 5))
    return (lambda s: kd_loss(s, teacher, tau)), 2 * rng.standard_normal(shape)


def _case_task_loss(rng):
    b, c = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    y = rng.integers(c, size=b)
    return (lambda z: task_loss(z, y)), 2 * rng.standard_normal((b, c))


def _case_diffusion_loss(rng):
    depth = 2
    model = NoisePredictor(depth, seed=int(rng.integers(1 << 30))).cast(np.float64)
    for p in model.params.values():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    names = list(model.params)
    name = names[int(rng.integers(len(names)))]
    sched = make_schedule(3, 0.1, 0.3)
    x0 = rng.standard_normal((2, 4, 4, depth))
    seed = int(rng.integers(1 << 30))
    flat = model.params[name].data.reshape(-1)
    idx = np.sort(rng.choice(flat.size, size=min(4, flat.size), replace=False))
    base = model.params[name].data.copy()

    def fn(slice_: Tensor) -> Tensor:
        # rebuild the parameter from the fixed base plus the free slice
        mask = np.zeros(flat.size)
        mask[idx] = 1
        onehots = np.zeros((len(idx), flat.size))
        onehots[np.arange(len(idx)), idx] = 1
        full = tn.add(Tensor(base.reshape(-1) * (1 - mask), dtype=np.float64), tn.matmul(slice_, Tensor(onehots, dtype=np.float64)))
        model.params[name] = tn.reshape(full, base.shape)
        return diffusion_loss(model, Tensor(x0, dtype=np.float64), sched, np.random.default_rng(seed))

    return fn, flat[idx].copy()


GRAD_FAMILIES: dict[str, GradCase] = {
    "add_lhs": _case_binary("add", "lhs"),
    "add_rhs": _case_binary("add", "rhs"),
    "sub_lhs": _case_binary("sub", "lhs"),
    "sub_rhs": _case_binary("sub", "rhs"),
    "mul_lhs": _case_binary("mul", "lhs"),
    "mul_rhs": _case_binary("mul", "rhs"),
    "square": _case_elementwise(tn.square),
    "relu": _case_elementwise(tn.relu),
    "sigmoid": _case_elementwise(tn.sigmoid),
    "log": _case_log,
    "clip": _case_clip,
    "sum": _case_reduce("sum"),
    "mean": _case_reduce("mean"),
    "reshape": _case_reshape,
    "global_avg_pool": _case_gap,
    "matmul_lhs": _case_matmul("lhs"),
    "matmul_rhs": _case_matmul("rhs"),
    "softmax": _case_softmax("softmax"),
    "log_softmax": _case_softmax("log_softmax"),
    "conv2d_s1_input": _case_conv("x", 1),
    "conv2d_s1_weight": _case_conv("w", 1),
    "conv2d_s2_input": _case_conv("x", 2),
    "conv2d_s2_weight": _case_conv("w", 2),
    "conv_transpose2d_input": _case_deconv("x"),
    "conv_transpose2d_weight": _case_deconv("w"),
    "standardize": _case_standardize,
    "local_loss": _case_local_loss,
    "global_loss": _case_global_loss,
    "dskd_loss": _case_dskd_loss,
    "kd_loss": _case_kd_loss,
    "task_loss": _case_task_loss,
    "diffusion_loss": _case_diffusion_loss,
}


def _classifier_grad_case(rng):
    h, w, d, c = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
    tc = TeacherClassifier(rng.standard_normal((d, c)), rng.standard_normal(c))
    y = int(rng.integers(c))
    wt, bt = Tensor(tc.weight, dtype=np.float64), Tensor(tc.bias, dtype=np.float64)

    def log_p(x: Tensor) -> Tensor:
        # independent route: log-softmax through GAP on the tape, differenced numerically
        z = tn.add(tn.matmul(tn.global_avg_pool(x), wt), bt)
        onehot = np.zeros(c)
        onehot[y] = 1
        return tn.sum(tn.mul(tn.log_softmax(z), Tensor(onehot, dtype=np.float64)))

    return log_p, 2 * rng.standard_normal((h, w, d)), (lambda x: classifier_grad(tc, x, y))


def oracle_gradients(seed: int = 0, instances: int = 100, families: Iterable[str] | None = None,
                     step: float = 1e-4) -> list[OracleReport]:
    """Central-difference check of every primitive, the classifier gradient and every loss.

    Each family also runs one planted-fault mutant (analytic gradient scaled
    by 1.5); its report passes when the check flags the mutant.
    """
    reports = []
    names = list(families) if families is not None else [*GRAD_FAMILIES, "classifier_grad"]
    for fam_idx, name in enumerate(names):
        rng = np.random.default_rng([seed, fam_idx])
        worst = 0.0
        mutant = math.inf
        for i in range(instances):
            if name == "classifier_grad":
                fn, point, closed = _classifier_grad_case(rng)
                err = grad_check(fn, point, step, grad_fn=closed)
                if i == 0:
                    mutant = grad_check(fn, point, step, grad_fn=lambda x: MUTANT_SCALE * closed(x))
            else:
                fn, point = GRAD_FAMILIES[name](rng)
                err = grad_check(fn, point, step)
                if i == 0:
                    ana = tn.analytic_grad(fn, point)
                    mutant = grad_check(fn, point, step, grad_fn=lambda x: MUTANT_SCALE * ana)
            worst = max(worst, err)
        reports.append(OracleReport.make(f"grad:{name}", worst, GRAD_TOL, instances, seed))
        # detection margin: tolerance / mutant error must stay below 1
        reports.append(OracleReport.make(f"mutant:{name}", GRAD_TOL / max(mutant, 1e-300), 1.0, 1, seed))
    return reports


# LSH --------------------------------------------------------------------------------


def oracle_lsh_properties(head_seed: int = 0, trials: int = 1000, depth: int = 32, num_hashes: int = 4096,
                          collision_tol: float = 0.02) -> list[OracleReport]:
    rng = np.random.default_rng(head_seed)
    reports = []

    zero_head = LshHead(depth, 256, head_seed, bias_mode="zero")
    mismatches = 0
    for _ in range(trials):
        v = rng.standard_normal(depth).astype(np.float32)
        c = float(np.exp(rng.uniform(-5, 5)))
        a = hash_codes(Tensor(v), zero_head)
        b = hash_codes(Tensor((c * v).astype(np.float32)), zero_head)
        mismatches += int(not np.array_equal(a, b))
        if mismatches == 0:
            la = global_loss(Tensor(v), Tensor(v), zero_head).data
            lb = global_loss(Tensor(v), Tensor((c * v).astype(np.float32)), zero_head).data
            mismatches += int(la.tobytes() != lb.tobytes())
    reports.append(OracleReport.make("lsh_scale_invariance_zero_bias", mismatches, 0, trials, head_seed))

    head = LshHead(depth, num_hashes, head_seed + 1, bias_mode="zero")
    devs = []
    for _ in range(trials):
        u = rng.standard_normal(depth)
        u /= np.linalg.norm(u)
        w = rng.standard_normal(depth)
        w -= (w @ u) * u
        w /= np.linalg.norm(w)
        theta = rng.uniform(0, np.pi)
        v = np.cos(theta) * u + np.sin(theta) * w
        du = hash_codes(Tensor(u), head)
        dv = hash_codes(Tensor(v), head)
        devs.append(abs(np.mean(du != dv) - theta / np.pi))
    reports.append(OracleReport.make("lsh_collision_law", float(np.mean(devs)), collision_tol, trials, head_seed))

    gauss = LshHead(depth, 256, head_seed + 2, bias_mode="gaussian")
    found = 1.0
    for _ in range(trials):
        v = rng.standard_normal(depth).astype(np.float32)
        c = float(np.exp(rng.uniform(-3, 3)))
        if not np.array_equal(hash_codes(Tensor(v), gauss), hash_codes(Tensor((c * v).astype(np.float32)), gauss)):
            found = 0.0
            break
    # passes when a counterexample to scale invariance exists under a Gaussian bias
    reports.append(OracleReport.make("lsh_gaussian_bias_breaks_invariance", found, 0.0, trials, head_seed))
    return reports


# suites -----------------------------------------------------------------------------

SUITES = ("all", "grad", "diffusion", "guidance", "lsh")


def run_suite(name: str, seed: int = 0) -> list[OracleReport]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    reports: list[OracleReport] = []
    if name in ("all", "grad"):
        reports += oracle_gradients(seed=seed)
    if name in ("all", "diffusion"):
        sched = make_schedule(3, 0.1, 0.3)
        reports += oracle_forward_marginal(sched, seed=seed)
        reports.append(oracle_sigma2_identity(sched))
        reports.append(oracle_sigma2_identity(make_schedule(50, 1e-3, 0.2)))
    if name in ("all", "guidance"):
        reports += oracle_mean_shift(seed=seed)
        reports.append(oracle_guidance_reduction(seed=seed))
    if name in ("all", "lsh"):
        reports += oracle_lsh_properties(head_seed=seed)
    return reports


# end to end -------------------------------------------------------------------------


def oracle_e2e_sanity(cfg, seeds: Sequence[int] = (0, 1, 2, 3, 4), run_root=None, samples: int = 512,
                      epochs: int | None = 10) -> list[OracleReport]:
    """Short paired toy runs: DSKD against the KD-only baseline, guidance on against off.

    One teacher is shared by every run. Each seed moves the student init,
    the LSH head and the sampling streams together; the data seed stays put.
    """
    import tempfile
    import time
    from pathlib import Path

    from . import trainer as tr
    from .guidance import GuidanceConfig, denoise_student, teacher_log_prob

    start = time.perf_counter()
    if epochs is not None:
        cfg = cfg.replace(optimizer__epochs=epochs)
    root = Path(run_root) if run_root is not None else Path(tempfile.mkdtemp(prefix="dskd_e2e_"))
    clean_train, _, test = tr.load_data(cfg)
    teacher, teacher_acc = tr.obtain_teacher(cfg, root, clean_train, test)
    reports = [OracleReport.make("e2e_teacher_error", 1.0 - teacher_acc, 1.0 - tr.MIN_TEACHER_ACC, len(test), 0)]

    dskd_acc, base_acc, states = [], [], {}
    for s in seeds:
        run_cfg = cfg.replace(seeds__model=s, seeds__lsh=s, seeds__sampling=s)
        d = tr.train(run_cfg, teacher=teacher, dskd=True, run_dir=root / f"dskd_seed{s}")
        b = tr.train(run_cfg, teacher=teacher, dskd=False, run_dir=root / f"base_seed{s}")
        dskd_acc.append(tr.evaluate(d.state.student, test))
        base_acc.append(tr.evaluate(b.state.student, test))
        states[s] = (d.state, b.state)
    gap = float(np.median(base_acc) - np.median(dskd_acc))
    log.info("e2e test accuracy dskd=%s baseline=%s", dskd_acc, base_acc)
    reports.append(OracleReport.make("e2e_median_baseline_minus_dskd", gap, 0.0, len(seeds), seeds[0]))

    s0 = seeds[0]
    zero = tr.train(cfg.replace(seeds__model=s0, seeds__lsh=s0, seeds__sampling=s0, losses__alpha=0.0),
                    teacher=teacher, dskd=True, run_dir=root / f"alpha0_seed{s0}")
    base_params = states[s0][1].student.params
    drift = max(float(np.max(np.abs(p.data - base_params[k].data))) for k, p in zero.state.student.params.items())
    reports.append(OracleReport.make("e2e_alpha0_equals_baseline", drift, 0.0, 1, s0))

    st = states[s0][0]
    n = min(samples, len(test))
    with tn.no_grad():
        f = st.projector(st.student.features(Tensor(test.images[:n]))).data
        logp = {}
        for k in (0.0, 1.0):
            f_hat, _ = denoise_student(st.predictor, st.teacher_cls, st.adapter, f, test.labels[:n],
                                       GuidanceConfig(k=k, T=st.sched.steps), st.sched, np.random.default_rng(s0))
            logp[k] = float(teacher_log_prob(st.teacher_cls, f_hat.data, test.labels[:n]).mean())
    reports.append(OracleReport.make("e2e_logprob_k0_minus_k1", logp[0.0] - logp[1.0], 0.0, n, s0))
    reports.append(OracleReport.make("e2e_runtime_seconds", time.perf_counter() - start, 600.0, 1, 0))
    return reports
