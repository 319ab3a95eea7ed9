import json
import numpy as np
import pytest

from dskd.diffusion import make_schedule
from dskd.verification import (
    GRAD_FAMILIES,
    OracleReport,
    format_table,
    mean_shift_error,
    oracle_forward_marginal,
    oracle_gradients,
    oracle_guidance_reduction,
    oracle_lsh_properties,
    oracle_mean_shift,
    oracle_sigma2_identity,
    run_suite,
)


def test_report_pass_flag_follows_tolerance():
    assert OracleReport.make("a", 0.1, 0.1, 1, 0).passed
    assert not OracleReport.make("a", 0.11, 0.1, 1, 0).passed
    rec = json.loads(OracleReport.make("a", 0.5, 1.0, 3, 7).to_json())
    assert rec == {"check": "a", "error": 0.5, "tolerance": 1.0, "passed": True, "samples": 3, "seed": 7}
    assert "FAIL" in format_table([OracleReport.make("b", 2, 1, 1, 0)])


def test_forward_marginal_example():
    reports = {r.check: r for r in oracle_forward_marginal(make_schedule(3, 0.1, 0.3), samples=100_000)}
    assert reports["marginal_t0_identity"].error == 0.0
    assert all(r.passed for r in reports.values())
    assert reports["marginal_mean_t2"].samples == 100_000


def test_sigma2_identity_report():
    assert oracle_sigma2_identity(make_schedule(3, 0.1, 0.3)).passed


def test_mean_shift_examples(rng):
    w = rng.standard_normal((2, 3))
    w *= 2 / np.linalg.norm(w)
    b, mu = rng.standard_normal(3), rng.standard_normal(2)
    assert mean_shift_error(0.05, w, b, 1, 0.0, mu) < 1e-3 * 0.05
    small = mean_shift_error(0.05, w, b, 1, 1.0, mu)
    assert small <= 0.05 * 0.05
    assert mean_shift_error(0.5, w, b, 1, 1.0, mu) > small


def test_mean_shift_grid_preconditions():
    w, b, mu = np.eye(2), np.zeros(2), np.zeros(2)
    with pytest.raises(ValueError):
        mean_shift_error(0.05, w, b, 0, 1.0, mu, n=100)
    with pytest.raises(ValueError):
        mean_shift_error(0.05, w, b, 0, 1.0, mu, extent=3)


def test_mean_shift_suite_passes():
    assert all(r.passed for r in oracle_mean_shift(instances=3))


def test_gradient_families_cover_primitives_and_losses():
    required = {"add_lhs", "mul_lhs", "matmul_lhs", "conv2d_s1_weight", "conv2d_s2_input", "conv_transpose2d_input",
                "relu", "sigmoid", "softmax", "log_softmax", "standardize", "global_avg_pool", "mean", "sum", "square",
                "local_loss", "global_loss", "dskd_loss", "kd_loss", "task_loss", "diffusion_loss"}
    assert required <= set(GRAD_FAMILIES)


def test_gradient_oracle_and_mutants():
    reports = oracle_gradients(instances=5, families=["conv2d_s2_weight", "global_loss", "classifier_grad"])
    assert len(reports) == 6 and all(r.passed for r in reports)
    mutants = [r for r in reports if r.check.startswith("mutant:")]
    assert all(r.error < 1.0 for r in mutants)


def test_guidance_reduction_report():
    assert oracle_guidance_reduction().error == 0


def test_lsh_reports():
    reports = {r.check: r for r in oracle_lsh_properties(trials=200)}
    assert reports["lsh_scale_invariance_zero_bias"].error == 0
    assert reports["lsh_collision_law"].error <= 0.02
    assert reports["lsh_gaussian_bias_breaks_invariance"].passed


def test_suites_are_deterministic():
    a = [r.to_json() for r in run_suite("lsh", seed=3)]
    b = [r.to_json() for r in run_suite("lsh", seed=3)]
    assert a == b
    with pytest.raises(ValueError):
        run_suite("everything")
