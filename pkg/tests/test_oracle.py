import ast
import inspect

import numpy as np
import pytest

from dson_lab import norm, oracle


def test_naive_stats_constant_input_has_zero_variance():
    for mode in ("batch", "instance", "layer"):
        assert np.all(oracle.naive_stats(np.full((2, 2, 3, 3), 3.7), mode)[2] == 0.0)


def test_naive_instance_equals_batch_for_single_instance():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    _, bm, bv = oracle.naive_stats(x, "batch")
    _, im, iv = oracle.naive_stats(x, "instance")
    np.testing.assert_array_equal(bm, im[0])
    np.testing.assert_array_equal(bv, iv[0])


def test_reference_functions_import_nothing_from_production():
    """The loop references must not reuse the code they verify."""
    for fn in (oracle.naive_stats, oracle.naive_mix, oracle.naive_conv2d):
        names = {n.id for n in ast.walk(ast.parse(inspect.getsource(fn))) if isinstance(n, ast.Name)}
        assert not names & {"norm", "tensor", "T", "compute_stats", "conv2d_forward"}


def test_report_registry_and_determinism():
    a = oracle.run_all_checks(3, stats_count=3, grad_configs=3)
    b = oracle.run_all_checks(3, stats_count=3, grad_configs=3)
    names = [c.name for c in a.checks]
    assert len(names) == len(set(names))
    assert a.table() == b.table()
    assert a.passed
    for required in ("stats_batch", "stats_instance", "stats_layer", "mix_stats",
                     "conv2d_forward", "dson_backward", "network_dson_logit"):
        assert required in names


def test_perturbed_backward_is_detected(monkeypatch):
    real = norm.norm_backward

    def broken(cache, grad_y):
        gx, gg, gb, gmix = real(cache, grad_y)
        return gx * 1.001, gg, gb, gmix

    monkeypatch.setattr(norm, "norm_backward", broken)
    report = oracle.run_all_checks(0, stats_count=1, grad_configs=3)
    failed = {c.name for c in report.checks if not c.passed}
    assert "dson_backward" in failed
    assert "network_dson_conv" in failed
    assert "stats_batch" not in failed


def test_perturbed_conv_backward_is_detected(monkeypatch):
    from dson_lab import tensor

    real = tensor.conv2d_backward

    def broken(*args, **kw):
        gx, gw, gb = real(*args, **kw)
        return gx, gw + 1e-3, gb

    monkeypatch.setattr(tensor, "conv2d_backward", broken)
    report = oracle.run_all_checks(0, stats_count=1, grad_configs=2)
    assert not report.passed
    assert "conv2d_backward" in {c.name for c in report.checks if not c.passed}


@pytest.mark.parametrize("variant", ["bn", "sn", "ibn"])
def test_network_check_runs_for_other_variants(variant):
    report = oracle.OracleReport(0)
    oracle.check_network_grads(report, np.random.default_rng(0), 3, variant)
    assert report.passed, report.table()
