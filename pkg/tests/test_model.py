import numpy as np
import pytest

from dson_lab.model import (DomainBranchNet, Prediction, branch_forward, dump_features_2ch,
                            ensemble_predict, leave_one_out_predict, total_loss,
                            write_feature_table)
from dson_lab.norm import VARIANTS, NormConfig
from dson_lab.oracle import network_grad_errors


def _batches(rng, s=2, n=3, size=8):
    return [(rng.normal(d, 1 + d, (n, 3, size, size)), rng.integers(0, 5, n), d) for d in range(s)]


def _trained(variant="dson", s=2, steps=3, seed=0):
    net = DomainBranchNet(3, 5, s, NormConfig(variant=variant), seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        net.loss_and_grads(_batches(rng, s))
    return net


def test_parameter_shapes():
    net = DomainBranchNet(3, 5, 3)
    p = net.params
    assert p["conv1.w"].shape == (16, 3, 3, 3)
    assert p["conv2.w"].shape == (32, 16, 3, 3)
    assert p["fc.w"].shape == (5, 32)
    assert p["norm1.gamma"].shape == (3, 16)
    assert p["mix.logit"].shape == (3,)
    assert DomainBranchNet(3, 5, 3, NormConfig(variant="bn")).params["norm2.beta"].shape == (1, 32)


def test_init_is_seeded():
    a, b = DomainBranchNet(3, 5, 2, seed=4), DomainBranchNet(3, 5, 2, seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["conv1.w"], DomainBranchNet(3, 5, 2, seed=5).params["conv1.w"])


def test_fresh_model_in_ratio_is_half():
    net = DomainBranchNet(3, 5, 3)
    assert [net.in_ratio(d) for d in range(3)] == [0.5, 0.5, 0.5]


@pytest.mark.parametrize("variant", VARIANTS)
def test_network_gradients_all_variants(variant):
    # seed chosen so no pre-activation lies within the step of the ReLU kink
    rng = np.random.default_rng(2)
    net = DomainBranchNet(3, 5, 2, NormConfig(variant=variant), seed=2)
    if net.params["mix.logit"].size:
        net.params["mix.logit"][:] = rng.normal(size=net.params["mix.logit"].shape)
    errs = network_grad_errors(net, _batches(rng, size=4), rng, per_tensor=16)
    assert max(errs.values()) < 1e-5, errs


def test_eval_before_training_fails_for_bn_branches():
    net = DomainBranchNet(3, 5, 2)
    with pytest.raises(RuntimeError):
        ensemble_predict(net, np.zeros((1, 3, 8, 8)))


def test_wrong_input_channels():
    with pytest.raises(ValueError):
        _trained().branch_logits_eval(np.zeros((1, 4, 8, 8)))


def test_unknown_domain():
    with pytest.raises(IndexError):
        branch_forward(_trained(), np.zeros((1, 3, 8, 8)), 5)


def test_ensemble_averages_logits_not_probabilities():
    net = _trained(s=3)
    x = np.random.default_rng(2).normal(size=(4, 3, 8, 8))
    per = net.branch_logits_eval(x)
    pred = ensemble_predict(net, x)
    np.testing.assert_allclose(pred.logits, per.mean(axis=0))
    np.testing.assert_allclose(pred.probabilities.sum(axis=1), 1.0)


def test_leave_one_out_with_two_branches_is_the_other_branch():
    net = _trained(s=2)
    x = np.random.default_rng(3).normal(size=(5, 3, 8, 8))
    loo = leave_one_out_predict(net, x, 0)
    single = Prediction.from_logits(branch_forward(net, x, 1)[0])
    np.testing.assert_array_equal(loo.logits, single.logits)
    np.testing.assert_array_equal(loo.probabilities, single.probabilities)


def test_leave_one_out_needs_two_branches():
    with pytest.raises(ValueError):
        leave_one_out_predict(_trained(s=1), np.zeros((1, 3, 8, 8)), 0)


def test_state_dict_round_trip_restores_predictions():
    net = _trained()
    x = np.random.default_rng(4).normal(size=(2, 3, 8, 8))
    before = ensemble_predict(net, x).logits
    state = net.state_dict()
    _trained(steps=1).load_state_dict(state)
    other = DomainBranchNet(3, 5, 2, seed=9)
    other.load_state_dict(state)
    np.testing.assert_array_equal(ensemble_predict(other, x).logits, before)


def test_total_loss_is_sum_of_domain_losses():
    net = _trained()
    rng = np.random.default_rng(5)
    batches = [(b[0], b[1]) for b in _batches(rng)]
    from dson_lab.model import domain_loss
    total = total_loss(net, batches)
    assert total == pytest.approx(sum(domain_loss(net, b, s) for s, b in enumerate(batches)))
    with pytest.raises(ValueError):
        total_loss(net, batches[:1])


def test_frozen_network_keeps_normalization_fixed():
    net = _trained(variant="bn")
    for layer in net.norms:
        layer.frozen = True
    assert not any(k.startswith("norm") for k in net.trainable_keys())
    before = [rs.mean.copy() for layer in net.norms for rs in layer.running]
    _, _, grads = net.loss_and_grads(_batches(np.random.default_rng(6)))
    after = [rs.mean for layer in net.norms for rs in layer.running]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    assert not np.any(grads["norm1.gamma"])


def test_calibrate_sets_running_stats_to_batch_stats():
    net = DomainBranchNet(3, 5, 2, NormConfig(variant="dsbn"))
    x = np.random.default_rng(7).normal(3.0, 2.0, (6, 3, 8, 8))
    net.calibrate([x, x], [0, 1])
    from dson_lab import tensor as T
    a1 = T.conv2d_forward(x, net.params["conv1.w"])
    np.testing.assert_allclose(net.norms[0].running[0].mean, a1.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(net.norms[0].running[0].var, a1.var(axis=(0, 2, 3)))


def test_feature_dump(tmp_path):
    net = _trained()
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(6, 3, 8, 8)), rng.integers(0, 5, 6)
    rows = dump_features_2ch(net, x, y, "in", "input")
    # instance-normalized spatial means are zero
    assert np.allclose([r[:2] for r in rows], 0.0, atol=1e-12)
    rows = dump_features_2ch(net, x, y, "bn", "conv2", channels=(3, 7))
    assert len(rows) == 6 and [r[2] for r in rows] == list(y)
    with pytest.raises(ValueError, match="available"):
        dump_features_2ch(net, x, y, "bn", "conv9")
    path = tmp_path / "f.csv"
    write_feature_table(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "ch1,ch2,label" and len(lines) == 7
