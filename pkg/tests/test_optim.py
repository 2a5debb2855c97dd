import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dson_lab.model import DomainBranchNet
from dson_lab.norm import NormConfig
from dson_lab.optim import (BatchSampler, LrSchedule, NoiseConfig, SgdState, evaluate,
                            inject_label_noise, lr_at, sgd_step, train)
from dson_lab.synthdata import DatasetSpec, DomainSpec, generate


def test_schedule_endpoints():
    s = LrSchedule()
    assert lr_at(s, 0) == 0.02
    assert abs(lr_at(s, s.total_iters) - 0.02 / 11 ** 0.75) <= 1e-12


def test_schedule_errors():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(total_iters=0), 0)
    with pytest.raises(ValueError):
        lr_at(LrSchedule(total_iters=10), 11)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_schedule_is_monotone(total, data):
    s = LrSchedule(total_iters=total)
    t = data.draw(st.integers(0, total - 1))
    assert lr_at(s, t + 1) <= lr_at(s, t)


def test_momentum_step_by_hand():
    p = {"a": np.array([1.0, 2.0])}
    state = SgdState(momentum=0.9)
    sgd_step(p, {"a": np.array([1.0, -1.0])}, state, 0.1)
    np.testing.assert_allclose(p["a"], [0.9, 2.1])
    sgd_step(p, {"a": np.array([1.0, -1.0])}, state, 0.1)
    # v = 0.9 * 1 + 1 = 1.9
    np.testing.assert_allclose(p["a"], [0.9 - 0.19, 2.1 + 0.19])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, SgdState(), 0.1)


def test_label_noise_zero_is_identity_and_one_flips_all():
    y = np.arange(100) % 5
    np.testing.assert_array_equal(inject_label_noise(y, NoiseConfig(0.0), 5), y)
    flipped = inject_label_noise(y, NoiseConfig(1.0, seed=3), 5)
    assert np.all(flipped != y) and flipped.min() >= 0 and flipped.max() < 5


def test_label_noise_rate_and_determinism():
    y = np.arange(20000) % 5
    a = inject_label_noise(y, NoiseConfig(0.2, seed=1), 5)
    np.testing.assert_array_equal(a, inject_label_noise(y, NoiseConfig(0.2, seed=1), 5))
    assert abs(np.mean(a != y) - 0.2) < 0.01
    with pytest.raises(ValueError):
        inject_label_noise(y, NoiseConfig(1.5), 5)


def test_sampler_covers_each_epoch():
    s = BatchSampler(10, 4, np.random.default_rng(0))
    idx = np.concatenate([s.next() for _ in range(5)])
    assert sorted(idx[:10]) == list(range(10))
    assert sorted(idx[10:20]) == list(range(10))
    big = BatchSampler(3, 7, np.random.default_rng(0)).next()
    assert len(big) == 7
    with pytest.raises(ValueError):
        BatchSampler(0, 2, np.random.default_rng(0))


def _tiny_data(seed=0):
    spec = DatasetSpec(num_classes=3, height=8, width=8, train_per_domain=30, test_per_domain=15,
                       seed=seed)
    doms = [DomainSpec(i, (1.0 + i,) * 3, (0.5 * i,) * 3) for i in range(3)]
    return generate(spec, doms)


def test_train_reduces_loss_and_is_deterministic():
    data = _tiny_data()
    tr = [data[(d, "train")] for d in (0, 1)]
    va = [data[(d, "test")] for d in (0, 1)]

    def run():
        net = DomainBranchNet(3, 3, 2, NormConfig(), widths=(4, 8), seed=1)
        rep = train(net, tr, LrSchedule(total_iters=60), SgdState(), None, 60, 8, seed=2,
                    log_every=10, val_every=20, val_sets=va)
        return net, rep

    net, rep = run()
    assert rep.records[-1][2] < rep.records[0][2]
    assert [v[0] for v in rep.validation] == [20, 40, 60]
    assert rep.best_iter in (20, 40, 60)
    net2, rep2 = run()
    assert rep.csv() == rep2.csv()
    header = rep.csv().splitlines()[0]
    assert header == "iter,eta,loss_total,loss_d0,loss_d1,w_d0,w_d1"
    acc = evaluate(net, data[(2, "test")])
    assert 0.0 <= acc <= 1.0
    assert evaluate(net, data[(2, "test")], "single_branch", 1) >= 0.0
    with pytest.raises(ValueError):
        evaluate(net, data[(2, "test")], "leave_one_out")


def test_train_argument_errors():
    data = _tiny_data()
    net = DomainBranchNet(3, 3, 2, widths=(4, 8))
    with pytest.raises(ValueError):
        train(net, [data[(0, "train")]], iters=1)
    with pytest.raises(ValueError):
        train(net, [], iters=1)
