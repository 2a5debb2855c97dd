import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dson_lab import synthdata as sd
from dson_lab.norm import norm_forward


def _small(**kw):
    base = dict(num_classes=4, height=8, width=8, train_per_domain=21, test_per_domain=9, seed=3)
    base.update(kw)
    return sd.DatasetSpec(**base)


def _in_normalize(x):
    mix = np.zeros((3, x.shape[1]))
    mix[1] = 1.0
    return norm_forward(x, np.ones(x.shape[1]), np.zeros(x.shape[1]), mix, 1e-12)[0]


def test_identity_style_reproduces_templates():
    spec = _small()
    dom = sd.DomainSpec(0, (1.0,) * 3, (0.0,) * 3, style_jitter=0.0, pixel_noise=0.0)
    ds = sd.generate_split(spec, dom, "train")
    t = sd.make_templates(spec)
    np.testing.assert_allclose(ds.images, t[ds.labels], atol=1e-6)


def test_style_is_removable_by_instance_normalization():
    spec = _small()
    t = sd.make_templates(spec)
    a = sd.generate_split(spec, sd.DomainSpec(0, (1, 2, 3), (0, 1, -1), 0.1, 0.0), "test", t)
    b = sd.generate_split(spec, sd.DomainSpec(1, (0.5, 2.5, 1), (3, -2, 0), 0.1, 0.0), "test", t)
    na, nb = _in_normalize(a.images), _in_normalize(b.images)
    for k in range(spec.num_classes):
        ia, ib = np.flatnonzero(a.labels == k)[0], np.flatnonzero(b.labels == k)[0]
        assert np.max(np.abs(na[ia] - nb[ib])) <= 1e-6


def test_labels_are_balanced():
    ds = sd.generate_split(_small(), sd.DomainSpec(0, (1,) * 3, (0,) * 3), "train")
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1


def test_templates_are_separated():
    spec = _small(min_separation=2.0)
    t = sd.make_templates(spec).reshape(spec.num_classes, -1)
    for i, j in itertools.combinations(range(spec.num_classes), 2):
        assert np.linalg.norm(t[i] - t[j]) >= 2.0
    with pytest.raises(RuntimeError):
        sd.make_templates(_small(min_separation=1e6), max_attempts=3)


def test_preset_contract():
    spec, doms = sd.default_four_domain_preset()
    assert (spec.num_classes, spec.channels, spec.height, spec.width) == (5, 3, 16, 16)
    assert (spec.train_per_domain, spec.test_per_domain) == (500, 200)
    assert all(d.style_jitter == 0.1 and d.pixel_noise == 0.05 for d in doms)
    means = [np.mean(d.gain) for d in doms]
    for a, b in itertools.combinations(means, 2):
        assert abs(a - b) >= 0.5 - 1e-12


def test_preset_is_deterministic():
    spec, doms = sd.default_four_domain_preset()
    a = sd.generate(spec, doms[:1])
    b = sd.generate(*sd.default_four_domain_preset())
    assert a[(0, "train")] == b[(0, "train")]
    assert a[(0, "test")] == b[(0, "test")]


def test_gains_are_clipped_positive():
    spec = _small(train_per_domain=200)
    dom = sd.DomainSpec(0, (0.06,) * 3, (0,) * 3, style_jitter=0.5, pixel_noise=0.0)
    ds = sd.generate_split(spec, dom, "train")
    assert np.all(ds.images.std(axis=(2, 3)) > 0)


def test_invalid_specs():
    with pytest.raises(ValueError):
        _small(height=6).validate()
    with pytest.raises(ValueError):
        sd.generate_split(_small(), sd.DomainSpec(0, (1, 1), (0, 0)), "train")
    with pytest.raises(ValueError):
        sd.generate_split(_small(), sd.DomainSpec(0, (1, 0, 1), (0, 0, 0)), "train")
    with pytest.raises(ValueError):
        sd.generate_split(_small(), sd.DomainSpec(0, (1,) * 3, (0,) * 3), "val")
    with pytest.raises(ValueError):
        sd.generate(_small(), [sd.DomainSpec(0, (1,) * 3, (0,) * 3)] * 2)


def test_round_trip(tmp_path):
    ds = sd.generate_split(_small(), sd.DomainSpec(2, (1, 2, 3), (0, 1, 2)), "test")
    path = tmp_path / sd.dataset_filename(2, "test")
    sd.save(ds, path)
    back = sd.load(path)
    assert back == ds
    assert back.images.tobytes() == ds.images.tobytes()


def test_file_errors(tmp_path):
    ds = sd.generate_split(_small(), sd.DomainSpec(0, (1,) * 3, (0,) * 3), "train")
    path = tmp_path / "d.dsnd"
    sd.save(ds, path)
    raw = path.read_bytes()

    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(sd.TruncatedFileError):
        sd.load(tmp_path / "t")
    (tmp_path / "h").write_bytes(raw[:10])
    with pytest.raises(sd.TruncatedFileError):
        sd.load(tmp_path / "h")
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(sd.BadMagicError, match="DSND"):
        sd.load(tmp_path / "m")
    (tmp_path / "v").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(sd.VersionMismatchError):
        sd.load(tmp_path / "v")
    (tmp_path / "x").write_bytes(raw + b"\0")
    with pytest.raises(sd.DatasetFormatError):
        sd.load(tmp_path / "x")


def test_header_layout(tmp_path):
    ds = sd.generate_split(_small(), sd.DomainSpec(1, (1,) * 3, (0,) * 3), "test")
    path = tmp_path / "d.dsnd"
    sd.save(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DSND"
    fields = np.frombuffer(raw[4:36], "<u4")
    assert list(fields) == [1, 9, 3, 8, 8, 4, 1, 1]
    assert len(raw) == 36 + 4 * 9 * 3 * 64 + 2 * 9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_generation_is_a_pure_function_of_seed(seed, k):
    spec = _small(seed=seed, num_classes=k, train_per_domain=7)
    dom = sd.DomainSpec(0, (1, 2, 1), (0, 1, 0))
    a, b = sd.generate_split(spec, dom, "train"), sd.generate_split(spec, dom, "train")
    assert a == b
    assert set(np.unique(a.labels)) <= set(range(k))
