"""Synthetic multi-domain classification data with channel-affine style shift.

Each class owns a content template (C x H x W, every channel standardized to
zero mean and unit variance).  A sample of class ``y`` drawn in domain ``d``
is::

    x[c] = a_c * template_y[c] + b_c + pixel_noise * N(0, 1)
    a_c ~ Normal(gain_c, style_jitter), clipped below at 0.05
    b_c ~ Normal(bias_c, style_jitter)

Per-channel affine style is exactly what instance statistics remove, so with
zero pixel noise the instance-normalized samples of one class coincide across
domains.  Images are rounded to float32 at generation time so the on-disk
format (float32 pixels) round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng

MAGIC = b"DSND"
VERSION = 1
GAIN_FLOOR = 0.05
_HEADER = struct.Struct("<4s8I")
SPLITS = ("train", "test")


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


@dataclass
class DomainSpec:
    domain_id: int
    gain: tuple
    bias: tuple
    style_jitter: float = 0.1
    pixel_noise: float = 0.05

    def validate(self, channels: int) -> None:
        if len(self.gain) != channels or len(self.bias) != channels:
            raise ValueError(f"domain {self.domain_id}: need {channels} gains and biases")
        if min(self.gain) <= 0:
            raise ValueError(f"domain {self.domain_id}: style gains must be positive")
        if self.style_jitter < 0 or self.pixel_noise < 0:
            raise ValueError(f"domain {self.domain_id}: noise levels must be non-negative")


@dataclass
class DatasetSpec:
    num_classes: int = 5
    channels: int = 3
    height: int = 16
    width: int = 16
    train_per_domain: int = 500
    test_per_domain: int = 200
    seed: int = 0
    min_separation: float = 1.0
    smoothing: int = 1
    template_scale: float = 1.0
    shared_content: float = 0.0
    grayscale: bool = False
    templates: np.ndarray | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("image dimensions must be positive")
        if self.height % 4 or self.width % 4:
            raise ValueError("height and width must be multiples of 4 (two 2x2 poolings)")
        if self.train_per_domain < 1 or self.test_per_domain < 1:
            raise ValueError("per-domain sample counts must be positive")
        if self.template_scale <= 0:
            raise ValueError("template_scale must be positive")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")


@dataclass
class DomainDataset:
    images: np.ndarray
    labels: np.ndarray
    domain: int
    split: str
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.domain == other.domain and self.split == other.split
                and self.num_classes == other.num_classes
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


def _smooth(t: np.ndarray, radius: int) -> np.ndarray:
    """Circular box blur over the two spatial axes."""
    if radius <= 0:
        return t
    out = np.zeros_like(t)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            out += np.roll(t, (di, dj), axis=(-2, -1))
    return out


def make_templates(spec: DatasetSpec, max_attempts: int = 100) -> np.ndarray:
    """K standardized content templates with pairwise L2 distance >= min_separation."""
    spec.validate()
    rng = make_rng(spec.seed, 1)
    c = 1 if spec.grayscale else spec.channels
    shape = (spec.num_classes, c, spec.height, spec.width)
    for _ in range(max_attempts):
        base = _smooth(rng.standard_normal(shape[1:]), spec.smoothing)
        t = _smooth(rng.standard_normal(shape), spec.smoothing)
        t = t + spec.shared_content * base
        t = np.repeat(t, spec.channels // c, axis=1)
        t -= t.mean(axis=(2, 3), keepdims=True)
        t *= spec.template_scale / t.std(axis=(2, 3), keepdims=True)
        flat = t.reshape(spec.num_classes, -1)
        d = np.sqrt(np.square(flat[:, None] - flat[None, :]).sum(-1))
        if d[np.triu_indices(spec.num_classes, 1)].min() >= spec.min_separation:
            return t
    raise RuntimeError("could not draw sufficiently separated templates")


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def generate_split(spec: DatasetSpec, dom: DomainSpec, split: str,
                   templates: np.ndarray | None = None) -> DomainDataset:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    dom.validate(spec.channels)
    if templates is None:
        templates = spec.templates if spec.templates is not None else make_templates(spec)
    n = spec.train_per_domain if split == "train" else spec.test_per_domain
    rng = make_rng(spec.seed, 2, dom.domain_id, SPLITS.index(split))
    labels = _balanced_labels(n, spec.num_classes, rng)
    c = spec.channels
    gain = np.maximum(rng.normal(np.asarray(dom.gain, float), dom.style_jitter, (n, c)),
                      GAIN_FLOOR)
    bias = rng.normal(np.asarray(dom.bias, float), dom.style_jitter, (n, c))
    noise = rng.standard_normal((n, c, spec.height, spec.width))
    x = gain[:, :, None, None] * templates[labels] + bias[:, :, None, None]
    if dom.pixel_noise:
        x = x + dom.pixel_noise * noise
    x = x.astype(np.float32).astype(np.float64)
    return DomainDataset(x, labels, dom.domain_id, split, spec.num_classes)


def generate(spec: DatasetSpec, domains) -> dict:
    """All (domain, split) datasets, keyed by ``(domain_id, split)``."""
    spec.validate()
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ValueError("domain ids must be unique")
    templates = spec.templates if spec.templates is not None else make_templates(spec)
    return {(d.domain_id, s): generate_split(spec, d, s, templates)
            for d in domains for s in SPLITS}


# Style constants of the preset.  Channel-mean gains are 0.2, 0.7, 1.2 and
# 1.7, pairwise at least 0.5 apart; biases move each domain in a different
# colour direction.  Small gains make the fixed per-sample style jitter a
# large relative change, which is where instance statistics pay off.
PRESET_GAINS = (
    (0.2, 0.3, 0.1),
    (0.8, 0.6, 0.7),
    (1.1, 1.4, 1.1),
    (1.9, 1.5, 1.7),
)
PRESET_BIASES = (
    (0.0, 0.0, 0.0),
    (2.0, -1.5, 1.0),
    (-1.5, 2.0, -2.0),
    (-2.5, -1.0, 2.5),
)


def default_four_domain_preset(seed: int = 0):
    """K=5, C=3, 16x16, 500 train / 200 test per domain, four style domains.

    Content is grayscale (identical across channels) with a shared component
    common to all classes, so colour carries style only.
    """
    spec = DatasetSpec(num_classes=5, channels=3, height=16, width=16,
                       train_per_domain=500, test_per_domain=200, seed=seed,
                       grayscale=True, shared_content=1.0)
    domains = [DomainSpec(i, g, b, style_jitter=0.1, pixel_noise=0.05)
               for i, (g, b) in enumerate(zip(PRESET_GAINS, PRESET_BIASES))]
    return spec, domains


# --------------------------------------------------------------------------
# binary file format

def save(ds: DomainDataset, path) -> None:
    n, c, h, w = ds.images.shape
    split_flag = SPLITS.index(ds.split)
    labels = np.asarray(ds.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes, ds.domain, split_flag))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(labels.astype("<u2").tobytes())


def load(path) -> DomainDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, n, c, h, w, k, domain, split_flag = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if split_flag >= len(SPLITS):
        raise DatasetFormatError(f"{path}: bad split flag {split_flag}")
    n_px = n * c * h * w
    need = _HEADER.size + 4 * n_px + 2 * n
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise DatasetFormatError(f"{path}: {len(raw) - need} trailing bytes")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f4", n_px, off).astype(np.float64).reshape(n, c, h, w)
    labels = np.frombuffer(raw, "<u2", n, off + 4 * n_px).astype(np.int64)
    return DomainDataset(images, labels, domain, SPLITS[split_flag], k)


def dataset_filename(domain: int, split: str) -> str:
    return f"domain{domain}_{split}.dsnd"
