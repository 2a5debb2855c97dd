"""Batch / instance / layer statistics and the domain-specific mixed normalization.

Every normalization variant is expressed through one engine: per-channel
convex weights over the three statistic types (batch, instance, layer) are
applied to the means and to the variances, then the activations are whitened
and passed through a per-channel affine map.  The variants only differ in
where the weights come from and how many affine / running-statistic sets
exist:

=========  ================================  ==================================
variant    mixture weights                   affine + running sets
=========  ================================  ==================================
bn         batch only                        one, shared by all domains
in         instance only                     one
dsbn       batch only                        one per domain
sn         softmax over (bn, in, ln) logits  one; logits shared by all domains
ibn        first layer: half IN / half BN    one
dson       sigmoid of a per-domain logit     one per domain
=========  ================================  ==================================

Mixture logits are not owned by a layer.  They belong to the network and are
read by every normalization layer of a branch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, as_tensor4, softmax, softmax_backward

VARIANTS = ("bn", "in", "dsbn", "sn", "ibn", "dson")

# rows of a mixture-weight matrix
BN, IN, LN = 0, 1, 2


class StatMode(str, enum.Enum):
    BATCH = "batch"
    INSTANCE = "instance"
    LAYER = "layer"


@dataclass
class ChannelStats:
    """Population mean / variance under one reduction mode.

    Shapes: batch ``(C,)``, instance ``(N, C)``, layer ``(N,)``.
    """

    mode: StatMode
    mean: np.ndarray
    var: np.ndarray

    def broadcast(self, n: int, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Expand to per-(instance, channel) arrays of shape ``(n, c)``."""
        if self.mode is StatMode.BATCH:
            return (np.broadcast_to(self.mean[None, :], (n, c)),
                    np.broadcast_to(self.var[None, :], (n, c)))
        if self.mode is StatMode.LAYER:
            return (np.broadcast_to(self.mean[:, None], (n, c)),
                    np.broadcast_to(self.var[:, None], (n, c)))
        return self.mean, self.var


@dataclass
class MixtureWeight:
    """Unconstrained logit with a sigmoid squash; ``w`` weighs batch statistics."""

    logit: float = 0.0

    @property
    def w(self) -> float:
        return float(_sigmoid(self.logit))


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "AffineParams":
        return cls(np.ones(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE))


@dataclass
class NormConfig:
    eps: float = 1e-5
    momentum: float = 0.1
    variant: str = "dson"
    domain_specific_weights: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown normalization variant {self.variant!r}; "
                             f"expected one of {', '.join(VARIANTS)}")


@dataclass
class RunningStats:
    """Exponential moving average of batch statistics."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    count: int = 0

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), momentum)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * mean
        self.var = (1.0 - m) * self.var + m * var
        self.count += 1

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum, self.count)


@dataclass
class MixedStats:
    mean: np.ndarray
    var: np.ndarray


def _sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_AXES = {StatMode.BATCH: (0, 2, 3), StatMode.INSTANCE: (2, 3), StatMode.LAYER: (1, 2, 3)}


def compute_stats(x, mode: StatMode | str) -> ChannelStats:
    x = as_tensor4(x)
    if x.size == 0:
        raise ValueError("cannot compute statistics of an empty tensor")
    mode = StatMode(mode)
    axes = _AXES[mode]
    # the true mean lies in [min, max]; clamping makes constant input exact
    mean = np.clip(x.mean(axis=axes, keepdims=True), x.min(axis=axes, keepdims=True),
                   x.max(axis=axes, keepdims=True))
    var = np.square(x - mean).mean(axis=axes)
    return ChannelStats(mode, mean.squeeze(axis=axes), var)


def mix_stats(bn: ChannelStats, inst: ChannelStats, w: MixtureWeight | float) -> MixedStats:
    """Convex combination ``w * batch + (1 - w) * instance`` of means and variances."""
    if bn.mode is not StatMode.BATCH or inst.mode is not StatMode.INSTANCE:
        raise ValueError(f"mix_stats needs (batch, instance) stats, got ({bn.mode.value}, "
                         f"{inst.mode.value})")
    if inst.mean.ndim != 2 or inst.mean.shape[1] != bn.mean.shape[0]:
        raise ShapeError(f"channel mismatch: batch {bn.mean.shape}, instance {inst.mean.shape}")
    w = w.w if isinstance(w, MixtureWeight) else float(w)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {w}")
    return MixedStats(w * bn.mean[None, :] + (1.0 - w) * inst.mean,
                      w * bn.var[None, :] + (1.0 - w) * inst.var)


# --------------------------------------------------------------------------
# generic engine

@dataclass
class NormCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray            # (N, C)
    gamma: np.ndarray
    mix: np.ndarray                # (3, C)
    stats: dict                    # row index -> ChannelStats
    constant: frozenset            # rows whose statistics were not computed from x
    aux: dict = field(default_factory=dict)


def _stats_from_instance(inst_mean, inst_var, mode: StatMode) -> ChannelStats:
    """Pool per-(instance, channel) moments into batch or layer moments."""
    axis = 0 if mode is StatMode.BATCH else 1
    mean = inst_mean.mean(axis=axis)
    spread = inst_mean - np.expand_dims(mean, axis)
    var = inst_var.mean(axis=axis) + np.square(spread).mean(axis=axis)
    return ChannelStats(mode, mean, var)


def norm_forward(x, gamma, beta, mix, eps: float, fixed_bn: tuple | None = None):
    """Whiten ``x`` with mixed statistics and apply the affine map.

    ``mix`` is a (3, C) array of weights for (batch, instance, layer) rows.
    Rows whose weights are all zero are skipped.  ``fixed_bn = (mean, var)``
    replaces the batch row with constants, e.g. running statistics.
    """
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("empty batch")
    mix = np.asarray(mix, dtype=DTYPE)
    if mix.shape != (3, c):
        raise ShapeError(f"mixture weights must have shape (3, {c}), got {mix.shape}")
    gamma = np.asarray(gamma, dtype=DTYPE)
    if gamma.shape != (c,) or np.shape(beta) != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")

    # every statistic type is pooled from the instance moments
    inst_mean = x.mean(axis=(2, 3))
    if not np.all(np.isfinite(inst_mean)):
        raise ValueError("non-finite values in normalization input")
    inst_var = np.square(x - inst_mean[:, :, None, None]).mean(axis=(2, 3))

    stats, constant = {}, set()
    mean = np.zeros((n, c))
    var = np.zeros((n, c))
    for row, mode in ((BN, StatMode.BATCH), (IN, StatMode.INSTANCE), (LN, StatMode.LAYER)):
        if not np.any(mix[row]):
            continue
        if row == BN and fixed_bn is not None:
            st = ChannelStats(StatMode.BATCH, np.asarray(fixed_bn[0]), np.asarray(fixed_bn[1]))
            constant.add(row)
        elif mode is StatMode.INSTANCE:
            st = ChannelStats(mode, inst_mean, inst_var)
        else:
            st = _stats_from_instance(inst_mean, inst_var, mode)
        stats[row] = st
        m, v = st.broadcast(n, c)
        mean += mix[row] * m
        var += mix[row] * v

    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv_std
    y = x * scale[:, :, None, None] + (np.asarray(beta) - mean * scale)[:, :, None, None]
    xhat = (x - mean[:, :, None, None]) * inv_std[:, :, None, None]
    cache = NormCache(x, xhat, inv_std, gamma, mix, stats, frozenset(constant))
    cache.aux["batch_moments"] = (inst_mean, inst_var)
    return y, cache


def norm_backward(cache: NormCache, grad_y):
    """Return ``(grad_x, grad_gamma, grad_beta, grad_mix)``; grad_mix is (3, C)."""
    if not isinstance(cache, NormCache):
        raise TypeError("norm_backward needs the cache returned by a training forward")
    gy = np.asarray(grad_y, dtype=DTYPE)
    x = cache.x
    if gy.shape != x.shape:
        raise ShapeError(f"grad_y shape {gy.shape} does not match cached input {x.shape}")
    n, c, h, w = x.shape

    sum_gy = gy.sum(axis=(2, 3))                      # (N, C)
    sum_gy_xhat = (gy * cache.xhat).sum(axis=(2, 3))  # (N, C)
    grad_beta = sum_gy.sum(axis=0)
    grad_gamma = sum_gy_xhat.sum(axis=0)
    inv = cache.inv_std
    # d xhat / d mean = -inv ;  d xhat / d var = -xhat * inv^2 / 2
    g_mean = -cache.gamma * sum_gy * inv
    g_var = -0.5 * cache.gamma * sum_gy_xhat * inv * inv

    # grad_x = gamma * inv * gy + a + b * x   with per-(n, c) coefficients a, b
    a = np.zeros((n, c))
    b = np.zeros((n, c))
    grad_mix = np.zeros((3, c))
    for row, st in cache.stats.items():
        m, v = st.broadcast(n, c)
        grad_mix[row] = (g_mean * m + g_var * v).sum(axis=0)
        if row in cache.constant:
            continue
        gm = cache.mix[row] * g_mean
        gv = cache.mix[row] * g_var
        if st.mode is StatMode.BATCH:
            count = n * h * w
            gm, gv = gm.sum(axis=0, keepdims=True), gv.sum(axis=0, keepdims=True)
        elif st.mode is StatMode.INSTANCE:
            count = h * w
        else:
            count = c * h * w
            gm, gv = gm.sum(axis=1, keepdims=True), gv.sum(axis=1, keepdims=True)
        # d mean/dx = 1/count ; d var/dx = 2 (x - mean) / count
        a += (gm - 2.0 * gv * m) / count
        b += 2.0 * gv / count
    coef = (cache.gamma * inv)[:, :, None, None]
    grad_x = gy * coef + a[:, :, None, None] + b[:, :, None, None] * x
    return grad_x, grad_gamma, grad_beta, grad_mix


def _batch_moments(cache: NormCache):
    st = cache.stats.get(BN)
    if st is None or BN in cache.constant:
        st = _stats_from_instance(*cache.aux["batch_moments"], StatMode.BATCH)
    return st.mean, st.var


def dson_mix(w: float, channels: int) -> np.ndarray:
    mix = np.zeros((3, channels))
    mix[BN] = w
    mix[IN] = 1.0 - w
    return mix


# --------------------------------------------------------------------------
# the domain-specific mixed layer as standalone operations

def dson_forward_train(x, domain: int, params: AffineParams, w: MixtureWeight,
                       cfg: NormConfig, running: RunningStats | None = None):
    """Training forward for one domain's batch.

    Batch and instance statistics are computed from ``x``; ``running`` (if
    given) absorbs the batch statistics.
    """
    x = as_tensor4(x)
    y, cache = norm_forward(x, params.gamma, params.beta, dson_mix(w.w, x.shape[1]), cfg.eps)
    cache.aux.update(domain=domain, w=w.w)
    if running is not None:
        running.update(*_batch_moments(cache))
    return y, cache


def dson_backward(cache: NormCache, grad_y):
    """Gradients w.r.t. input, gamma, beta and the domain's mixture logit."""
    if "w" not in cache.aux:
        raise ValueError("cache was not produced by dson_forward_train")
    gx, gg, gb, gmix = norm_backward(cache, grad_y)
    w = cache.aux["w"]
    grad_w = gmix[BN].sum() - gmix[IN].sum()
    return gx, gg, gb, float(grad_w * w * (1.0 - w))


def dson_forward_eval(x, domain: int, params: AffineParams, w: MixtureWeight,
                      running: RunningStats, cfg: NormConfig) -> np.ndarray:
    """Inference forward: running batch statistics, instance statistics from ``x``."""
    x = as_tensor4(x)
    wv = w.w
    if wv > 0.0 and running.count == 0:
        raise RuntimeError(f"running statistics of domain {domain} were never updated")
    y, _ = norm_forward(x, params.gamma, params.beta, dson_mix(wv, x.shape[1]), cfg.eps,
                        fixed_bn=(running.mean, running.var))
    return y


# --------------------------------------------------------------------------
# variant layers used by the network

class NormLayer:
    """One normalization site of a multi-domain network.

    Holds running statistics.  Affine parameters and mixture logits are passed
    in by the owner so that they can live in a flat parameter dictionary.
    """

    def __init__(self, channels: int, num_domains: int, cfg: NormConfig, first: bool = False):
        self.channels = channels
        self.num_domains = num_domains
        self.cfg = cfg
        self.first = first
        self.domain_specific = cfg.variant in ("dsbn", "dson")
        self.num_sets = num_domains if self.domain_specific else 1
        self.running = [RunningStats.fresh(channels, cfg.momentum) for _ in range(self.num_sets)]
        self.frozen = False

    def set_index(self, domain: int) -> int:
        if not 0 <= domain < self.num_domains:
            raise IndexError(f"domain {domain} out of range for {self.num_domains} domains")
        return domain if self.domain_specific else 0

    def mix(self, logits: np.ndarray, domain: int) -> np.ndarray:
        c, v = self.channels, self.cfg.variant
        mix = np.zeros((3, c))
        if v in ("bn", "dsbn"):
            mix[BN] = 1.0
        elif v == "in":
            mix[IN] = 1.0
        elif v == "ibn":
            mix[BN] = 1.0
            if self.first:
                mix[BN, : c // 2] = 0.0
                mix[IN, : c // 2] = 1.0
        elif v == "dson":
            mix = dson_mix(float(_sigmoid(logits[logit_index(self.cfg, domain)])), c)
        elif v == "sn":
            p = softmax(logits)
            mix[:] = p[:, None]
        return mix

    def logit_grad(self, grad_mix: np.ndarray, logits: np.ndarray, domain: int) -> np.ndarray:
        g = np.zeros_like(logits)
        v = self.cfg.variant
        if v == "dson":
            i = logit_index(self.cfg, domain)
            w = float(_sigmoid(logits[i]))
            g[i] = (grad_mix[BN].sum() - grad_mix[IN].sum()) * w * (1.0 - w)
        elif v == "sn":
            g = softmax_backward(softmax(logits), grad_mix.sum(axis=1))
        return g

    def forward(self, x, domain: int, gamma, beta, logits, train: bool,
                update_running: bool = True):
        """``gamma``/``beta`` are the full (sets, C) arrays; returns (y, cache)."""
        k = self.set_index(domain)
        mix = self.mix(logits, domain)
        fixed = None
        if self.frozen or not train:
            rs = self.running[k]
            if np.any(mix[BN]) and rs.count == 0:
                raise RuntimeError(f"running statistics of domain {domain} were never updated")
            fixed = (rs.mean, rs.var)
        y, cache = norm_forward(x, gamma[k], beta[k], mix, self.cfg.eps, fixed_bn=fixed)
        if train and update_running and not self.frozen:
            self.running[k].update(*_batch_moments(cache))
        cache.aux.update(domain=domain, set=k)
        return y, cache

    def backward(self, cache: NormCache, grad_y, logits):
        gx, gg, gb, gmix = norm_backward(cache, grad_y)
        return gx, gg, gb, self.logit_grad(gmix, logits, cache.aux["domain"])


def logit_shape(cfg: NormConfig, num_domains: int) -> tuple:
    if cfg.variant == "dson":
        return (num_domains if cfg.domain_specific_weights else 1,)
    if cfg.variant == "sn":
        return (3,)
    return (0,)


def logit_index(cfg: NormConfig, domain: int) -> int:
    return domain if cfg.domain_specific_weights else 0


def make_variant_layer(cfg: NormConfig, channels: int, num_domains: int,
                       first: bool = False) -> NormLayer:
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown normalization variant {cfg.variant!r}")
    return NormLayer(channels, num_domains, cfg, first=first)
