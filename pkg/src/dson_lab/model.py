"""Multi-branch classifier with shared convolutions and per-domain normalization.

Layout of one branch::

    conv3x3(in -> 16) -> norm -> relu -> avgpool2x2
    conv3x3(16 -> 32) -> norm -> relu -> avgpool2x2
    global average pool -> linear(32 -> K)

Convolution and classifier weights are a single set shared by every branch.
Normalization layers hold per-domain affine parameters and running statistics
when the variant is domain specific.  Mixture logits are one array for the
whole network, read by both normalization sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .norm import BN, NormConfig, StatMode, compute_stats, logit_shape, make_variant_layer

CONV_NAMES = ("conv1", "conv2")
NORM_NAMES = ("norm1", "norm2")


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "Prediction":
        logits = np.asarray(logits, dtype=T.DTYPE)
        return cls(logits, T.softmax(logits))

    def labels(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


class DomainBranchNet:
    """Tiny two-block convnet with ``num_domains`` normalization branches.

    Parameters live in ``self.params`` (a flat dict of float64 arrays) so the
    optimizer can treat them uniformly.  Running statistics live inside the
    normalization layers.  Initialization: conv weights ~ U(-b, b) with
    b = sqrt(6 / fan_in); classifier weights ~ U(-b, b) with b = 1/sqrt(fan_in)
    and zero bias; gamma = 1, beta = 0, mixture logits = 0.
    """

    def __init__(self, in_channels: int, num_classes: int, num_domains: int,
                 cfg: NormConfig | None = None, widths=(16, 32), seed: int = 0):
        if num_domains < 1:
            raise ValueError("need at least one domain")
        self.cfg = cfg or NormConfig()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.widths = tuple(widths)
        rng = T.make_rng(seed, 0xD50)

        self.params: dict[str, np.ndarray] = {}
        cin = in_channels
        for name, cout in zip(CONV_NAMES, self.widths):
            bound = math.sqrt(6.0 / (cin * 9))
            self.params[f"{name}.w"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            cin = cout
        bound = 1.0 / math.sqrt(cin)
        self.params["fc.w"] = rng.uniform(-bound, bound, (num_classes, cin))
        self.params["fc.b"] = np.zeros(num_classes)

        self.norms = []
        for i, (name, c) in enumerate(zip(NORM_NAMES, self.widths)):
            layer = make_variant_layer(self.cfg, c, num_domains, first=(i == 0))
            self.norms.append(layer)
            self.params[f"{name}.gamma"] = np.ones((layer.num_sets, c))
            self.params[f"{name}.beta"] = np.zeros((layer.num_sets, c))
        self.params["mix.logit"] = np.zeros(logit_shape(self.cfg, num_domains))

    # ------------------------------------------------------------------ state

    @property
    def frozen(self) -> bool:
        return any(layer.frozen for layer in self.norms)

    def trainable_keys(self) -> list[str]:
        keys = [k for k, v in self.params.items() if v.size]
        if self.frozen:
            keys = [k for k in keys if not k.startswith("norm")]
        return keys

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.params.items()}
        for name, layer in zip(NORM_NAMES, self.norms):
            for k, rs in enumerate(layer.running):
                state[f"{name}.running{k}.mean"] = rs.mean.copy()
                state[f"{name}.running{k}.var"] = rs.var.copy()
                state[f"{name}.running{k}.count"] = np.array(rs.count)
        return state

    def load_state_dict(self, state: dict) -> None:
        for k in self.params:
            self.params[k] = np.array(state[k], dtype=T.DTYPE)
        for name, layer in zip(NORM_NAMES, self.norms):
            for k, rs in enumerate(layer.running):
                rs.mean = np.array(state[f"{name}.running{k}.mean"], dtype=T.DTYPE)
                rs.var = np.array(state[f"{name}.running{k}.var"], dtype=T.DTYPE)
                rs.count = int(state[f"{name}.running{k}.count"])

    def bn_weight(self, domain: int) -> float:
        """Average batch-statistic weight that branch ``domain`` applies."""
        total = weight = 0.0
        for layer in self.norms:
            mix = layer.mix(self.params["mix.logit"], domain)
            weight += mix[BN].sum()
            total += layer.channels
        return weight / total

    def in_ratio(self, domain: int) -> float:
        return 1.0 - self.bn_weight(domain)

    # ---------------------------------------------------------------- forward

    def _check_input(self, x) -> np.ndarray:
        x = T.as_tensor4(x)
        if x.shape[1] != self.in_channels:
            raise T.ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return x

    def _check_domain(self, d: int) -> int:
        if not 0 <= int(d) < self.num_domains:
            raise IndexError(f"unknown domain {d}; network has {self.num_domains} branches")
        return int(d)

    def forward(self, xs, domains, train: bool = True, update_running: bool = True):
        """Run several per-domain batches through their branches.

        Convolutions run once on the concatenated batch.  Domain-specific
        normalization sees one domain's segment at a time, so its batch
        statistics never mix domains; variants with a single statistic set
        normalize the pooled batch.  Returns (list of logits per segment, cache).
        """
        xs = [self._check_input(x) for x in xs]
        domains = [self._check_domain(d) for d in domains]
        if len(xs) != len(domains):
            raise ValueError("one domain index per batch is required")
        sizes = [x.shape[0] for x in xs]
        bounds = np.cumsum([0] + sizes)
        p = self.params
        logits_param = p["mix.logit"]
        h = np.concatenate(xs, axis=0)
        blocks = []
        for conv, norm_name, layer in zip(CONV_NAMES, NORM_NAMES, self.norms):
            cols = T.im2col(h)
            a = T.conv2d_forward(h, p[f"{conv}.w"], cols=cols)
            z = np.empty_like(a)
            ncaches = []
            if layer.domain_specific:
                segments = list(zip(domains, bounds[:-1], bounds[1:]))
            else:
                # one statistic set: normalize the pooled multi-domain batch
                segments = [(domains[0], 0, bounds[-1])]
            for d, lo, hi in segments:
                z[lo:hi], nc = layer.forward(a[lo:hi], d, p[f"{norm_name}.gamma"],
                                             p[f"{norm_name}.beta"], logits_param,
                                             train=train, update_running=update_running)
                ncaches.append((nc, lo, hi))
            r = T.relu_forward(z)
            out = T.avgpool2x2_forward(r)
            blocks.append((h, cols, z, ncaches, r.shape))
            h = out
        feat = T.global_avg_pool_forward(h)
        logits = T.linear_forward(feat, p["fc.w"], p["fc.b"])
        cache = dict(blocks=blocks, pooled_shape=h.shape, feat=feat, bounds=bounds,
                     domains=domains)
        return [logits[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])], cache

    def backward(self, cache, grad_logits) -> dict[str, np.ndarray]:
        """Backprop a list of per-segment logit gradients into every parameter."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g = np.concatenate(grad_logits, axis=0)
        gfeat, grads["fc.w"], grads["fc.b"] = T.linear_backward(cache["feat"], p["fc.w"], g)
        gh = T.global_avg_pool_backward(cache["pooled_shape"], gfeat)
        for i in reversed(range(len(self.norms))):
            conv, norm_name, layer = CONV_NAMES[i], NORM_NAMES[i], self.norms[i]
            h_in, cols, z, ncaches, r_shape = cache["blocks"][i]
            gr = T.avgpool2x2_backward(r_shape, gh)
            gz = T.relu_backward(z, gr)
            ga = np.empty_like(gz)
            for nc, lo, hi in ncaches:
                ga[lo:hi], gg, gb, glog = layer.backward(nc, gz[lo:hi], p["mix.logit"])
                k = nc.aux["set"]
                grads[f"{norm_name}.gamma"][k] += gg
                grads[f"{norm_name}.beta"][k] += gb
                grads["mix.logit"] += glog
            gh, grads[f"{conv}.w"], _ = T.conv2d_backward(h_in, p[f"{conv}.w"], ga, cols=cols,
                                                          need_grad_x=i > 0)
        if self.frozen:
            for k in grads:
                if k.startswith("norm"):
                    grads[k][...] = 0.0
        return grads

    def loss_and_grads(self, batches, update_running: bool = True):
        """Summed per-domain cross-entropy and its gradient.

        ``batches`` is a sequence of ``(x, y, domain)``.  Returns
        ``(total_loss, per_domain_losses, grads)``.
        """
        xs = [b[0] for b in batches]
        ys = [np.asarray(b[1]) for b in batches]
        ds = [b[2] for b in batches]
        logits, cache = self.forward(xs, ds, train=True, update_running=update_running)
        losses = [T.cross_entropy(z, y) for z, y in zip(logits, ys)]
        grad_logits = [T.cross_entropy_backward(z, y) for z, y in zip(logits, ys)]
        return float(sum(losses)), losses, self.backward(cache, grad_logits)

    def calibrate(self, xs, domains) -> None:
        """Set running statistics to those of one train-mode pass over ``xs``.

        Parameters are untouched; the moving averages are replaced, not blended.
        """
        was = [layer.frozen for layer in self.norms]
        momenta = [[rs.momentum for rs in layer.running] for layer in self.norms]
        for layer in self.norms:
            layer.frozen = False
            for rs in layer.running:
                rs.momentum = 1.0
        if not any(layer.domain_specific for layer in self.norms):
            # one shared statistic set: calibrate on the pooled sample
            xs, domains = [np.concatenate([self._check_input(x) for x in xs])], [domains[0]]
        try:
            self.forward(xs, domains, train=True, update_running=True)
        finally:
            for layer, f, ms in zip(self.norms, was, momenta):
                layer.frozen = f
                for rs, m in zip(layer.running, ms):
                    rs.momentum = m

    def branch_logits_eval(self, x) -> np.ndarray:
        """Eval-mode logits of every branch, shape (S, N, K)."""
        x = self._check_input(x)
        p = self.params
        a1 = T.conv2d_forward(x, p["conv1.w"])
        out = []
        for d in range(self.num_domains):
            z, _ = self.norms[0].forward(a1, d, p["norm1.gamma"], p["norm1.beta"],
                                         p["mix.logit"], train=False)
            h = T.avgpool2x2_forward(T.relu_forward(z))
            a2 = T.conv2d_forward(h, p["conv2.w"])
            z, _ = self.norms[1].forward(a2, d, p["norm2.gamma"], p["norm2.beta"],
                                         p["mix.logit"], train=False)
            h = T.avgpool2x2_forward(T.relu_forward(z))
            out.append(T.linear_forward(T.global_avg_pool_forward(h), p["fc.w"], p["fc.b"]))
        return np.stack(out)


# --------------------------------------------------------------------------
# functional surface

def branch_forward(net: DomainBranchNet, x, domain: int, mode: str = "eval",
                   update_running: bool = True):
    """Logits ``D(F_s(x))``; train mode also returns the backward cache."""
    if mode == "train":
        logits, cache = net.forward([x], [domain], train=True, update_running=update_running)
        return logits[0], cache
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, _ = net.forward([x], [domain], train=False)
    return logits[0], None


def domain_loss(net: DomainBranchNet, batch, domain: int, update_running: bool = False) -> float:
    x, y = batch
    logits, _ = branch_forward(net, x, domain, "train", update_running=update_running)
    return T.cross_entropy(logits, y)


def total_loss(net: DomainBranchNet, batches, update_running: bool = False) -> float:
    """Unweighted sum of per-domain losses; ``batches[s]`` feeds branch ``s``."""
    if len(batches) != net.num_domains:
        raise ValueError(f"expected {net.num_domains} domain batches, got {len(batches)}")
    loss, _, _ = net.loss_and_grads([(x, y, s) for s, (x, y) in enumerate(batches)],
                                    update_running=update_running)
    return loss


def ensemble_predict(net: DomainBranchNet, x, branches=None) -> Prediction:
    """Softmax of the mean of branch logits (logits, not probabilities)."""
    per = net.branch_logits_eval(x)
    if branches is not None:
        per = per[list(branches)]
    if per.shape[0] == 0:
        raise ValueError("ensemble over zero branches")
    return Prediction.from_logits(per.mean(axis=0))


def leave_one_out_predict(net: DomainBranchNet, x, held_out: int) -> Prediction:
    if net.num_domains < 2:
        raise ValueError("leave-one-domain-out prediction needs at least two branches")
    if not 0 <= held_out < net.num_domains:
        raise IndexError(f"held-out domain {held_out} out of range")
    keep = [s for s in range(net.num_domains) if s != held_out]
    return ensemble_predict(net, x, keep)


PROBE_LAYERS = ("input", "conv1", "conv2")


def dump_features_2ch(net: DomainBranchNet, x, labels, norm_mode: str = "bn",
                      probe: str = "conv1", channels=(0, 1), eps: float = 1e-5):
    """Per-instance spatial means of two channels after plain BN or IN.

    The probe activations are taken from ``probe`` (the raw input or a
    convolution output of branch 0's eval path), normalized with unit gamma
    and zero beta using batch (``bn``) or instance (``in``) statistics of
    ``x`` itself.  Returns rows ``(ch1, ch2, label)``.
    """
    if probe not in PROBE_LAYERS:
        raise ValueError(f"probe layer {probe!r} missing; available: {', '.join(PROBE_LAYERS)}")
    x = net._check_input(x)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise T.ShapeError("one label per instance is required")
    p = net.params
    a = x
    if probe in ("conv1", "conv2"):
        a = T.conv2d_forward(x, p["conv1.w"])
    if probe == "conv2":
        z, _ = net.norms[0].forward(a, 0, p["norm1.gamma"], p["norm1.beta"], p["mix.logit"],
                                    train=True, update_running=False)
        a = T.conv2d_forward(T.avgpool2x2_forward(T.relu_forward(z)), p["conv2.w"])
    if max(channels) >= a.shape[1]:
        raise ValueError(f"probe layer has only {a.shape[1]} channels")
    mode = {"bn": StatMode.BATCH, "in": StatMode.INSTANCE}.get(norm_mode.lower())
    if mode is None:
        raise ValueError(f"norm_mode must be 'bn' or 'in', got {norm_mode!r}")
    st = compute_stats(a, mode)
    m, v = st.broadcast(a.shape[0], a.shape[1])
    normed = (a - m[:, :, None, None]) / np.sqrt(v[:, :, None, None] + eps)
    means = normed.mean(axis=(2, 3))
    c1, c2 = channels
    return [(float(means[i, c1]), float(means[i, c2]), int(labels[i])) for i in range(len(labels))]


def write_feature_table(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ch1,ch2,label\n")
        for a, b, lab in rows:
            fh.write(f"{a!r},{b!r},{lab}\n")


__all__ = [
    "DomainBranchNet", "Prediction", "branch_forward", "domain_loss", "total_loss",
    "ensemble_predict", "leave_one_out_predict", "dump_features_2ch", "write_feature_table",
]
