"""Brute-force references and the gradient-check registry.

The statistics and convolution references are literal loop transcriptions
and import nothing from the modules they check.  Gradient checks compare the
hand-written backward passes with central finite differences of the forward
passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STATS_TOL = 1e-12
CONV_TOL = 1e-12
GRAD_TOL = 1e-5
FD_STEP = 1e-5
# inputs this close to the ReLU kink make central differences meaningless
KINK_MARGIN = 1e-3


def naive_stats(x, mode: str):
    """Two-pass mean / population variance by explicit loops.

    The mean is clamped to [min, max] of its cells, so constant input gives
    a variance of exactly zero.

    Returns ``(mode, mean, var)`` with mean/var nested lists shaped like the
    production statistics: batch (C,), instance (N, C), layer (N,).
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    mode = getattr(mode, "value", mode)

    def reduce(cells):
        total = 0.0
        for v in cells:
            total += v
        mean = min(max(total / len(cells), min(cells)), max(cells))
        sq = 0.0
        for v in cells:
            sq += (v - mean) * (v - mean)
        return mean, sq / len(cells)

    if mode == "batch":
        out = [reduce([float(x[k, ch, i, j]) for k in range(n) for i in range(h) for j in range(w)])
               for ch in range(c)]
    elif mode == "instance":
        out = [[reduce([float(x[k, ch, i, j]) for i in range(h) for j in range(w)])
                for ch in range(c)] for k in range(n)]
    elif mode == "layer":
        out = [reduce([float(x[k, ch, i, j]) for ch in range(c) for i in range(h) for j in range(w)])
               for k in range(n)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    arr = np.array(out, dtype=np.float64)
    return mode, arr[..., 0], arr[..., 1]


def naive_mix(bn_mean, bn_var, in_mean, in_var, w: float):
    n, c = np.shape(in_mean)
    mean = np.zeros((n, c))
    var = np.zeros((n, c))
    for k in range(n):
        for ch in range(c):
            mean[k, ch] = w * bn_mean[ch] + (1.0 - w) * in_mean[k][ch]
            var[k, ch] = w * bn_var[ch] + (1.0 - w) * in_var[k][ch]
    return mean, var


def naive_conv2d(x, weight, bias=None):
    """Six nested loops: batch, out-channel, row, col, in-channel, kernel taps."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, c, h, w = x.shape
    cout = weight.shape[0]
    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ch in range(c):
                        for di in range(3):
                            ii = i + di - 1
                            if ii < 0 or ii >= h:
                                continue
                            for dj in range(3):
                                jj = j + dj - 1
                                if 0 <= jj < w:
                                    acc += x[b, ch, ii, jj] * weight[o, ch, di, dj]
                    out[b, o, i, j] = acc
    return out


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def fd_grad(f, x, h: float = FD_STEP, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; ``index`` limits the entries."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance


@dataclass
class OracleReport:
    seed: int
    checks: list = field(default_factory=list)

    def add(self, name: str, err: float, tol: float) -> None:
        for c in self.checks:
            if c.name == name:
                c.max_error = max(c.max_error, err)
                return
        self.checks.append(CheckResult(name, err, tol))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{'check':<{width}}  {'max_rel_err':>12}  {'tol':>8}  status"]
        for c in self.checks:
            lines.append(f"{c.name:<{width}}  {c.max_error:12.3e}  {c.tolerance:8.0e}  "
                         f"{'PASS' if c.passed else 'FAIL'}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# individual check groups

def check_stats(report: OracleReport, rng: np.random.Generator, count: int = 50) -> None:
    from . import norm

    for _ in range(count):
        shape = tuple(int(v) for v in rng.integers(1, [5, 9, 9, 9]))
        x = rng.normal(rng.normal(0, 3), rng.uniform(0.1, 3), shape)
        for mode in ("batch", "instance", "layer"):
            _, m, v = naive_stats(x, mode)
            st = norm.compute_stats(x, mode)
            report.add(f"stats_{mode}", max(rel_err(st.mean, m, 1e-12),
                                             rel_err(st.var, v, 1e-12)), STATS_TOL)
        _, bm, bv = naive_stats(x, "batch")
        _, im, iv = naive_stats(x, "instance")
        w = float(rng.uniform())
        ref_m, ref_v = naive_mix(bm, bv, im, iv, w)
        mixed = norm.mix_stats(norm.compute_stats(x, "batch"), norm.compute_stats(x, "instance"), w)
        report.add("mix_stats", max(rel_err(mixed.mean, ref_m, 1e-12),
                                    rel_err(mixed.var, ref_v, 1e-12)), STATS_TOL)


def check_conv(report: OracleReport, rng: np.random.Generator, count: int = 50) -> None:
    from . import tensor

    for k in range(count):
        if k == 0:
            shape, cout = (4, 8, 8, 8), 4
        else:
            shape = tuple(int(v) for v in rng.integers(1, [5, 5, 9, 9]))
            cout = int(rng.integers(1, 5))
        x = rng.normal(size=shape)
        wt = rng.normal(size=(cout, shape[1], 3, 3))
        b = rng.normal(size=cout)
        # error relative to sum |x w| + |b|, the conditioning of each output sum
        scale = naive_conv2d(np.abs(x), np.abs(wt), np.abs(b))
        diff = np.abs(tensor.conv2d_forward(x, wt, b) - naive_conv2d(x, wt, b))
        report.add("conv2d_forward", float(np.max(diff / scale)), CONV_TOL)


def _probe(fn, g):
    return lambda z: float(np.sum(fn(z) * g))


def check_layer_grads(report: OracleReport, rng: np.random.Generator, configs: int = 20) -> None:
    from . import norm, tensor as T

    ws = (0.01, 0.5, 0.99)
    for k in range(configs):
        n, c, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 4, 4
        cout = int(rng.integers(1, 4))
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(cout, c, 3, 3))
        b = rng.normal(size=cout)
        g = rng.normal(size=(n, cout, h, w))
        gx, gw, gb = T.conv2d_backward(x, wt, g)
        err = max(rel_err(gx.ravel(), fd_grad(_probe(lambda z: T.conv2d_forward(z, wt, b), g), x)),
                  rel_err(gw.ravel(), fd_grad(_probe(lambda z: T.conv2d_forward(x, z, b), g), wt)),
                  rel_err(gb, fd_grad(_probe(lambda z: T.conv2d_forward(x, wt, z), g), b)))
        report.add("conv2d_backward", err, GRAD_TOL)

        # keep relu inputs away from the kink
        xr = rng.normal(size=(n, c, h, w))
        xr = np.where(np.abs(xr) < 1e-3, 0.5, xr)
        gr = rng.normal(size=xr.shape)
        report.add("relu_backward", rel_err(T.relu_backward(xr, gr).ravel(),
                                            fd_grad(_probe(T.relu_forward, gr), xr)), GRAD_TOL)
        gp = rng.normal(size=(n, c, h // 2, w // 2))
        report.add("avgpool2x2_backward",
                   rel_err(T.avgpool2x2_backward(x.shape, gp).ravel(),
                           fd_grad(_probe(T.avgpool2x2_forward, gp), x)), GRAD_TOL)
        gg = rng.normal(size=(n, c))
        report.add("global_avg_pool_backward",
                   rel_err(T.global_avg_pool_backward(x.shape, gg).ravel(),
                           fd_grad(_probe(T.global_avg_pool_forward, gg), x)), GRAD_TOL)

        kcls = int(rng.integers(2, 6))
        feat = rng.normal(size=(n, c))
        lw, lb = rng.normal(size=(kcls, c)), rng.normal(size=kcls)
        gl = rng.normal(size=(n, kcls))
        dx, dw, db = T.linear_backward(feat, lw, gl)
        err = max(rel_err(dx.ravel(), fd_grad(_probe(lambda z: T.linear_forward(z, lw, lb), gl), feat)),
                  rel_err(dw.ravel(), fd_grad(_probe(lambda z: T.linear_forward(feat, z, lb), gl), lw)),
                  rel_err(db, fd_grad(_probe(lambda z: T.linear_forward(feat, lw, z), gl), lb)))
        report.add("linear_backward", err, GRAD_TOL)

        logits = rng.normal(size=(n, kcls)) * 2
        probs = T.softmax(logits)
        report.add("softmax_backward",
                   rel_err(T.softmax_backward(probs, gl).ravel(),
                           fd_grad(_probe(T.softmax, gl), logits)), GRAD_TOL)
        labels = rng.integers(0, kcls, n)
        report.add("cross_entropy_backward",
                   rel_err(T.cross_entropy_backward(logits, labels).ravel(),
                           fd_grad(lambda z: T.cross_entropy(z, labels), logits)), GRAD_TOL)

        # domain-specific mixed normalization, all four gradients
        wv = ws[k % len(ws)]
        rho = math.log(wv / (1.0 - wv))
        # per-instance style so batch and instance statistics genuinely differ
        xn = (rng.uniform(0.5, 2, (2, 3, 1, 1)) * rng.normal(size=(2, 3, 4, 4))
              + rng.normal(0, 2, (2, 3, 1, 1)))
        gam, bet = rng.normal(1, 0.3, 3), rng.normal(0, 0.3, 3)
        gy = rng.normal(size=xn.shape)
        cfg = norm.NormConfig()

        def out(xv, gv, bv, r):
            y, _ = norm.dson_forward_train(xv, 0, norm.AffineParams(gv, bv),
                                           norm.MixtureWeight(r), cfg)
            return float(np.sum(y * gy))

        _, cache = norm.dson_forward_train(xn, 0, norm.AffineParams(gam, bet),
                                           norm.MixtureWeight(rho), cfg)
        dx, dg, dbeta, drho = norm.dson_backward(cache, gy)
        err = max(rel_err(dx.ravel(), fd_grad(lambda z: out(z, gam, bet, rho), xn)),
                  rel_err(dg, fd_grad(lambda z: out(xn, z, bet, rho), gam)),
                  rel_err(dbeta, fd_grad(lambda z: out(xn, gam, z, rho), bet)),
                  rel_err([drho], fd_grad(lambda z: out(xn, gam, bet, float(z[0])), [rho])))
        report.add("dson_backward", err, GRAD_TOL)


def network_grad_errors(net, batches, rng: np.random.Generator, per_tensor: int = 48,
                        h: float = FD_STEP) -> dict:
    """Max relative error per parameter tensor of the summed-domain loss.

    Small tensors are checked entirely, large ones on ``per_tensor`` random
    entries.  Entries smaller than the finite-difference roundoff allows to
    resolve are measured against that floor.  Running statistics are left
    untouched.
    """
    loss, _, grads = net.loss_and_grads(batches, update_running=False)
    # central differences cannot resolve entries below eps*|L|/h to GRAD_TOL
    floor = max(1e-8, np.finfo(float).eps * abs(loss) / h / GRAD_TOL)
    errors = {}
    for key, value in net.params.items():
        if value.size == 0:
            continue
        n = value.size
        index = list(range(n)) if n <= per_tensor else sorted(
            rng.choice(n, per_tensor, replace=False).tolist())
        original = value.copy()

        def f(v, key=key):
            net.params[key] = v
            return net.loss_and_grads(batches, update_running=False)[0]

        numeric = fd_grad(f, original, h, index)
        net.params[key] = original
        errors[key] = rel_err(grads[key].reshape(-1)[index], numeric, floor)
    return errors


def relu_margin(net, batches) -> float:
    """Smallest |ReLU input| of a training forward pass (running stats untouched)."""
    _, cache = net.forward([b[0] for b in batches], [b[2] for b in batches],
                           update_running=False)
    return min(float(np.abs(block[2]).min()) for block in cache["blocks"])


GROUPS = {"conv": ("conv1.w", "conv2.w"), "fc": ("fc.w", "fc.b"),
          "gamma": ("norm1.gamma", "norm2.gamma"), "beta": ("norm1.beta", "norm2.beta"),
          "logit": ("mix.logit",)}


def check_network_grads(report: OracleReport, rng: np.random.Generator, configs: int = 21,
                        variant: str = "dson") -> None:
    from .model import DomainBranchNet
    from .norm import NormConfig

    ws = (0.01, 0.5, 0.99)
    for k in range(configs):
        net = DomainBranchNet(3, 5, 2, NormConfig(variant=variant), seed=int(rng.integers(2**31)))
        wv = ws[k % len(ws)]
        logits = net.params["mix.logit"]
        if variant == "dson":
            logits[:] = math.log(wv / (1.0 - wv)) + rng.normal(0, 0.05, logits.shape)
        elif logits.size:
            logits[:] = rng.normal(0, 1, logits.shape)
        for name in ("norm1", "norm2"):
            net.params[f"{name}.gamma"] += rng.normal(0, 0.2, net.params[f"{name}.gamma"].shape)
            net.params[f"{name}.beta"] += rng.normal(0, 0.2, net.params[f"{name}.beta"].shape)
        while True:
            batches = [(rng.normal(rng.normal(0, 1), rng.uniform(0.5, 2), (2, 3, 4, 4)),
                        rng.integers(0, 5, 2), d) for d in range(2)]
            if relu_margin(net, batches) > KINK_MARGIN:
                break
        errs = network_grad_errors(net, batches, rng)
        for group, keys in GROUPS.items():
            vals = [errs[key] for key in keys if key in errs]
            if vals:
                report.add(f"network_{variant}_{group}", max(vals), GRAD_TOL)


def run_all_checks(seed: int = 0, stats_count: int = 50, grad_configs: int = 21,
                   variants=("dson",)) -> OracleReport:
    rng = np.random.default_rng(seed)
    report = OracleReport(seed)
    check_stats(report, rng, stats_count)
    check_conv(report, rng, stats_count)
    check_layer_grads(report, rng, grad_configs)
    for v in variants:
        check_network_grads(report, rng, grad_configs, v)
    return report
