"""SGD with momentum, the annealed learning rate, and the multi-domain trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import DomainBranchNet, branch_forward, ensemble_predict, leave_one_out_predict
from .synthdata import DomainDataset
from .tensor import make_rng

log = logging.getLogger(__name__)


@dataclass
class LrSchedule:
    """``eta0 / (1 + alpha * p) ** decay_beta`` with ``p = t / total_iters``."""

    eta0: float = 0.02
    alpha: float = 10.0
    decay_beta: float = 0.75
    total_iters: int = 1000


def lr_at(schedule: LrSchedule, t: int) -> float:
    if schedule.total_iters <= 0:
        raise ValueError("schedule needs total_iters > 0")
    if not 0 <= t <= schedule.total_iters:
        raise ValueError(f"iteration {t} outside [0, {schedule.total_iters}]")
    p = t / schedule.total_iters
    return schedule.eta0 / (1.0 + schedule.alpha * p) ** schedule.decay_beta


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState, rate: float, keys=None) -> dict:
    """Classic momentum: ``v = m * v + g; theta -= rate * v`` (in place)."""
    for k in (keys if keys is not None else grads):
        p, g = params[k], grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {k!r} has shape {v.shape}, parameter {p.shape}")
        v = state.momentum * v + g
        state.velocity[k] = v
        p -= rate * v
    return params


@dataclass
class NoiseConfig:
    level: float = 0.0
    seed: int = 0


def inject_label_noise(labels, cfg: NoiseConfig, num_classes: int, stream: int = 0) -> np.ndarray:
    """Flip each label with probability ``level`` to a uniformly chosen other class."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= cfg.level <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {cfg.level}")
    if cfg.level == 0.0:
        return labels.copy()
    if num_classes < 2:
        raise ValueError("label noise needs at least two classes")
    rng = make_rng(cfg.seed, 3, stream)
    flip = rng.random(labels.shape) < cfg.level
    shift = rng.integers(1, num_classes, labels.shape)
    return np.where(flip, (labels + shift) % num_classes, labels)


class BatchSampler:
    """Endless shuffled index stream; reshuffles and wraps at epoch ends.

    A batch larger than the dataset simply spans several reshuffled epochs.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
        return np.concatenate(out)


@dataclass
class TrainReport:
    num_domains: int
    records: list = field(default_factory=list)      # (iter, eta, total, [loss_d], [w_d])
    validation: list = field(default_factory=list)   # (iter, loo accuracy)
    best_iter: int | None = None
    final: dict = field(default_factory=dict)

    def csv(self) -> str:
        d = range(self.num_domains)
        head = ["iter", "eta", "loss_total"] + [f"loss_d{i}" for i in d] + [f"w_d{i}" for i in d]
        lines = [",".join(head)]
        for it, eta, total, losses, ws in self.records:
            vals = [str(it), _fmt(eta), _fmt(total)] + [_fmt(v) for v in losses]
            lines.append(",".join(vals + [_fmt(v) for v in ws]))
        return "\n".join(lines) + "\n"

    def final_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.final.items())


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def freeze_bn_mode(net: DomainBranchNet, frozen: bool = True) -> DomainBranchNet:
    """Fix normalization statistics and exclude gamma / beta from optimization."""
    for layer in net.norms:
        layer.frozen = frozen
    return net


def evaluate(net: DomainBranchNet, dataset: DomainDataset, rule: str = "ensemble",
             domain: int | None = None, chunk: int = 256) -> float:
    """Top-1 accuracy under ``rule`` in {"ensemble", "leave_one_out", "single_branch"}."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if rule != "ensemble" and domain is None:
        raise ValueError(f"rule {rule!r} needs a domain index")
    correct = 0
    for lo in range(0, len(dataset), chunk):
        x = dataset.images[lo:lo + chunk]
        if rule == "ensemble":
            pred = ensemble_predict(net, x).labels()
        elif rule == "leave_one_out":
            pred = leave_one_out_predict(net, x, domain).labels()
        elif rule == "single_branch":
            pred = np.argmax(branch_forward(net, x, domain, "eval")[0], axis=1)
        else:
            raise ValueError(f"unknown evaluation rule {rule!r}")
        correct += int((pred == dataset.labels[lo:lo + chunk]).sum())
    return correct / len(dataset)


def loo_validation(net: DomainBranchNet, val_sets) -> float:
    """Mean over source domains of leave-one-domain-out accuracy."""
    accs = [evaluate(net, ds, "leave_one_out", s) for s, ds in enumerate(val_sets)]
    return float(np.mean(accs))


def train(net: DomainBranchNet, datasets, schedule: LrSchedule | None = None,
          sgd: SgdState | None = None, noise: NoiseConfig | None = None,
          iters: int | None = None, batch_size: int = 16, seed: int = 0,
          log_every: int = 10, val_every: int = 100, val_sets=None,
          select_best: bool = True) -> TrainReport:
    """Joint training on one batch per source domain per iteration.

    ``datasets[s]`` trains branch ``s``.  With ``val_sets`` (one per source)
    and at least two sources, leave-one-domain-out accuracy is measured every
    ``val_every`` iterations and at the end; the best checkpoint is restored
    when ``select_best`` is set.
    """
    if not datasets:
        raise ValueError("need at least one source domain")
    if len(datasets) != net.num_domains:
        raise ValueError(f"network has {net.num_domains} branches but got {len(datasets)} datasets")
    schedule = schedule or LrSchedule()
    sgd = sgd or SgdState()
    iters = schedule.total_iters if iters is None else iters
    for ds in datasets:
        if len(ds) == 0:
            raise ValueError(f"empty training set for domain {ds.domain}")

    labels = [ds.labels for ds in datasets]
    if noise is not None and noise.level > 0:
        labels = [inject_label_noise(y, noise, ds.num_classes, stream=s)
                  for s, (y, ds) in enumerate(zip(labels, datasets))]
    samplers = [BatchSampler(len(ds), batch_size, make_rng(seed, 4, s))
                for s, ds in enumerate(datasets)]
    report = TrainReport(net.num_domains)
    keys = net.trainable_keys()
    validate = val_sets is not None and net.num_domains >= 2 and val_every > 0
    best_acc, best_state = -1.0, None

    for t in range(iters):
        batches = []
        for s, (ds, sampler) in enumerate(zip(datasets, samplers)):
            idx = sampler.next()
            batches.append((ds.images[idx], labels[s][idx], s))
        total, losses, grads = net.loss_and_grads(batches)
        eta = lr_at(schedule, min(t, schedule.total_iters))
        sgd_step(net.params, grads, sgd, eta, keys)
        step = t + 1
        if log_every > 0 and step % log_every == 0:
            ws = [net.bn_weight(s) for s in range(net.num_domains)]
            report.records.append((step, eta, total, list(losses), ws))
        if validate and (step % val_every == 0 or step == iters):
            acc = loo_validation(net, val_sets)
            report.validation.append((step, acc))
            log.debug("iter %d loo-acc %.4f", step, acc)
            if acc > best_acc:
                best_acc, best_state, report.best_iter = acc, net.state_dict(), step
    if validate and select_best and best_state is not None:
        net.load_state_dict(best_state)
    elif iters:
        report.best_iter = iters
    return report
