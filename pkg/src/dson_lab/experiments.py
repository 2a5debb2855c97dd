"""Experiment cells and sweeps behind the command-line interface.

A *cell* is one training run: (variant, source domains, seed, hyper-
parameters).  Each cell writes its files into its own directory under the
output root; a cell whose ``cell.cfg`` matches the requested one is reused
instead of retrained.  Reports never contain timestamps, so reruns are
byte-identical.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .config import ExperimentConfig
from .model import DomainBranchNet
from .norm import NormConfig
from .optim import (LrSchedule, NoiseConfig, SgdState, evaluate, freeze_bn_mode, loo_validation,
                    train)
from .tensor import make_rng

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("bn", "in", "ibn", "dsbn", "sn", "dson", "dson-agnostic")
CALIBRATION_SAMPLES = 128


class MissingDataError(FileNotFoundError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


def data_dir(out) -> Path:
    return Path(out) / "data"


# --------------------------------------------------------------------------
# data

def preset_for(cfg: ExperimentConfig):
    spec, domains = sd.default_four_domain_preset(cfg.data_seed)
    spec.num_classes = cfg.num_classes
    known = {d.domain_id: d for d in domains}
    missing = [d for d in cfg.domains if d not in known]
    if missing:
        raise ValueError(f"the preset defines domains 0-3; no style for {missing}")
    return spec, [known[d] for d in cfg.domains]


def gen_data(cfg: ExperimentConfig) -> list[Path]:
    spec, domains = preset_for(cfg)
    root = data_dir(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for (domain, split), ds in sorted(sd.generate(spec, domains).items()):
        path = root / sd.dataset_filename(domain, split)
        sd.save(ds, path)
        written.append(path)
    return written


def load_split(out, domain: int, split: str) -> sd.DomainDataset:
    path = data_dir(out) / sd.dataset_filename(domain, split)
    if not path.exists():
        raise MissingDataError(f"dataset file {path} not found; run gen-data first")
    return sd.load(path)


# --------------------------------------------------------------------------
# cells

@dataclass(frozen=True)
class Cell:
    variant: str
    sources: tuple
    seed: int
    iters: int = 1000
    batch_size: int = 16
    eta0: float = 0.02
    alpha: float = 10.0
    decay_beta: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0
    noise: float = 0.0
    freeze_bn: bool = False
    val_every: int = 100
    eval_domains: tuple = ()

    @property
    def norm_config(self) -> NormConfig:
        if self.variant == "dson-agnostic":
            return NormConfig(variant="dson", domain_specific_weights=False)
        return NormConfig(variant=self.variant)

    def label(self) -> str:
        parts = [self.variant]
        if self.noise:
            parts.append(f"noise{self.noise:g}")
        if self.freeze_bn:
            parts.append("frozen")
        return "_".join(parts)

    def path(self, out) -> Path:
        src = "".join(str(s) for s in self.sources)
        return Path(out) / "cells" / self.label() / f"src{src}" / f"seed{self.seed}"

    def text(self) -> str:
        fields = self.__dataclass_fields__
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in fields)


def cell_from_config(cfg: ExperimentConfig, variant: str, sources, seed: int,
                     eval_domains=()) -> Cell:
    dsw_variant = variant
    if variant == "dson" and not cfg.domain_specific_weights:
        dsw_variant = "dson-agnostic"
    return Cell(dsw_variant, tuple(sources), int(seed), cfg.iters, cfg.batch_size, cfg.eta0,
                cfg.alpha, cfg.decay_beta, cfg.momentum, cfg.weight_decay, cfg.noise,
                cfg.freeze_bn, cfg.val_every, tuple(eval_domains))


@dataclass
class CellResult:
    cell: Cell
    accuracy: dict = field(default_factory=dict)        # domain -> ensemble accuracy
    branch_accuracy: dict = field(default_factory=dict)  # (domain, branch) -> accuracy
    in_ratio: dict = field(default_factory=dict)        # source domain -> 1 - w
    best_iter: int | None = None
    best_val: float | None = None


def _final_lines(res: CellResult) -> dict:
    c = res.cell
    out = {"variant": c.variant, "sources": ",".join(map(str, c.sources)), "seed": c.seed,
           "best_iter": res.best_iter, "best_val": res.best_val}
    for d, a in res.accuracy.items():
        out[f"acc_d{d}"] = a
    for (d, s), a in res.branch_accuracy.items():
        out[f"acc_d{d}_branch{s}"] = a
    for d, r in res.in_ratio.items():
        out[f"in_ratio_d{d}"] = r
    return out


def _parse_final(text: str, cell: Cell) -> CellResult:
    res = CellResult(cell)
    for line in text.splitlines():
        key, _, raw = (s.strip() for s in line.partition("="))
        if key == "best_iter":
            res.best_iter = None if raw == "None" else int(raw)
        elif key == "best_val":
            res.best_val = None if raw == "None" else float(raw)
        elif key.startswith("acc_d") and "_branch" in key:
            d, s = key[5:].split("_branch")
            res.branch_accuracy[(int(d), int(s))] = float(raw)
        elif key.startswith("acc_d"):
            res.accuracy[int(key[5:])] = float(raw)
        elif key.startswith("in_ratio_d"):
            res.in_ratio[int(key[10:])] = float(raw)
    return res


def load_cell(cell: Cell, out) -> CellResult | None:
    """Cached result of ``cell`` or None when absent or stale."""
    path = cell.path(out)
    try:
        if (path / "cell.cfg").read_text() != cell.text():
            return None
        return _parse_final((path / "final.txt").read_text(), cell)
    except FileNotFoundError:
        return None


def build_net(cell: Cell, in_channels: int, num_classes: int) -> DomainBranchNet:
    return DomainBranchNet(in_channels, num_classes, len(cell.sources), cell.norm_config,
                           seed=cell.seed)


def run_cell(cell: Cell, out, reuse: bool = True) -> CellResult:
    """Train one cell, evaluate it and write its report files."""
    if reuse:
        cached = load_cell(cell, out)
        if cached is not None:
            return cached
    started = time.perf_counter()
    train_sets = [load_split(out, d, "train") for d in cell.sources]
    val_sets = [load_split(out, d, "test") for d in cell.sources]
    first = train_sets[0]
    net = build_net(cell, first.images.shape[1], first.num_classes)
    if cell.freeze_bn:
        rng = make_rng(cell.seed, 5)
        xs = [ds.images[rng.permutation(len(ds))[:CALIBRATION_SAMPLES]] for ds in train_sets]
        net.calibrate(xs, list(range(len(xs))))
        freeze_bn_mode(net, True)
    schedule = LrSchedule(cell.eta0, cell.alpha, cell.decay_beta, max(cell.iters, 1))
    report = train(net, train_sets, schedule, SgdState(cell.momentum, cell.weight_decay),
                   NoiseConfig(cell.noise, cell.seed), cell.iters, cell.batch_size, cell.seed,
                   val_every=cell.val_every, val_sets=val_sets)

    res = CellResult(cell, best_iter=report.best_iter)
    if len(cell.sources) >= 2:
        res.best_val = loo_validation(net, val_sets)
    for d in cell.eval_domains:
        ds = load_split(out, d, "test")
        res.accuracy[d] = evaluate(net, ds)
        for s in range(len(cell.sources)):
            res.branch_accuracy[(d, s)] = evaluate(net, ds, "single_branch", s)
    for s, d in enumerate(cell.sources):
        res.in_ratio[d] = float(net.in_ratio(s))
    report.final = _final_lines(res)

    path = cell.path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "log.csv").write_text(report.csv())
    (path / "validation.csv").write_text(
        "iter,loo_acc\n" + "".join(f"{i},{a!r}\n" for i, a in report.validation))
    np.savez(path / "checkpoint.npz", **net.state_dict())
    (path / "final.txt").write_text(report.final_text())
    # wall time lives apart from the reports so those stay byte-identical
    (path / "timing.txt").write_text(f"{time.perf_counter() - started:.3f}\n")
    (path / "cell.cfg").write_text(cell.text())
    return res


def cell_seconds(cell: Cell, out) -> float | None:
    try:
        return float((cell.path(out) / "timing.txt").read_text())
    except FileNotFoundError:
        return None


def load_checkpoint(cell: Cell, out) -> DomainBranchNet:
    path = cell.path(out) / "checkpoint.npz"
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint {path} not found")
    with np.load(path) as state:
        logits = state["mix.logit"]
        cin = state["conv1.w"].shape[1]
        k = state["fc.b"].shape[0]
        net = build_net(cell, cin, k)
        if logits.shape != net.params["mix.logit"].shape:
            raise ValueError(f"checkpoint {path} does not match variant {cell.variant}")
        net.load_state_dict(dict(state))
    return net


def _run_safe(args):
    cell, out, reuse = args
    try:
        return run_cell(cell, out, reuse)
    except Exception as exc:  # reported by the caller, keeps the sweep alive
        log.error("cell %s failed: %s", cell.path(out), exc)
        return exc


def run_cells(cells, out, jobs: int = 1, reuse: bool = True):
    """Results in input order; failed cells are returned as exceptions."""
    args = [(c, out, reuse) for c in cells]
    if jobs <= 1 or len(cells) <= 1:
        return [_run_safe(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_safe, args))


# --------------------------------------------------------------------------
# tables

def mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _pad(row, n):
    return list(map(str, row)) + [""] * (n - len(row))


def aligned(rows, header) -> str:
    table = [_pad(r, len(header)) for r in [header, *rows]]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in
                       enumerate(zip(r, widths))) for r in table]
    return "\n".join(lines) + "\n"


def csv_text(rows, header) -> str:
    return "\n".join(",".join(_pad(r, len(header))) for r in [header, *rows]) + "\n"


def write_table(out, stem: str, rows, header, text_rows=None) -> None:
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / f"{stem}.txt").write_text(aligned(text_rows or rows, header))
    (Path(out) / f"{stem}.csv").write_text(csv_text(rows, header))


# --------------------------------------------------------------------------
# sweeps

def _errors(results):
    return [r for r in results if isinstance(r, Exception)]


def train_sweep(cfg: ExperimentConfig, variant: str | None = None, reuse: bool = True):
    """Leave-one-target-out cells for every target and seed."""
    variant = variant or cfg.variant
    cells = [cell_from_config(cfg, variant, cfg.sources(t), s, (t,))
             for t in cfg.targets() for s in cfg.seeds]
    return cells, run_cells(cells, cfg.out, cfg.jobs, reuse)


def train_summary(cfg: ExperimentConfig, cells, results) -> tuple[list, list]:
    header = ["target", "seed", "sources", "ensemble_acc"] + \
        [f"branch{i}_acc" for i in range(len(cfg.domains) - 1)] + ["best_iter"]
    rows = []
    for cell, res in zip(cells, results):
        t = cell.eval_domains[0]
        if isinstance(res, Exception):
            rows.append([t, cell.seed, "".join(map(str, cell.sources)), "error"])
            continue
        branches = [f"{res.branch_accuracy[(t, s)]:.4f}" for s in range(len(cell.sources))]
        rows.append([t, cell.seed, "".join(map(str, cell.sources)),
                     f"{res.accuracy[t]:.4f}", *branches, res.best_iter])
    return rows, header


def ablation(cfg: ExperimentConfig, variants=ABLATION_VARIANTS, reuse: bool = True):
    """Rows ``variant, mean±sd per target, average`` plus the raw results."""
    targets = cfg.targets()
    cells = [cell_from_config(cfg, v, cfg.sources(t), s, (t,))
             for v in variants for t in targets for s in cfg.seeds]
    results = run_cells(cells, cfg.out, cfg.jobs, reuse)
    by_key = {(c.variant, c.eval_domains[0], c.seed): r for c, r in zip(cells, results)}
    text_rows, csv_rows = [], []
    for v in variants:
        text, csvr = [v], [v]
        per_seed_avg = []
        for t in targets:
            accs = [by_key[(v, t, s)] for s in cfg.seeds]
            ok = [100 * r.accuracy[t] for r in accs if not isinstance(r, Exception)]
            m, sdev = mean_sd(ok)
            text.append(f"{m:.2f}±{sdev:.2f}")
            csvr += [f"{m:.4f}", f"{sdev:.4f}"]
        for s in cfg.seeds:
            accs = [by_key[(v, t, s)] for t in targets]
            if not any(isinstance(r, Exception) for r in accs):
                per_seed_avg.append(np.mean([100 * r.accuracy[t] for r, t in zip(accs, targets)]))
        m, sdev = mean_sd(per_seed_avg)
        text.append(f"{m:.2f}±{sdev:.2f}")
        csvr += [f"{m:.4f}", f"{sdev:.4f}"]
        text_rows.append(text)
        csv_rows.append(csvr)
    text_header = ["variant"] + [f"target{t}" for t in targets] + ["avg"]
    csv_header = ["variant"] + [f"{name}_{k}" for name in text_header[1:] for k in ("mean", "sd")]
    return text_rows, text_header, csv_rows, csv_header, _errors(results)


def single_source_cells(cfg: ExperimentConfig, variant: str):
    return [cell_from_config(cfg.replace(freeze_bn=False), variant, (d,), s, tuple(cfg.domains))
            for d in cfg.domains for s in cfg.seeds]


def single_source_matrix(cfg: ExperimentConfig, reuse: bool = True):
    """BN accuracy matrix (%) and DSON minus BN delta (points), rows = source."""
    doms = cfg.domains
    mats = {}
    errors = []
    for v in ("bn", "dson"):
        cells = single_source_cells(cfg, v)
        results = run_cells(cells, cfg.out, cfg.jobs, reuse)
        errors += _errors(results)
        m = np.full((len(doms), len(doms)), np.nan)
        for i, d in enumerate(doms):
            for j, t in enumerate(doms):
                accs = [r.accuracy[t] for c, r in zip(cells, results)
                        if c.sources == (d,) and not isinstance(r, Exception)]
                if accs:
                    m[i, j] = 100 * float(np.mean(accs))
        mats[v] = m
    return mats["bn"], mats["dson"] - mats["bn"], errors


def weights_report(cfg: ExperimentConfig, run_missing: bool = False):
    """IN ratio per domain and seed for multi-source and single-source DSON.

    The multi-source value of a domain is averaged over every leave-one-out
    run in which it is a source.  Returns rows ``(domain, seed, single,
    multi)`` built from stored checkpoints.
    """
    base = cfg.replace(freeze_bn=False, domain_specific_weights=True)
    multi = [cell_from_config(base, "dson", base.sources(t), s, (t,))
             for t in base.domains for s in cfg.seeds]
    single = single_source_cells(base, "dson")
    if run_missing:
        errors = _errors(run_cells(multi + single, cfg.out, cfg.jobs, reuse=True))
        if errors:
            raise errors[0]
    ratios = {}
    for cell in multi + single:
        net = load_checkpoint(cell, cfg.out)
        kind = "single" if len(cell.sources) == 1 else "multi"
        for s, d in enumerate(cell.sources):
            ratios.setdefault((kind, d, cell.seed), []).append(net.in_ratio(s))
    rows = []
    for d in base.domains:
        for s in cfg.seeds:
            rows.append((d, s, float(np.mean(ratios[("single", d, s)])),
                         float(np.mean(ratios[("multi", d, s)]))))
    return rows
