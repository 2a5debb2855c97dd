"""Command-line driver: ``dson-lab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config, parse_int_list, serialize_config
from .model import PROBE_LAYERS, dump_features_2ch, write_feature_table
from .oracle import run_all_checks

log = logging.getLogger("dson_lab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="single seed (overrides the config's seeds)")
    p.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0..4")
    p.add_argument("--out", help="output directory (default: $DSON_LAB_OUT or ./dson_out)")
    p.add_argument("--variant", help="normalization variant")
    p.add_argument("--noise", type=float, help="label noise level in [0, 1]")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--target", help="target domain id or 'all'")
    p.add_argument("--freeze-bn", action="store_true", default=None,
                   help="calibrate and freeze normalization statistics and affine parameters")
    p.add_argument("--domain-agnostic", action="store_true",
                   help="one mixture weight shared by all domains")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dson-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="write the synthetic domain datasets"))
    _common(sub.add_parser("train", help="leave-one-target-out training runs"))
    _common(sub.add_parser("ablate", help="compare all normalization variants"))
    p = sub.add_parser("weights-report", help="IN ratio, single- vs multi-source")
    _common(p)
    p.add_argument("--run-missing", action="store_true", help="train cells that are missing")
    _common(sub.add_parser("single-source-matrix", help="train on one domain, test on all"))
    p = sub.add_parser("grad-check", help="oracle and finite-difference checks")
    _common(p)
    p = sub.add_parser("dump-features", help="two-channel feature table for scatter plots")
    _common(p)
    p.add_argument("--domain", type=int, default=0, help="domain whose test split is probed")
    p.add_argument("--layer", default="conv1", help=f"probe layer ({', '.join(PROBE_LAYERS)})")
    p.add_argument("--norm", default="bn", choices=("bn", "in"))
    p.add_argument("--channels", default="0,1", help="two channel indices")
    p.add_argument("--checkpoint-target", type=int,
                   help="use the trained model of this target (default: untrained network)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out is not None:
        changes["out"] = args.out
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.noise is not None:
        changes["noise"] = args.noise
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    if args.iters is not None:
        changes["iters"] = args.iters
    if args.target is not None:
        changes["target"] = args.target
    if args.seeds is not None:
        changes["seeds"] = parse_int_list(args.seeds)
    if args.seed is not None:
        changes["seeds"] = [args.seed]
        changes["data_seed"] = args.seed if args.command == "gen-data" else cfg.data_seed
    if args.freeze_bn:
        changes["freeze_bn"] = True
    if args.domain_agnostic:
        changes["domain_specific_weights"] = False
    return cfg.replace(**changes)


def _report_errors(errors) -> int:
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if errors else 0


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    for path in ex.gen_data(cfg):
        print(path)
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    cells, results = ex.train_sweep(cfg)
    rows, header = ex.train_summary(cfg, cells, results)
    label = cells[0].label()
    ex.write_table(Path(cfg.out) / "reports", f"train_{label}", rows, header)
    print(ex.aligned(rows, header), end="")
    ok = [r for r in results if not isinstance(r, Exception)]
    if ok:
        accs = [r.accuracy[c.eval_domains[0]] for c, r in zip(cells, results)
                if not isinstance(r, Exception)]
        print(f"mean target accuracy: {100 * np.mean(accs):.2f}%")
    return _report_errors(ex._errors(results))


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    text_rows, text_header, csv_rows, csv_header, errors = ex.ablation(cfg)
    reports = Path(cfg.out) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    stem = "ablation" + (f"_noise{cfg.noise:g}" if cfg.noise else "")
    (reports / f"{stem}.txt").write_text(ex.aligned(text_rows, text_header))
    (reports / f"{stem}.csv").write_text(ex.csv_text(csv_rows, csv_header))
    print(ex.aligned(text_rows, text_header), end="")
    return _report_errors(errors)


def cmd_weights_report(cfg: ExperimentConfig, args) -> int:
    try:
        rows = ex.weights_report(cfg, run_missing=args.run_missing)
    except ex.MissingCheckpointError as e:
        print(f"error: {e} (train first or pass --run-missing)", file=sys.stderr)
        return 1
    header = ["domain", "seed", "in_ratio_single", "in_ratio_multi"]
    fmt = [(d, s, f"{a:.4f}", f"{b:.4f}") for d, s, a, b in rows]
    ex.write_table(Path(cfg.out) / "reports", "weights", [(d, s, repr(a), repr(b))
                                                          for d, s, a, b in rows], header, fmt)
    print(ex.aligned(fmt, header), end="")
    wins = sum(b > a for _, _, a, b in rows)
    print(f"multi-source ratio higher in {wins}/{len(rows)} cells")
    return 0


def cmd_single_source_matrix(cfg: ExperimentConfig, args) -> int:
    bn, delta, errors = ex.single_source_matrix(cfg)
    header = ["source"] + [f"target{t}" for t in cfg.domains]
    rows = [[f"d{d}"] + [f"{bn[i, j]:.2f} ({delta[i, j]:+.2f})" for j in range(len(cfg.domains))]
            for i, d in enumerate(cfg.domains)]
    csv_rows = [[d] + [f"{bn[i, j]:.4f}" for j in range(len(cfg.domains))]
                + [f"{delta[i, j]:.4f}" for j in range(len(cfg.domains))]
                for i, d in enumerate(cfg.domains)]
    csv_header = ["source"] + [f"bn_t{t}" for t in cfg.domains] + [f"delta_t{t}" for t in cfg.domains]
    reports = Path(cfg.out) / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "single_source.txt").write_text(
        "BN accuracy (%) with DSON delta (points) in parentheses\n" + ex.aligned(rows, header))
    (reports / "single_source.csv").write_text(ex.csv_text(csv_rows, csv_header))
    print(ex.aligned(rows, header), end="")
    off = ~np.eye(len(cfg.domains), dtype=bool)
    print(f"mean off-diagonal delta: {np.nanmean(delta[off]):+.2f} points")
    return _report_errors(errors)


def cmd_grad_check(cfg: ExperimentConfig, args) -> int:
    report = run_all_checks(cfg.seeds[0])
    print(report.table())
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "grad_check.txt").write_text(report.table() + "\n")
    return 0 if report.passed else 1


def cmd_dump_features(cfg: ExperimentConfig, args) -> int:
    from .experiments import build_net, cell_from_config, load_checkpoint, load_split

    ds = load_split(cfg.out, args.domain, "test")
    if args.checkpoint_target is not None:
        t = args.checkpoint_target
        net = load_checkpoint(cell_from_config(cfg, cfg.variant, cfg.sources(t), cfg.seeds[0], (t,)),
                              cfg.out)
    else:
        cell = cell_from_config(cfg, cfg.variant, cfg.sources(args.domain), cfg.seeds[0])
        net = build_net(cell, ds.images.shape[1], ds.num_classes)
    channels = tuple(parse_int_list(args.channels))
    if len(channels) != 2:
        print("error: --channels needs exactly two indices", file=sys.stderr)
        return 2
    rows = dump_features_2ch(net, ds.images, ds.labels, args.norm, args.layer, channels)
    path = Path(cfg.out) / "features" / f"d{args.domain}_{args.layer}_{args.norm}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_feature_table(rows, path)
    print(path)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate,
            "weights-report": cmd_weights_report,
            "single-source-matrix": cmd_single_source_matrix,
            "grad-check": cmd_grad_check, "dump-features": cmd_dump_features}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / f"{args.command}.cfg").write_text(serialize_config(cfg))
    try:
        return COMMANDS[args.command](cfg, args)
    except (ex.MissingDataError, ex.MissingCheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
