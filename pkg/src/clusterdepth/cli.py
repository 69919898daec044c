"""Command-line interface: ``test``, ``simulate`` and ``enumerate``."""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_config, read_keyvalue
from .glm import DesignError, SignalError, parametric_threshold
from .inference import (AdjustedPValueMap, Procedure, TIE_BREAK_RULE, multichannel_depth_from_stats,
                        run_procedure)
from .io import IngestError, emit_results, ingest, write_metrics
from .permute import CapacityError, build_plan, permuted_statistics
from .simlab import EffectSpec, NoiseSpec, run_study, study_metadata

log = logging.getLogger("clusterdepth")

_POINTWISE = {Procedure.MIN_P, Procedure.MAX_T, Procedure.TROENDLE}
_DEPTH = {Procedure.CLUSTER_DEPTH_BOTH, Procedure.CLUSTER_DEPTH_HEAD, Procedure.CLUSTER_DEPTH_TAIL}


def toy_paths() -> tuple[Path, Path]:
    base = resources.files("clusterdepth") / "data"
    return Path(str(base / "toy_signals.csv")), Path(str(base / "toy_design.csv"))


def _split_procedures(values):
    if not values:
        return None
    out = []
    for v in values:
        out.extend(p.strip() for p in v.split(",") if p.strip())
    if out == ["all"]:
        return [p.value for p in Procedure if p is not Procedure.CLUSTER_DEPTH_TAIL]
    return out


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--permutations", type=int, dest="n_perm")
    p.add_argument("--threads", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--procedure", action="append", dest="procedures",
                   help="procedure name(s), comma separated or repeated; 'all' for every one")
    p.add_argument("--out", default="results", help="output prefix")


def _data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", action="append", help="signals file (repeat for one file per channel); "
                   "defaults to the packaged toy data")
    p.add_argument("--design", help="design file with named columns")
    p.add_argument("--contrast", help="design column(s) to test, comma separated")
    p.add_argument("--contrast-matrix", help="explicit contrast matrix file")
    p.add_argument("--channels", help="channel manifest for a column-blocked wide data file")
    p.add_argument("--delimiter", help="field delimiter (default: sniffed, comma or tab)")
    p.add_argument("--scheme", help="manly or terbraak")
    p.add_argument("--tau", type=float, help="cluster-forming threshold")
    p.add_argument("--tau-quantile", type=float, dest="tau_quantile")
    p.add_argument("--aggregation", help="cluster mass aggregation: sum or sumsq")
    p.add_argument("--tfce-e", type=float, dest="E")
    p.add_argument("--tfce-h", type=float, dest="H")
    p.add_argument("--tfce-dh", type=float, dest="dh")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterdepth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    t = sub.add_parser("test", help="run procedures on a dataset")
    _common_flags(t)
    _data_flags(t)
    e = sub.add_parser("enumerate", help="exhaustive permutations for tiny designs")
    _common_flags(e)
    _data_flags(e)
    e.add_argument("--cap", type=int, default=40320, help="largest n! allowed")
    s = sub.add_parser("simulate", help="Monte-Carlo FWER/power study over a settings grid")
    _common_flags(s)
    s.add_argument("--replications", type=int)
    s.add_argument("--no-records", action="store_true", help="skip the per-replication table")
    return parser


_RUN_KEYS = ("seed", "n_perm", "threads", "alpha", "procedures", "scheme", "tau", "tau_quantile",
             "aggregation", "E", "H", "dh")


def _run_config(args) -> RunConfig:
    file_values = read_keyvalue(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    overrides["procedures"] = _split_procedures(args.procedures)
    return build_config(file_values, overrides)


def cmd_test(args, exhaustive=False) -> int:
    cfg = _run_config(args)
    cfg.exhaustive = exhaustive
    if args.data:
        data_paths, design_path = args.data, args.design
        if design_path is None:
            raise IngestError("--design is required with --data")
    else:
        toy_data, toy_design = toy_paths()
        data_paths, design_path = [toy_data], args.design or toy_design
    contrast = args.contrast.split(",") if args.contrast else None
    signals, design = ingest(data_paths, design_path, contrast, args.contrast_matrix,
                             args.channels, args.delimiter)
    tau = cfg.tau if cfg.tau is not None else parametric_threshold(design, cfg.tau_quantile)
    dh = cfg.dh if cfg.dh is not None else tau / 100
    plan = build_plan(signals.n, cfg.n_perm, cfg.seed, cfg.scheme, exhaustive=exhaustive,
                      cap=getattr(args, "cap", 40320))
    perm = permuted_statistics(signals, design, plan, threads=cfg.threads)
    maps = []
    multichannel = signals.channel_count > 1
    for name in cfg.procedures:
        proc = Procedure.parse(name)
        if not multichannel:
            maps.append(run_procedure(proc, perm, tau, cfg.alpha, cfg.aggregation, cfg.E, cfg.H,
                                      dh, cfg.tfce_start))
        elif proc in _DEPTH:
            direction = {Procedure.CLUSTER_DEPTH_BOTH: "both", Procedure.CLUSTER_DEPTH_HEAD: "head",
                         Procedure.CLUSTER_DEPTH_TAIL: "tail"}[proc]
            maps.extend(multichannel_depth_from_stats(perm, tau, cfg.alpha, direction))
        elif proc in _POINTWISE:
            # one family over every channel and time point
            c, m = signals.channel_count, signals.m
            flat = perm.stats.transpose(0, 2, 1).reshape(perm.n_perm, c * m)
            joint = run_procedure(proc, flat, tau, cfg.alpha)
            for k in range(c):
                sl = slice(k * m, (k + 1) * m)
                maps.append(AdjustedPValueMap(joint.p[sl], proc, cfg.alpha, flat[0, sl].copy(),
                                              perm.n_perm, channel=k))
        else:
            raise ConfigError(f"{proc.value} needs a channel adjacency graph and is not available "
                              "for multi-channel data")
    config = cfg.to_dict()
    # execution-only; results are identical for any worker count
    config.pop("threads")
    config.update(tau_effective=tau, dh_effective=dh, n_perm_effective=plan.n_perm,
                  data=[str(p) for p in data_paths], design=str(design_path),
                  design_columns=list(design.column_names or ()),
                  contrast=design.G.tolist())
    extra = {"tie_break": TIE_BREAK_RULE}
    csv_path, json_path = emit_results(maps, config, args.out, signals.channel_names, extra)
    n_sig = sum(int(np.sum(r.significant)) for r in maps)
    print(f"wrote {csv_path} and {json_path} ({len(maps)} maps, {n_sig} significant points)")
    return 0


def _grid(values: dict, key: str, default: str, cast=str):
    raw = values.pop(key, default)
    return [cast(v.strip()) for v in str(raw).split(",") if v.strip()]


def cmd_simulate(args) -> int:
    values = read_keyvalue(args.config) if args.config else {}
    values = {k.lower(): v for k, v in values.items()}
    noises = _grid(values, "noise", "independent")
    shapes = _grid(values, "shape", "square")
    regions = _grid(values, "regions", "none")
    proportions = _grid(values, "proportion", "0.1", float)
    betas = _grid(values, "beta_max", "1", float)
    m = int(values.pop("m", 400))
    noise_range = float(values.pop("noise_range", values.pop("range", 10)))
    n_per_group = int(values.pop("n_per_group", 10))
    replications = int(args.replications or values.pop("replications", 100))
    values.pop("replications", None)
    procs = _split_procedures(args.procedures) or _grid(values, "procedures", "clusterdepth")
    values.pop("procedures", None)
    seed = int(args.seed if args.seed is not None else values.pop("seed", 0))
    values.pop("seed", None)
    n_perm = int(args.n_perm or values.pop("permutations", values.pop("n_perm", 1000)))
    values.pop("permutations", None)
    values.pop("n_perm", None)
    alpha = float(args.alpha or values.pop("alpha", 0.05))
    values.pop("alpha", None)
    workers = int(args.threads or values.pop("threads", values.pop("workers", 1)))
    values.pop("threads", None)
    values.pop("workers", None)
    tau_quantile = float(values.pop("tau_quantile", 0.95))
    if values:
        raise ConfigError(f"unknown simulation keys: {', '.join(sorted(values))}")

    settings = []
    for noise, region, shape, prop, beta in itertools.product(noises, regions, shapes,
                                                              proportions, betas):
        if region == "none":
            prop, beta, shape = 0.0, 0.0, "square"
        setting = (noise, region, shape, prop, beta)
        if setting not in settings:
            settings.append(setting)

    rows, records_out = [], []
    for noise, region, shape, prop, beta in settings:
        nspec = NoiseSpec(noise, m, noise_range)
        espec = EffectSpec(shape, region, prop, beta)
        metrics, records = run_study(nspec, espec, procs, replications, n_perm, seed, workers,
                                     n_per_group, alpha, return_records=True,
                                     tau_quantile=tau_quantile)
        label = dict(noise=noise, noise_range=noise_range, regions=region, shape=shape,
                     proportion=prop, beta_max=beta, m=m)
        for name, met in metrics.items():
            rows.append(dict(label, procedure=name, fwer=met.fwer, fwer_ci_low=met.fwer_ci[0],
                             fwer_ci_high=met.fwer_ci[1], average_power=met.average_power,
                             disjunctive_power=met.disjunctive_power,
                             replications=met.replications, failures=met.failures))
        if not args.no_records:
            records_out.extend(dict(label, **asdict(r)) for r in records)
    meta = study_metadata(dict(m=m, noise_range=noise_range, n_per_group=n_per_group,
                               replications=replications, procedures=procs, seed=seed,
                               n_perm=n_perm, alpha=alpha, tau_quantile=tau_quantile,
                               region_placement="1-based start = round(center) - floor(length/2)",
                               settings=[list(s) for s in settings]))
    paths = write_metrics(rows, meta, args.out, None if args.no_records else records_out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "test":
            return cmd_test(args)
        if args.command == "enumerate":
            return cmd_test(args, exhaustive=True)
        return cmd_simulate(args)
    except (ConfigError, IngestError, DesignError, SignalError, CapacityError, ValueError,
            OSError) as exc:
        print(f"clusterdepth: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
