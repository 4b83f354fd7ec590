"""Command-line interface: ``estimate``, ``simulate``, ``truth`` and ``validate``.

Runs are driven by one TOML file. A minimal estimation config::

    seed = 1

    [data]
    path = "households.csv"
    covariates = ["age", "wealth"]

    [estimator]
    K = 5
    r = "exact"
    S = 30

    [[policies]]
    spec = "cips:delta0=1"
    grid = {from = 0.5, to = 2.0, points = 16}
    estimands = ["mu", "mu1", "mu0", "de"]

Exit codes: 0 success, 1 configuration error, 2 data error, 3 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DataError
from .estimator import KINDS, TWO_POLICY, EstimandSpec, EstimatorConfig, estimate
from .io import CsvSchema, load_csv, validate_report_dict, write_report
from .nuisance.model import ConfigurationError, LearnerSpec
from .policies import DomainError, PolicyParseError, parse_policy, with_param

log = logging.getLogger("clusterpolicy")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from None


def grid_values(grid: dict) -> list:
    if "values" in grid:
        vals = [float(v) for v in grid["values"]]
    else:
        try:
            lo, hi, k = float(grid["from"]), float(grid["to"]), int(grid["points"])
        except KeyError as exc:
            raise ConfigError(f"grid needs 'values' or from/to/points; missing {exc}") from None
        vals = np.linspace(lo, hi, k).tolist() if k > 1 else [lo]
    if not vals:
        raise ConfigError("policy grid has no points")
    return vals


def estimator_config(doc: dict, seed=None) -> EstimatorConfig:
    est = dict(doc.get("estimator", {}))
    try:
        learner = LearnerSpec.from_dict(doc.get("learner"))
        r = est.get("r", 100)
        return EstimatorConfig(
            K=int(est.get("K", 2)),
            r=r if r == "exact" else int(r),
            S=int(est.get("S", 1)),
            seed=int(seed if seed is not None else doc.get("seed", 0)),
            alpha_level=float(est.get("alpha_level", 0.05)),
            learner=learner,
            clip_eps=float(est.get("clip_eps", 0.01)),
        )
    except (ConfigurationError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def build_estimands(doc: dict, policy_flags=(), estimand_flags=(), reference_flag=None) -> list:
    """Expand policy entries and grids into estimand specs, in config order."""
    entries = []
    if policy_flags:
        for text in policy_flags:
            entries.append({"spec": text, "estimands": list(estimand_flags) or ["mu"],
                            "reference": reference_flag})
    else:
        entries = list(doc.get("policies", []))
        if estimand_flags:
            entries = [dict(e, estimands=list(estimand_flags)) for e in entries]
    if not entries:
        raise ConfigError("no policies given (use [[policies]] or --policy)")
    out = []
    try:
        for entry in entries:
            base = parse_policy(entry["spec"])
            pols = [with_param(base, v) for v in grid_values(entry["grid"])] if entry.get("grid") else [base]
            ref = entry.get("reference")
            ref = parse_policy(ref) if ref else None
            for kind in entry.get("estimands", ["mu"]):
                if kind not in KINDS:
                    raise ConfigError(f"unknown estimand {kind!r}; choose from {', '.join(KINDS)}")
                if kind in TWO_POLICY and ref is None:
                    raise ConfigError(f"estimand {kind} needs a reference policy")
                for p in pols:
                    out.append(EstimandSpec(kind, p, ref if kind in TWO_POLICY else None))
    except KeyError as exc:
        raise ConfigError(f"policy entry missing {exc}") from None
    except (PolicyParseError, DomainError) as exc:
        raise ConfigError(str(exc)) from None
    return out


def _load_data(doc, data_path):
    spec = dict(doc.get("data", {}))
    path = data_path or spec.get("path")
    if not path:
        raise ConfigError("no data file given (use [data].path or --data)")
    schema = CsvSchema.from_dict(spec)
    try:
        return load_csv(path, schema, int(spec.get("n_max", 20)))
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc}") from None


def _check_policies(estimands, data):
    for e in estimands:
        for _, (p, _k) in e.components():
            try:
                p.check(data.column_names, data)
            except (PolicyParseError, DomainError, DataError) as exc:
                raise ConfigError(str(exc)) from None


def cmd_estimate(args) -> int:
    doc = load_config(args.config)
    cfg = estimator_config(doc, args.seed)
    estimands = build_estimands(doc, args.policy, args.estimand, args.reference)
    data = _load_data(doc, args.data)
    _check_policies(estimands, data)
    try:
        report = estimate(data, estimands, cfg)
    except (ConfigError, DataError):
        raise
    except Exception as exc:
        raise EstimationFailure(f"{type(exc).__name__}: {exc}") from exc
    out = args.out or doc.get("output", {}).get("report", "report.json")
    write_report(report, out)
    log.info("wrote %d results to %s", len(report.results), out)
    return EXIT_OK


class EstimationFailure(Exception):
    pass


def _dgp_from(doc: dict, section: str):
    from .simulation import DgpConfig

    sec = dict(doc.get(section, {}))
    try:
        return DgpConfig(m=int(sec.get("m", 500)), size_dist=str(sec.get("size_dist", "uniform:5-20")),
                         seed=int(sec.get("dgp_seed", doc.get("seed", 0))))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_estimand_list(items) -> list:
    try:
        return [EstimandSpec.parse(s) for s in items]
    except (ValueError, PolicyParseError, DomainError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args) -> int:
    from .simulation import parse_estimator, run_benchmark, table_estimands

    doc = load_config(args.config)
    sim = dict(doc.get("simulate", {}))
    cfg = estimator_config(doc, args.seed)
    dgp = _dgp_from(doc, "simulate")
    if "table" in sim:
        try:
            estimands = table_estimands(sim["table"])
        except ValueError:
            raise ConfigError(f"unknown table {sim['table']!r}; use cips or tpb") from None
    else:
        estimands = _parse_estimand_list(sim.get("estimands", ["mu:cips:delta0=1"]))
    estimators = list(sim.get("estimators", ["nss", "pss", "ipw"]))
    try:
        for name in estimators:
            parse_estimator(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    D = int(sim.get("D", 100))
    if D < 2:
        raise ConfigError("D must be >= 2")
    try:
        res = run_benchmark(D, dgp, estimands, estimators, cfg, threads=args.threads,
                            mc_clusters=int(sim.get("mc_clusters", 200_000)),
                            truth_seed=int(sim.get("truth_seed", 0)), cache_dir=sim.get("cache_dir"))
    except Exception as exc:
        raise EstimationFailure(f"{type(exc).__name__}: {exc}") from exc
    out = args.out or sim.get("out", "benchmark.csv")
    res.to_csv(out)
    if res.failed:
        print(f"{len(res.failed)} replications failed and were excluded", file=sys.stderr)
    return EXIT_OK


def cmd_truth(args) -> int:
    from .simulation import table_estimands, true_values

    doc = load_config(args.config)
    sec = dict(doc.get("truth", {}))
    dgp = _dgp_from(doc, "truth")
    if "table" in sec:
        estimands = table_estimands(sec["table"])
    elif args.policy:
        estimands = build_estimands({}, args.policy, args.estimand, args.reference)
    else:
        estimands = _parse_estimand_list(sec.get("estimands", ["mu:cips:delta0=1"]))
    mc = int(sec.get("mc_clusters", 200_000))
    seed = int(args.seed if args.seed is not None else sec.get("seed", doc.get("seed", 0)))
    cache = sec.get("cache_dir")
    if cache is False or sec.get("no_cache"):
        cache = False
    vals = true_values(estimands, dgp, mc, seed, cache)
    doc_out = {
        "meta": {"mc_clusters": mc, "seed": seed, "size_dist": dgp.size_dist},
        "results": [{"estimand": e.kind, "policy": e.policy_label, "param": e.param, "truth": t, "mc_se": s}
                    for e, (t, s) in vals.items()],
    }
    text = json.dumps(doc_out, indent=2) + "\n"
    out = args.out or sec.get("out")
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    """Check config, data and policies without estimating; optionally check a report file."""
    doc = load_config(args.config)
    if args.report:
        try:
            validate_report_dict(json.loads(Path(args.report).read_text()))
        except Exception as exc:
            print(f"report invalid: {exc}", file=sys.stderr)
            return EXIT_ESTIMATION
        print(f"{args.report}: valid report")
    if args.config or args.data:
        estimator_config(doc, args.seed)
        estimands = build_estimands(doc, args.policy, args.estimand, args.reference)
        if args.data or doc.get("data", {}).get("path"):
            data = _load_data(doc, args.data)
            _check_policies(estimands, data)
            print(f"data: {data.m} clusters, sizes {min(data.sizes())}-{max(data.sizes())}, "
                  f"covariates {list(data.column_names)}")
        print(f"config: {len(estimands)} estimands")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterpolicy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="TOML configuration file")
        if data:
            p.add_argument("--data", help="unit-per-row CSV (overrides [data].path)")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("--policy", action="append", default=[], help="policy, e.g. cips:delta0=2 (repeatable)")
        p.add_argument("--estimand", action="append", default=[], choices=KINDS, help="estimand kind (repeatable)")
        p.add_argument("--reference", help="reference policy for se1/se0/oe/te")

    p = sub.add_parser("estimate", help="estimate policy effects from a CSV")
    common(p)
    p.set_defaults(func=cmd_estimate)
    p = sub.add_parser("simulate", help="run the simulation benchmark")
    common(p, data=False)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("truth", help="compute ground-truth values for the simulation design")
    common(p, data=False)
    p.set_defaults(func=cmd_truth)
    p = sub.add_parser("validate", help="check a config, dataset or report without estimating")
    common(p)
    p.add_argument("--report", help="report JSON to check against the schema")
    p.set_defaults(func=cmd_validate, data=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "data"):
        args.data = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationFailure as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
