"""Command-line pipeline: sample, fit, trace, opf and report.

Exit codes: 0 success, 2 usage or input error, 3 infeasible model,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dispatch import (
    CarbonOpfConfig,
    DispatchError,
    InfeasibleDispatchError,
    NumericFailureError,
    compare,
    min_emission_dispatch,
    solve_baseline,
    solve_carbon_opf,
)
from .flow import DisconnectedNetworkError, compute_ptdf
from .grid import BUILTIN_CASES, CaseError, LBS_PER_TON, load_case, parse_mass
from .sampler import THREADS_ENV, Dataset, SamplingError, default_threads, generate_dataset, split
from .tracing import FactorMatrix, RankDeficientError, carbon_report, fit_distribution_factors, lmce_oracle_all

log = logging.getLogger("carbontrace")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    case_path: str = "case30"
    format: str | None = None
    slack_bus: int | None = None
    seed: int = 0
    sample_count: int = 1000
    load_range: tuple[float, float] = (0.7, 1.0)
    sampling: str = "per_bus"
    train_fraction: float = 0.8
    fit_mode: str = "joint"
    ridge: float = 1e-9
    permit_price: float | None = None
    total_cap: float | None = None
    node_caps: dict = field(default_factory=dict)
    cost_path: str = "quadratic"
    output_dir: str = "out"
    tol: float = 1e-8
    threads: int = 1

    def digest(self) -> str:
        """Hash of everything that can change results (output location excluded)."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _node_cap(text):
    try:
        bus, val = text.split("=", 1)
        return int(bus), parse_mass(val)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected BUS=AMOUNT, e.g. 4=20ton ({exc})") from None


def _add_case_args(p):
    p.add_argument("--case", default="case30", help=f"case file or bundled name ({', '.join(BUILTIN_CASES)})")
    p.add_argument("--format", choices=("native_json", "matpower_m"), help="case format (default: by extension)")
    p.add_argument("--slack-bus", type=int, help="override the reference bus")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--tol", type=float, default=1e-8, help="solver tolerance")
    p.add_argument("--dump-ptdf", action="store_true", help="also write the PTDF matrix to ptdf.csv")


def _add_sample_args(p):
    p.add_argument("--n", type=_positive_int, default=1000, help="number of feasible samples")
    p.add_argument("--range", nargs=2, type=float, default=(0.7, 1.0), metavar=("LO", "HI"), help="load scale range")
    p.add_argument("--sampling", choices=("per_bus", "system"), default="per_bus",
                   help="independent factor per bus, or one system-wide factor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"parallel scenario solves (default ${THREADS_ENV} or 1)")


def _add_fit_args(p):
    p.add_argument("--train-fraction", type=_fraction, default=0.8)
    p.add_argument("--fit-mode", choices=("joint", "per_generator"), default="joint")
    p.add_argument("--ridge", type=float, default=1e-9, help="minimum-norm tie-break weight (0 disables)")


def _add_carbon_args(p):
    p.add_argument("--permit", type=float, help="permit price, $ per lb CO2")
    p.add_argument("--cap", help="system emission cap with unit, e.g. 95ton or 190000lbs")
    p.add_argument("--node-cap", type=_node_cap, action="append", default=[], metavar="BUS=AMOUNT",
                   help="per-bus emission cap (repeatable)")
    p.add_argument("--factors", help="factor CSV (default OUT/factors.csv)")
    p.add_argument("--cost-path", choices=("quadratic", "pwl"), default="quadratic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carbontrace", description="Locational carbon emission signals and carbon-aware DC-OPF.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="solve baseline OPF over random load scenarios")
    _add_case_args(p)
    _add_sample_args(p)

    p = sub.add_parser("fit", help="fit distribution factors to a dataset")
    _add_case_args(p)
    _add_fit_args(p)
    p.add_argument("--dataset", help="dataset CSV (default OUT/dataset.csv)")
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")

    p = sub.add_parser("trace", help="nodal emissions, ANCE and LMCE for a dispatch")
    _add_case_args(p)
    p.add_argument("--factors", help="factor CSV (default OUT/factors.csv)")
    p.add_argument("--dispatch", default="baseline",
                   help="'baseline' (solve at nominal load) or a dispatch JSON written by 'opf'")
    p.add_argument("--sorted", action="store_true", help="order rows by LMCE")
    p.add_argument("--oracle", action="store_true", help="add the finite-difference benchmark column")
    p.add_argument("--delta", type=float, default=1.0, help="oracle load step, MW")

    p = sub.add_parser("opf", help="baseline and carbon-aware dispatch")
    _add_case_args(p)
    _add_carbon_args(p)
    p.add_argument("--compare", action="store_true", help="solve both and write a comparison table")
    p.add_argument("--timings", action="store_true", help="include solve times in comparison.json")

    p = sub.add_parser("report", help="run sample, fit, opf and trace end to end")
    _add_case_args(p)
    _add_sample_args(p)
    _add_fit_args(p)
    _add_carbon_args(p)
    p.add_argument("--oracle", action="store_true")
    return parser


def _config(args) -> RunConfig:
    cap = None
    if getattr(args, "cap", None) is not None:
        try:
            cap = parse_mass(args.cap)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if cap < 0:
            raise UsageError("--cap must be >= 0")
    permit = getattr(args, "permit", None)
    if permit is not None and permit < 0:
        raise UsageError("--permit must be >= 0")
    lo, hi = getattr(args, "range", (0.7, 1.0))
    if not 0 <= lo <= hi:
        raise UsageError("--range needs 0 <= LO <= HI")
    threads = getattr(args, "threads", None) or default_threads()
    return RunConfig(
        case_path=args.case,
        format=args.format,
        slack_bus=args.slack_bus,
        seed=getattr(args, "seed", 0),
        sample_count=getattr(args, "n", 1000),
        load_range=(float(lo), float(hi)),
        sampling=getattr(args, "sampling", "per_bus"),
        train_fraction=getattr(args, "train_fraction", 0.8),
        fit_mode=getattr(args, "fit_mode", "joint"),
        ridge=getattr(args, "ridge", 1e-9),
        permit_price=permit,
        total_cap=cap,
        node_caps=dict(getattr(args, "node_cap", []) or []),
        cost_path=getattr(args, "cost_path", "quadratic"),
        output_dir=args.out,
        tol=args.tol,
        threads=threads,
    )


class _Run:
    """Shared state for one invocation."""

    def __init__(self, cfg: RunConfig, dump_ptdf: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        if cfg.case_path not in BUILTIN_CASES and not Path(cfg.case_path).exists():
            raise UsageError(f"case file not found: {cfg.case_path}")
        self.net = load_case(cfg.case_path, cfg.format, slack_bus=cfg.slack_bus)
        self.ptdf = compute_ptdf(self.net)
        if dump_ptdf:
            self.ptdf.to_csv(self.out / "ptdf.csv")
        self.provenance = {
            "network_fingerprint": self.net.fingerprint(),
            "config_hash": cfg.digest(),
            "case": cfg.case_path,
        }

    def write_json(self, name, payload):
        path = self.out / name
        path.write_text(json.dumps({**payload, "provenance": self.provenance}, indent=1, sort_keys=True, default=_json_default))
        return path

    def factors(self, path=None) -> FactorMatrix:
        path = Path(path) if path else self.out / "factors.csv"
        if not path.exists():
            raise UsageError(f"factor file not found: {path} (run 'fit' first or pass --factors)")
        fm = FactorMatrix.load(path)
        if fm.network_fingerprint and fm.network_fingerprint != self.net.fingerprint():
            raise UsageError(f"{path} was fitted for a different network")
        if fm.alpha.shape != (self.net.n_buses, self.net.n_generators):
            raise UsageError(f"{path} has shape {fm.alpha.shape}, network needs {(self.net.n_buses, self.net.n_generators)}")
        return fm


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def cmd_sample(run: _Run) -> Path:
    cfg = run.cfg
    ds = generate_dataset(run.net, run.ptdf, cfg.sample_count, cfg.load_range, cfg.seed,
                          mode=cfg.sampling, threads=cfg.threads)
    ds.meta["config_hash"] = cfg.digest()
    csv_path, _ = ds.save(run.out / "dataset.csv")
    print(f"wrote {len(ds)} samples to {csv_path} ({ds.infeasible_redraws} infeasible redraws)")
    return csv_path


def cmd_fit(run: _Run, dataset_path=None) -> FactorMatrix:
    cfg = run.cfg
    path = Path(dataset_path) if dataset_path else run.out / "dataset.csv"
    if not path.exists():
        raise UsageError(f"dataset file not found: {path}")
    ds = Dataset.load(path)
    if ds.network_fingerprint and ds.network_fingerprint != run.net.fingerprint():
        raise UsageError(f"{path} was generated for a different network")
    if ds.n_generators != run.net.n_generators or ds.bus_ids != tuple(int(b) for b in run.net.bus_ids):
        raise UsageError(f"{path} does not match the case dimensions")
    train, test = split(ds, cfg.train_fraction, cfg.seed)
    fm = fit_distribution_factors(train, cfg.fit_mode, ridge=cfg.ridge)
    fm.network_fingerprint = run.net.fingerprint()
    test_m = fm.evaluate(test)
    fm.save(run.out / "factors.csv")
    report = {
        "mode": cfg.fit_mode,
        "train": {"mae_mw": fm.fit_metrics["mae"], "max_ae_mw": fm.fit_metrics["max_ae"], "n": len(train)},
        "test": {"mae_mw": test_m["mae"], "max_ae_mw": test_m["max_ae"], "n": len(test)},
        "per_bus": [
            {"bus": b, "train_mae_mw": fm.fit_metrics["per_bus_mae"][k], "test_mae_mw": test_m["per_bus_mae"][k],
             "test_max_ae_mw": test_m["per_bus_max_ae"][k]}
            for k, b in enumerate(run.net.bus_ids)
        ],
        "dropped_generators": [g + 1 for g in fm.dropped_generators],
        "rank": fm.meta.get("rank"),
    }
    run.write_json("fit_report.json", report)
    print(f"{'':8}{'MAE (MW)':>14}{'Max-AE (MW)':>14}")
    print(f"{'train':8}{report['train']['mae_mw']:>14.3e}{report['train']['max_ae_mw']:>14.3e}")
    print(f"{'test':8}{report['test']['mae_mw']:>14.3e}{report['test']['max_ae_mw']:>14.3e}")
    return fm


def _carbon_cfg(cfg: RunConfig) -> CarbonOpfConfig:
    return CarbonOpfConfig(
        permit_price=cfg.permit_price or 0.0,
        total_cap_lbs=math.inf if cfg.total_cap is None else cfg.total_cap,
        node_caps_lbs=cfg.node_caps or None,
    )


def _zero_cap(run: _Run):
    _, e_min = min_emission_dispatch(run.net, run.net.base_loads, run.ptdf)
    raise InfeasibleDispatchError(
        f"emission cap 0 lbs is below the minimum achievable emission {e_min:.6g} lbs "
        f"({e_min / LBS_PER_TON:.4g} ton); tightest feasible cap is {e_min:.6g} lbs",
        min_emission_lbs=e_min, cap_lbs=0.0,
    )


def cmd_opf(run: _Run, factors_path=None, compare_runs=False, timings=False) -> dict:
    cfg = run.cfg
    loads = run.net.base_loads
    carbon_mode = cfg.permit_price is not None or cfg.total_cap is not None or bool(cfg.node_caps)
    out = {}
    if not carbon_mode or compare_runs:
        base = solve_baseline(run.net, loads, run.ptdf, permit_price=cfg.permit_price,
                              cost_path=cfg.cost_path, tol=cfg.tol)
        base.write_csv(run.out, "baseline")
        d = base.to_dict()
        d.pop("solve_time_s")
        run.write_json("baseline.json", d)
        out["baseline"] = base
    if carbon_mode:
        if cfg.total_cap == 0:
            _zero_cap(run)
        fm = run.factors(factors_path)
        res = solve_carbon_opf(run.net, loads, run.ptdf, fm, _carbon_cfg(cfg), cost_path=cfg.cost_path, tol=cfg.tol)
        res.write_csv(run.out, "carbon")
        d = res.to_dict()
        d.pop("solve_time_s")
        run.write_json("carbon.json", d)
        out["carbon"] = res
    if compare_runs and "carbon" in out:
        table = compare(out["baseline"], out["carbon"])
        if not timings:
            table.pop("solve_time")
        run.write_json("comparison.json", {"rows": table, "cost_path": cfg.cost_path})
        _print_comparison(out["baseline"], out["carbon"])
    else:
        for kind, res in out.items():
            print(f"{kind}: power cost ${res.power_cost:.2f}, carbon cost ${res.carbon_cost:.2f}, "
                  f"emission {res.total_emission_tons:.2f} ton, {res.solve_time * 1e3:.1f} ms")
    return out


def _print_comparison(base, carb):
    rows = [
        ("Power Cost ($)", base.power_cost, carb.power_cost),
        ("Carbon Emission Cost ($)", base.carbon_cost, carb.carbon_cost),
        ("Total Cost ($)", base.total_cost, carb.total_cost),
        ("Total Emission (ton)", base.total_emission_tons, carb.total_emission_tons),
        ("Solution Time (s)", base.solve_time, carb.solve_time),
    ]
    print(f"{'':26}{'baseline':>14}{'carbon-aware':>14}")
    for name, a, b in rows:
        print(f"{name:26}{a:>14.4g}{b:>14.4g}")


def _dispatch_for_trace(run: _Run, source: str):
    if source == "baseline":
        res = solve_baseline(run.net, run.net.base_loads, run.ptdf, tol=run.cfg.tol)
        return res.p_g, res.loads
    path = Path(source)
    if not path.exists():
        raise UsageError(f"dispatch file not found: {path}")
    data = json.loads(path.read_text())
    try:
        p = np.asarray(data["p_g_mw"], dtype=float)
        loads = np.array([data["loads_mw"][str(b)] for b in run.net.bus_ids], dtype=float)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path} is not a dispatch file written by 'opf' ({exc})") from None
    return p, loads


def cmd_trace(run: _Run, factors_path=None, dispatch="baseline", sort=False, oracle=False, delta=1.0):
    fm = run.factors(factors_path)
    p, loads = _dispatch_for_trace(run, dispatch)
    bench = lmce_oracle_all(run.net, run.ptdf, loads, delta_mw=delta) if oracle else None
    rep = carbon_report(fm, run.net, p, loads, oracle=bench, meta={"dispatch_source": dispatch})
    rep.to_csv(run.out / "carbon_report.csv", sort=sort)
    payload = rep.to_dict()
    run.write_json("carbon_report.json", payload)
    print(f"wrote {len(rep.bus_ids)}-bus carbon report to {run.out / 'carbon_report.csv'}")
    return rep


def cmd_report(run: _Run, args):
    cmd_sample(run)
    cmd_fit(run)
    res = cmd_opf(run, args.factors, compare_runs=True)
    rep = cmd_trace(run, args.factors, sort=True, oracle=args.oracle)
    summary = {k: {kk: _nan_to_none(vv) for kk, vv in v.summary().items() if kk != "solve_time_s"} for k, v in res.items()}
    summary["lmce_range"] = [float(np.nanmin(rep.lmce)), float(np.nanmax(rep.lmce))]
    run.write_json("summary.json", summary)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        run = _Run(cfg, dump_ptdf=args.dump_ptdf)
        if args.command == "sample":
            cmd_sample(run)
        elif args.command == "fit":
            cmd_fit(run, args.dataset)
        elif args.command == "trace":
            cmd_trace(run, args.factors, args.dispatch, args.sorted, args.oracle, args.delta)
        elif args.command == "opf":
            cmd_opf(run, args.factors, args.compare, args.timings)
        elif args.command == "report":
            cmd_report(run, args)
    except InfeasibleDispatchError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SamplingError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CaseError, DisconnectedNetworkError, RankDeficientError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DispatchError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
