"""Command-line interface: ``cloudq <subcommand> [options]``.

Exit status is 0 on success, 1 for usage or input errors and 2 when a
numerical routine fails (no convergence, root bracketing, ...).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from cloudq import __version__
from cloudq.errors import CloudQError, InstanceFormatError
from cloudq.instance import base_instance, load_instance

log = logging.getLogger("cloudq")

CSV_SCHEMA = "cloudq-csv v1"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ output

def _plain(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else str(v)
    return v


def write_records(rows, fmt, stream, kind, checks=None):
    rows = [{k: _plain(v) for k, v in r.items()} for r in rows]
    if fmt == "jsonl":
        for r in rows:
            stream.write(json.dumps(r) + "\n")
        for name, ok in (checks or {}).items():
            stream.write(json.dumps({"check": name, "ok": bool(ok)}) + "\n")
        return
    fields = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    stream.write(f"# {CSV_SCHEMA} {kind}\n")
    writer = csv.DictWriter(stream, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    for name, ok in (checks or {}).items():
        stream.write(f"# check {name}: {'ok' if ok else 'FAILED'}\n")


def _emit(args, rows, kind, checks=None):
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_records(rows, args.format, fh, kind, checks)
    else:
        write_records(rows, args.format, sys.stdout, kind, checks)


# ------------------------------------------------------------------ inputs

def _instance(args):
    if args.instance and args.base:
        raise UsageError("--instance and --base are mutually exclusive")
    if args.base:
        inst = base_instance(args.base)
    elif args.instance:
        path = Path(args.instance)
        if not path.exists():
            raise UsageError(f"--instance: no such file {args.instance!r}")
        inst = load_instance(path)
    else:
        raise UsageError("an instance is required (--instance PATH or --base K)")
    changes = {}
    if args.regime:
        changes["regime"] = args.regime
    if getattr(args, "truncation", None) is not None:
        changes["truncation"] = args.truncation
    return inst.replace(**changes) if changes else inst


def _grid(text):
    """``a:b:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            a, b, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(math.floor((b - a) / step + 1e-9)) + 1
            return [round(a + i * step, 12) for i in range(n)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--grid: cannot parse {text!r}; use a:b:step or v1,v2,...") from None


def _policies(text):
    from cloudq.policies import POLICY_NAMES

    names = [p.strip().lower() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in POLICY_NAMES]
    if bad or not names:
        raise UsageError(f"--policy: unknown {bad or text!r}; choose from {', '.join(POLICY_NAMES)}")
    return names


# ------------------------------------------------------------------ commands

def cmd_analyze(args):
    from cloudq import queueing as q
    from cloudq.split import optimal_bs

    inst = _instance(args)
    env = inst.env
    rates = [args.rate] * inst.n if args.rate is not None else list(optimal_bs(inst).basic)
    rows = []
    for k, (nd, lam) in enumerate(zip(inst.nodes, rates), start=1):
        r = lam / nd.mu
        rows.append({
            "node": k, "m": nd.m, "mu": nd.mu, "regime": env.regime.value, "theta": env.theta,
            "lambda": lam, "alpha": q.alpha_floor(nd, env),
            "erlang_b": q.erlang_b(nd.m, r), "erlang_c_ext": q.erlang_c_ext(nd.m, r),
            "palm_w": q.palm_w(lam, nd, env.theta),
            "p_abandon": q.p_abandon(lam, nd, env),
            "loss_rate": q.loss_rate(lam, nd, env),
            "loss_rate_deriv": q.loss_rate_deriv(lam, nd, env),
        })
    _emit(args, rows, "analyze")


def cmd_split(args):
    from cloudq.split import bs_objective, kkt_residual, optimal_bs

    inst = _instance(args)
    s = optimal_bs(inst)
    row = {"instance": inst.name, "regime": inst.regime.value, "lambda": inst.lam, "C": inst.C}
    for j, r in enumerate(s.rates):
        row[f"lambda_{j}"] = float(r)
    row.update(alpha_star=s.alpha_star, c_star=s.c_star, objective=bs_objective(inst, s),
               kkt_residual=kkt_residual(inst, s, s.alpha_star) if s.method == "kkt" else math.nan,
               method=s.method)
    _emit(args, [row], "split")


def cmd_indices(args):
    from cloudq.indices import Family, index_tables

    inst = _instance(args)
    families = list(Family) if args.family == "all" else [Family.parse(args.family)]
    top = inst.truncation if args.states is None else args.states
    inst = inst.replace(truncation=max(inst.truncation, top))
    tables = {f: index_tables(inst, f) for f in families}
    rows = []
    for k in range(inst.n):
        for i in range(top + 1):
            row = {"node": k + 1, "state": i}
            row.update({f.value: tables[f][k](i) for f in families})
            rows.append(row)
    _emit(args, rows, "indices")


def _chain(args, inst):
    from cloudq.mdp import build_chain

    return build_chain(inst, forbid_full=not args.self_loop)


def cmd_solve(args):
    from cloudq.mdp import solve_optimal

    inst = _instance(args)
    chain = _chain(args, inst)
    res = solve_optimal(chain, tol=args.tol, max_iter=args.max_iter, method=args.method)
    row = {"instance": inst.name, "policy": "optimal", "gain": res.gain,
           "profit": 1.0 - res.gain / inst.lam, "gap": 0.0, "method": res.method,
           "iterations": res.iterations, "residual": res.span, "states": chain.n_states}
    _emit(args, [row], "solve")


def cmd_evaluate(args):
    from cloudq.mdp import evaluate_policy, optimality_gap, solve_optimal
    from cloudq.policies import make_policy
    from cloudq.split import optimal_bs

    names = _policies(args.policy)
    inst = _instance(args)
    chain = _chain(args, inst)
    z_star = None
    if not args.no_gap:
        opt = solve_optimal(chain, tol=args.tol, max_iter=args.max_iter, method=args.method)
        z_star = 1.0 - opt.gain / inst.lam
    split = optimal_bs(inst)
    rows = []
    for p in names:
        rep = evaluate_policy(chain, make_policy(inst, p, split=split))
        gap = optimality_gap(z_star, rep.profit) if z_star is not None else math.nan
        rows.append({"instance": inst.name, "policy": p, "gain": rep.gain, "profit": rep.profit,
                     "gap": gap, "method": rep.method, "iterations": rep.iterations,
                     "residual": rep.error, "states": chain.n_states})
    _emit(args, rows, "evaluate")


def cmd_simulate(args):
    from cloudq.policies import make_policy
    from cloudq.sim import SimConfig, simulate
    from cloudq.split import optimal_bs

    names = _policies(args.policy)
    inst = _instance(args)
    try:
        cfg = SimConfig(jobs=None if args.horizon else args.jobs, horizon=args.horizon,
                        replications=args.replications, warmup=args.warmup, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = optimal_bs(inst)
    rows = []
    for p in names:
        rep = simulate(inst, make_policy(inst, p, split=split), cfg)
        rows.append(rep.as_record(instance=inst.name))
    _emit(args, rows, "simulate")


def cmd_bench(args):
    from cloudq.bench import FULL_GRID, SMALL_GRID, generate_testbed, run_benchmark

    spec = FULL_GRID if args.scale == "full" else SMALL_GRID
    regimes = ("dbs", "des") if args.regime == "both" else (args.regime,)
    spec = spec.with_regimes(*regimes)
    if args.truncation is not None:
        spec = type(spec)(spec.mu1, spec.rho, spec.theta, spec.C, spec.regimes, spec.m, spec.mu2, args.truncation)
    instances = generate_testbed(spec)
    if args.limit:
        instances = instances[: args.limit]

    def progress(rec):
        log.info("%s done in %.2fs%s", rec["instance"], rec["seconds"],
                 f" ({rec['error']})" if rec["error"] else "")

    table = run_benchmark(instances, method=args.method, tol=args.tol, progress=progress)
    _emit(args, table.records, "bench")
    summary = table.summary_rows()
    if args.summary_out:
        with open(args.summary_out, "w", newline="") as fh:
            write_records(summary, args.format, fh, "bench-summary")
    buf = io.StringIO()
    write_records(summary, "csv", buf, "bench-summary")
    sys.stderr.write(buf.getvalue())
    failed = sum(1 for r in table.records if r["error"])
    if failed:
        log.warning("%d of %d instances failed", failed, len(table.records))
    return EXIT_NUMERICAL if failed == len(table.records) and failed else EXIT_OK


def cmd_sweep(args):
    from cloudq.bench import sweep

    inst = _instance(args)
    grid = _grid(args.grid)
    if args.param in ("m_k", "state"):
        grid = [int(round(v)) for v in grid]
    res = sweep(inst, args.param, grid, kind=args.kind, node=args.node, state=args.state)
    _emit(args, res.rows, f"sweep-{args.kind}-{args.param}", res.checks)


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="cloudq", description="Routing to parallel M/M/m+M queues: analytics, policies, benchmarks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, instance=True):
        if instance:
            sp.add_argument("--instance", metavar="PATH", help="instance file")
            sp.add_argument("--base", type=int, choices=(1, 2, 3), help="use a shipped base instance")
            sp.add_argument("--regime", choices=("dbs", "des"), help="override the deadline regime")
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
        sp.add_argument("--out", metavar="PATH", help="write here instead of stdout")

    def solver(sp):
        sp.add_argument("--truncation", type=int, help="jobs per node kept in the chain")
        sp.add_argument("--method", choices=("rvi", "policy_iteration"), default="rvi")
        sp.add_argument("--tol", type=float, default=1e-10)
        sp.add_argument("--max-iter", type=int, default=1_000_000)
        sp.add_argument("--self-loop", action="store_true",
                        help="let arrivals routed to a full node vanish instead of forbidding that action")

    sp = sub.add_parser("analyze", help="single-node queueing quantities")
    common(sp)
    sp.add_argument("--rate", type=float, help="arrival rate per node (default: optimal split rates)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("split", help="optimal Bernoulli split")
    common(sp)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("indices", help="IO / PI / RB index tables")
    common(sp)
    sp.add_argument("--family", choices=("all", "io", "pi", "rb"), default="all")
    sp.add_argument("--states", type=int, help="largest state to print (default: truncation)")
    sp.set_defaults(func=cmd_indices)

    sp = sub.add_parser("solve", help="optimal average cost on the truncated chain")
    common(sp)
    solver(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("evaluate", help="exact evaluation of policies and their gaps")
    common(sp)
    solver(sp)
    sp.add_argument("--policy", default="bs,io,pi,rb", help="comma-separated: bs,io,pi,rb,external")
    sp.add_argument("--no-gap", action="store_true", help="skip the optimal solve")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("simulate", help="discrete-event simulation")
    common(sp)
    sp.add_argument("--truncation", type=int, help="index table length")
    sp.add_argument("--policy", default="pi")
    sp.add_argument("--jobs", type=int, default=100_000, help="arrivals per replication")
    sp.add_argument("--horizon", type=float, help="simulated time per replication (overrides --jobs)")
    sp.add_argument("--replications", type=int, default=20)
    sp.add_argument("--warmup", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bench", help="optimality-gap study over the test bed")
    common(sp, instance=False)
    sp.add_argument("--scale", choices=("small", "full"), default="small")
    sp.add_argument("--regime", choices=("dbs", "des", "both"), default="dbs")
    sp.add_argument("--truncation", type=int)
    sp.add_argument("--method", choices=("rvi", "policy_iteration"), default="rvi")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--limit", type=int, help="only the first N instances")
    sp.add_argument("--summary-out", metavar="PATH", help="also write min/avg/max tables here")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("sweep", help="outputs against one parameter")
    common(sp)
    sp.add_argument("--kind", choices=("split", "index"), default="split")
    sp.add_argument("--param", required=True, choices=("lambda", "theta", "C", "mu_k", "m_k", "state"))
    sp.add_argument("--grid", required=True, help="a:b:step or v1,v2,...")
    sp.add_argument("--node", type=int, default=1, help="node for mu_k / m_k (1-based)")
    sp.add_argument("--state", type=int, default=14, help="state for index sweeps")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("cloudq: a subcommand is required (see --help)")
        status = args.func(args)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InstanceFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CloudQError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
