"""Command-line entry point.

Failures exit with status 1 (2 for usage errors) and print a single line
``error: <kind>: <detail>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from ..coordinator import AdmmError, InMemoryContract, run_admm
from ..ledger import LedgerError, LedgerHandle, verify_export
from ..model import ModelError
from ..subproblem import SubproblemError, solve_dcm
from .reference import generate_reference
from .report import ReportError, RunReport, compare_reports, load_report
from .scenario_io import ScenarioLoadError, atomic_write, load_scenario, write_scenario

CHAIN_FILE = "chain.ndjson"


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else Path(args.scenario).resolve().parent / default_name


def cmd_solve_central(args) -> int:
    scenario = load_scenario(args.scenario)
    t0 = time.perf_counter()
    res = solve_dcm(scenario, tol=args.tol)
    report = RunReport("central", res.solution.status, res.schedules, res.prices,
                       wall_seconds=time.perf_counter() - t0, iterations=res.solution.iterations,
                       scenario=str(args.scenario))
    path = report.write(_out_dir(args, "central"), scenario)
    print(f"ok central objective={res.total_cost:.9f} report={path}")
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    N, T = scenario.N, scenario.T
    use_ledger = not args.memory
    contract = LedgerHandle(N, T, scenario.admm) if use_ledger else InMemoryContract(N, T, scenario.admm.rho)
    rep = run_admm(scenario, contract, workers=args.workers)
    out = _out_dir(args, "ledger" if use_ledger else "memory")
    chain = None
    if use_ledger:
        atomic_write(out / CHAIN_FILE, contract.export())
        tip = contract.ledger.tip
        chain = {"file": CHAIN_FILE, "blocks": len(contract.ledger.chain), "tip": tip.block_hash.hex()}
    report = RunReport("ledger" if use_ledger else "memory", rep.status, rep.schedules, rep.state.lam,
                       history=rep.history, settlement=rep.settlement, chain=chain,
                       wall_seconds=rep.wall_seconds, iterations=rep.iterations, scenario=str(args.scenario))
    path = report.write(out, scenario)
    print(f"ok {report.mode} status={rep.status} iterations={rep.iterations} "
          f"objective={rep.total_cost:.9f} report={path}")
    return 0


def cmd_compare(args) -> int:
    a, b = load_report(args.report_a), load_report(args.report_b)
    d = compare_reports(a, b)
    print(json.dumps(d, sort_keys=True))
    if d["objective_rel"] > args.tol:
        raise CliError("mismatch", f"objective relative delta {d['objective_rel']:.3e} exceeds {args.tol:g}")
    return 0


def cmd_verify(args) -> int:
    try:
        data = Path(args.chain).read_bytes()
    except OSError as exc:
        raise CliError("io", f"{args.chain}: {exc.strerror}") from None
    verdict = verify_export(data)
    if not verdict.valid:
        raise CliError("invalid-chain", f"height={verdict.height} reason={verdict.reason}")
    print("valid")
    return 0


def cmd_gen_reference(args) -> int:
    scenario = generate_reference(args.seed, N=args.N, T=args.T)
    path = write_scenario(scenario, args.out)
    print(f"ok scenario={path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dercoord", description="Prosumer fleet coordination over a simulated ledger.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve-central", help="solve the whole fleet as one QP")
    s.add_argument("scenario")
    s.add_argument("--out", help="report directory (default: <scenario dir>/central)")
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_solve_central)

    s = sub.add_parser("simulate", help="run the distributed iteration")
    s.add_argument("scenario")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--ledger", action="store_true", help="run through the simulated chain (default)")
    mode.add_argument("--memory", action="store_true", help="run through the in-memory contract")
    s.add_argument("--out", help="report directory (default: <scenario dir>/ledger or /memory)")
    s.add_argument("--workers", type=int, default=1, help="threads for the local solves")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="compare two run reports")
    s.add_argument("report_a")
    s.add_argument("report_b")
    s.add_argument("--tol", type=float, default=1e-3, help="relative objective tolerance")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("verify", help="replay and check an exported chain")
    s.add_argument("chain")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("gen-reference", help="write the synthetic reference scenario")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--N", type=int, default=10)
    s.add_argument("--T", type=int, default=24)
    s.set_defaults(func=cmd_gen_reference)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        msg = str(exc)
    except ScenarioLoadError as exc:
        msg = f"scenario: {exc}"
    except ReportError as exc:
        msg = f"report: {exc}"
    except (AdmmError, SubproblemError) as exc:
        msg = f"solver: {exc}"
    except LedgerError as exc:
        msg = f"ledger: {exc}"
    except ModelError as exc:
        msg = f"model: {exc}"
    except OSError as exc:
        msg = f"io: {exc}"
    print(f"error: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
