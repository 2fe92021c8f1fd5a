"""Run reports: a JSON summary, one schedule CSV per prosumer and a trades CSV."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..model import POWER_FIELDS, DecisionSchedule, Scenario, cost_breakdown, prosumer_cost
from .scenario_io import atomic_write, csv_text, fmt

SCHEDULE_COLUMNS = ("slot",) + POWER_FIELDS + ("tau_in", "e_B")
TRADE_COLUMNS = ("slot", "i", "j", "p_ET", "lambda")
SUMMARY = "summary.json"
TRADES = "trades.csv"


class ReportError(ValueError):
    pass


@dataclass
class RunReport:
    mode: str  # "central", "ledger" or "memory"
    status: str
    schedules: list
    prices: np.ndarray  # [i, j, t]
    history: list = field(default_factory=list)
    settlement: Optional[np.ndarray] = None
    chain: Optional[dict] = None  # {"file": ..., "tip": ..., "blocks": ...}
    wall_seconds: float = 0.0
    iterations: int = 0
    scenario: str = ""

    def totals(self, scenario: Scenario) -> dict:
        """Fleet cost and service revenues recomputed from the schedules."""
        parts = [cost_breakdown(p, s) for p, s in zip(scenario.prosumers, self.schedules)]
        return {
            "cost": float(sum(prosumer_cost(p, s) for p, s in zip(scenario.prosumers, self.schedules))),
            "fit_revenue": float(sum(b["fit_revenue"] for b in parts)),
            "dr_revenue": float(sum(b["dr_revenue"] for b in parts)),
        }

    def summary(self, scenario: Scenario) -> dict:
        N = len(self.schedules)
        settle = self.settlement if self.settlement is not None else np.zeros((N, N))
        return {
            "mode": self.mode,
            "status": self.status,
            "scenario": self.scenario,
            "N": N,
            "T": scenario.T,
            "iterations": self.iterations,
            "totals": self.totals(scenario),
            "prosumer_costs": [float(prosumer_cost(p, s)) for p, s in zip(scenario.prosumers, self.schedules)],
            "residuals": [{"primal": float(a), "dual": float(b)} for a, b in self.history],
            "settlement": np.asarray(settle, dtype=float).tolist(),
            "chain": self.chain,
            "wall_seconds": self.wall_seconds,
            "schedules": [schedule_file(k, N) for k in range(N)],
            "trades": TRADES,
        }

    def write(self, out_dir, scenario: Scenario) -> Path:
        out = Path(out_dir)
        for k, s in enumerate(self.schedules):
            atomic_write(out / schedule_file(k, len(self.schedules)), schedule_csv(s))
        atomic_write(out / TRADES, trades_csv(self.schedules, self.prices))
        atomic_write(out / SUMMARY, json.dumps(self.summary(scenario), indent=2) + "\n")
        return out / SUMMARY


def schedule_file(k: int, N: int) -> str:
    return f"schedule_{k:0{max(2, len(str(N - 1)))}d}.csv"


def schedule_columns(sched: DecisionSchedule) -> dict[str, np.ndarray]:
    cols = {name: getattr(sched, name) for name in POWER_FIELDS}
    cols["tau_in"] = sched.tau_in
    cols["e_B"] = sched.e_B
    return cols


def columns_csv(cols: dict[str, np.ndarray]) -> str:
    T = len(next(iter(cols.values())))
    rows = [[t + 1] + [fmt(cols[c][t]) for c in SCHEDULE_COLUMNS[1:]] for t in range(T)]
    return csv_text(SCHEDULE_COLUMNS, rows)


def schedule_csv(sched: DecisionSchedule) -> str:
    return columns_csv(schedule_columns(sched))


def read_schedule_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCHEDULE_COLUMNS:
        raise ReportError(f"{path}: header must be {','.join(SCHEDULE_COLUMNS)}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {c: data[:, n] for n, c in enumerate(SCHEDULE_COLUMNS) if c != "slot"}


def trades_csv(schedules, prices: np.ndarray) -> str:
    N = len(schedules)
    T = schedules[0].T if N else 0
    rows = [(t + 1, i, j, fmt(schedules[i].p_ET[t, j]), fmt(prices[i, j, t]))
            for t in range(T) for i in range(N) for j in range(N) if i != j]
    return csv_text(TRADE_COLUMNS, rows)


def read_trades_csv(path, N: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(trades, prices)`` tensors indexed ``[i, j, t]``."""
    trades, prices = np.zeros((N, N, T)), np.zeros((N, N, T))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRADE_COLUMNS:
        raise ReportError(f"{path}: header must be {','.join(TRADE_COLUMNS)}")
    for r in rows[1:]:
        t, i, j = int(r[0]) - 1, int(r[1]), int(r[2])
        trades[i, j, t], prices[i, j, t] = float(r[3]), float(r[4])
    return trades, prices


@dataclass
class LoadedReport:
    summary: dict
    schedules: list  # per prosumer: column name -> array
    trades: np.ndarray


def load_report(path) -> LoadedReport:
    path = Path(path)
    if path.is_dir():
        path = path / SUMMARY
    try:
        summary = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        scheds = [read_schedule_csv(base / name) for name in summary["schedules"]]
        trades, _ = read_trades_csv(base / summary["trades"], summary["N"], summary["T"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ReportError(f"{path}: cannot load report ({exc})") from None
    return LoadedReport(summary, scheds, trades)


def compare_reports(a: LoadedReport, b: LoadedReport) -> dict:
    """Objective and schedule deltas between two reports of the same scenario."""
    if (a.summary["N"], a.summary["T"]) != (b.summary["N"], b.summary["T"]):
        raise ReportError("reports cover different fleet sizes or horizons")
    ca, cb = a.summary["totals"]["cost"], b.summary["totals"]["cost"]
    rel = abs(ca - cb) / max(abs(ca), abs(cb), 1e-12) if ca != cb else 0.0
    sched = 0.0
    for sa, sb in zip(a.schedules, b.schedules):
        for c in POWER_FIELDS:
            sched = max(sched, float(np.abs(sa[c] - sb[c]).max(initial=0.0)))
    trades = float(np.abs(a.trades - b.trades).max(initial=0.0))
    return {"objective_a": ca, "objective_b": cb, "objective_abs": abs(ca - cb), "objective_rel": rel,
            "schedule_max": sched, "trade_max": trades}
