"""Scenario files: a YAML document plus per-slot CSV series.

Layout of a scenario directory::

    scenario.yaml          time grid, ADMM settings, one block per prosumer
    environment.csv        slot, tau_out
    prosumer_00.csv        slot, renewable, preferred, window, pi_FIT, pi_DR
    ...

CSV paths in the YAML are relative to the YAML file. Slots in CSVs are
numbered from 1; ``window`` is 1 where the shiftable task may run.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from ..model import (
    AdmmSettings,
    EnvironmentProfile,
    GridTariff,
    HvacParams,
    ModelError,
    ProsumerProfile,
    RenewableProfile,
    Scenario,
    ServiceRates,
    ShiftableSpec,
    StorageParams,
    TimeGrid,
)

ENV_COLUMNS = ("slot", "tau_out")
PROSUMER_COLUMNS = ("slot", "renewable", "preferred", "window", "pi_FIT", "pi_DR")


class ScenarioLoadError(ValueError):
    """Load failure located by file and, where known, line and prosumer block."""

    def __init__(self, path, message: str, line: Optional[int] = None, prosumer: Optional[int] = None):
        self.path = str(path)
        self.line = line
        self.prosumer = prosumer
        where = self.path if line is None else f"{self.path}:{line}"
        who = "" if prosumer is None else f"prosumer {prosumer}: "
        super().__init__(f"{where}: {who}{message}")


def fmt(x: float) -> str:
    """Fixed-point with 9 decimals; negative zero printed as zero."""
    s = f"{float(x):.9f}"
    return "0.000000000" if s == "-0.000000000" else s


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# reading ----------------------------------------------------------------

def read_series(path, columns, T: int) -> dict[str, np.ndarray]:
    """Read a per-slot CSV with exactly ``columns`` and ``T`` data rows."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioLoadError(path, "missing series file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != tuple(columns):
        raise ScenarioLoadError(path, f"header must be {','.join(columns)}", line=1)
    data = rows[1:]
    if len(data) != T:
        raise ScenarioLoadError(path, f"length mismatch: expected {T} data rows, got {len(data)}")
    out = np.empty((T, len(columns)))
    for k, row in enumerate(data):
        line = k + 2
        if len(row) != len(columns):
            raise ScenarioLoadError(path, f"expected {len(columns)} fields, got {len(row)}", line=line)
        try:
            out[k] = [float(v) for v in row]
        except ValueError:
            raise ScenarioLoadError(path, "non-numeric field", line=line) from None
        if out[k, 0] != k + 1:
            raise ScenarioLoadError(path, f"slot column must count 1..{T}", line=line)
    if not np.all(np.isfinite(out)):
        raise ScenarioLoadError(path, "non-finite value")
    return {c: out[:, n] for n, c in enumerate(columns)}


def _section(d, key, path, line, prosumer=None, optional=False):
    if not isinstance(d, dict):
        raise ScenarioLoadError(path, "expected a mapping", line, prosumer)
    if key not in d:
        if optional:
            return None
        raise ScenarioLoadError(path, f"missing key '{key}'", line, prosumer)
    return d[key]


def _build(cls, fields, path, line, prosumer=None):
    if not isinstance(fields, dict):
        raise ScenarioLoadError(path, f"{cls.__name__}: expected a mapping", line, prosumer)
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ScenarioLoadError(path, f"{cls.__name__}: {exc}", line, prosumer) from None
    except ModelError as exc:
        raise ScenarioLoadError(path, str(exc), line, prosumer) from None


def load_scenario(path) -> Scenario:
    """Read and fully validate a scenario; errors name the file, line and prosumer block."""
    path = Path(path)
    if path.is_dir():
        path = path / "scenario.yaml"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioLoadError(path, f"cannot read: {exc.strerror}") from None
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            doc = loader.construct_document(node) if node is not None else None
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioLoadError(path, f"YAML syntax: {getattr(exc, 'problem', exc)}",
                                mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ScenarioLoadError(path, "top level must be a mapping", 1)
    lines = _block_lines(node)
    base = path.parent

    tg = _build(TimeGrid, _section(doc, "time", path, 1), path, lines.get("time"))
    T = tg.T
    admm = _build(AdmmSettings, _section(doc, "admm", path, 1, optional=True) or {}, path, lines.get("admm"))
    env_file = _section(doc, "environment", path, lines.get("environment"))
    env_series = read_series(base / str(env_file), ENV_COLUMNS, T)
    env = _build(EnvironmentProfile, {"tau_out": env_series["tau_out"], "slot_hours": tg.slot_hours},
                 path, lines.get("environment"))

    blocks = _section(doc, "prosumers", path, 1)
    if not isinstance(blocks, list) or not blocks:
        raise ScenarioLoadError(path, "'prosumers' must be a nonempty list", lines.get("prosumers"))
    prosumers = []
    for k, blk in enumerate(blocks):
        line = lines["prosumer_items"][k] if k < len(lines["prosumer_items"]) else None
        prosumers.append(_load_prosumer(blk, k, T, path, base, line))
    try:
        return Scenario(tg, env, tuple(prosumers), admm)
    except ModelError as exc:
        raise ScenarioLoadError(path, str(exc), lines.get("prosumers")) from None


def _block_lines(node) -> dict:
    """1-based line numbers of top-level keys and of each prosumer block."""
    out: dict = {"prosumer_items": []}
    if not isinstance(node, yaml.MappingNode):
        return out
    for knode, vnode in node.value:
        out[knode.value] = knode.start_mark.line + 1
        if knode.value == "prosumers" and isinstance(vnode, yaml.SequenceNode):
            out["prosumer_items"] = [item.start_mark.line + 1 for item in vnode.value]
    return out


def _load_prosumer(blk, k, T, path, base, line) -> ProsumerProfile:
    pid = _section(blk, "id", path, line, k)
    if pid != k:
        raise ScenarioLoadError(path, f"id must be {k} (blocks are listed in id order)", line, k)
    series_file = base / str(_section(blk, "series", path, line, k))
    s = read_series(series_file, PROSUMER_COLUMNS, T)
    if not np.all(np.isin(s["window"], (0.0, 1.0))):
        raise ScenarioLoadError(series_file, "window column must be 0 or 1", prosumer=k)
    tariff = _build(GridTariff, _section(blk, "tariff", path, line, k), path, line, k)
    hvac = _build(HvacParams, _section(blk, "hvac", path, line, k), path, line, k)
    sh = _section(blk, "shiftable", path, line, k, optional=True)
    if sh is None:
        if np.any(s["preferred"] != 0) or np.any(s["window"] != 0):
            raise ScenarioLoadError(path, "shiftable load in series but no shiftable block", line, k)
        shiftable = ShiftableSpec.none(T)
    else:
        fields = dict(sh) if isinstance(sh, dict) else sh
        if isinstance(fields, dict):
            fields.update(window=np.flatnonzero(s["window"]).tolist(), preferred=s["preferred"])
        shiftable = _build(ShiftableSpec, fields, path, line, k)
    st = _section(blk, "storage", path, line, k, optional=True)
    storage = StorageParams.none() if st is None else _build(StorageParams, st, path, line, k)
    rates = _build(ServiceRates, {"pi_FIT": s["pi_FIT"], "pi_DR": s["pi_DR"]}, path, line, k)
    renewable = _build(RenewableProfile, {"gen": s["renewable"]}, path, line, k)
    return ProsumerProfile(k, tariff, hvac, shiftable, renewable, storage, rates)


# writing ----------------------------------------------------------------

_HEADER = """\
# Prosumer fleet scenario.
# Units: kW, kWh, degrees C, hours. Money is in model units where the grid
# energy price is 1 (one unit is 20 cents); rho shares that scale.
# Per-slot series live in the CSV files named below, one data row per slot.
"""

_PROSUMER_DOC = """\
# Each prosumer block:
#   tariff     pi_E energy price per kWh, pi_D demand charge per kW of peak
#              grid draw, P_G_max grid import limit (kW)
#   hvac       R (degC/kW) and C (kWh/degC) thermal model, gamma the
#              temperature change per kW of HVAC power in one slot (negative
#              for cooling), omega_AC discomfort weight, tau_ref target,
#              [tau_min, tau_max] comfort band, tau_init starting temperature,
#              p_AC_max HVAC power limit
#   shiftable  omega_S discomfort weight, p_S_max per-slot limit; the routine
#              profile and allowed window come from the series file;
#              null when there is no shiftable task
#   storage    E_cap (kWh), eta_ch/eta_dis efficiencies, alpha_min/alpha_max
#              state-of-charge band, P_ch_max/P_dis_max (kW), beta
#              degradation cost per kWh moved, e_init starting level,
#              terminal_rule none or at_least_initial; null for no battery
#   series     renewable (kW), preferred shiftable load (kW), window (0/1),
#              pi_FIT feed-in price, pi_DR demand-response price
"""


def _kv(indent: str, fields: dict) -> list[str]:
    out = []
    for key, v in fields.items():
        if isinstance(v, str):
            out.append(f"{indent}{key}: {v}")
        elif isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            out.append(f"{indent}{key}: {int(v)}")
        else:
            out.append(f"{indent}{key}: {fmt(v)}")
    return out


def scenario_texts(scenario: Scenario) -> dict[str, str]:
    """File name to contents for the whole scenario directory."""
    T = scenario.T
    files: dict[str, str] = {}
    a = scenario.admm
    lines = [_HEADER.rstrip("\n"), "", "time:"]
    lines += _kv("  ", {"T": T, "slot_hours": scenario.time.slot_hours})
    lines += ["", "admm:"]
    lines += _kv("  ", {"rho": a.rho, "eps_primal": a.eps_primal, "eps_dual": a.eps_dual,
                        "max_iterations": a.max_iterations, "qp_tol": a.qp_tol})
    lines += ["", "# slot, tau_out (outdoor temperature, degC)", "environment: environment.csv", ""]
    lines += [_PROSUMER_DOC.rstrip("\n"), "prosumers:"]
    files["environment.csv"] = csv_text(ENV_COLUMNS, [(t + 1, fmt(v)) for t, v in enumerate(scenario.env.tau_out)])
    width = max(2, len(str(scenario.N - 1)))
    for p in scenario.prosumers:
        name = f"prosumer_{p.id:0{width}d}.csv"
        h, s, st = p.hvac, p.shiftable, p.storage
        lines.append(f"  - id: {p.id}")
        lines.append(f"    series: {name}")
        lines.append("    tariff:")
        lines += _kv("      ", {"pi_E": p.tariff.pi_E, "pi_D": p.tariff.pi_D, "P_G_max": p.tariff.P_G_max})
        lines.append("    hvac:")
        lines += _kv("      ", {k: getattr(h, k) for k in ("R", "C", "gamma", "omega_AC", "tau_ref", "tau_min",
                                                         "tau_max", "tau_init", "p_AC_max")})
        if s.window:
            lines.append("    shiftable:")
            lines += _kv("      ", {"omega_S": s.omega_S, "p_S_max": s.p_S_max})
        else:
            lines.append("    shiftable: null")
        if st.E_cap > 0 or st.P_ch_max > 0 or st.P_dis_max > 0:
            lines.append("    storage:")
            lines += _kv("      ", {k: getattr(st, k) for k in ("E_cap", "eta_ch", "eta_dis", "alpha_min",
                                                              "alpha_max", "P_ch_max", "P_dis_max", "beta",
                                                              "e_init")})
            lines.append(f"      terminal_rule: {st.terminal_rule}")
        else:
            lines.append("    storage: null")
        mask = s.mask
        rows = [(t + 1, fmt(p.renewable.gen[t]), fmt(s.preferred[t]), int(mask[t]), fmt(p.rates.pi_FIT[t]),
                 fmt(p.rates.pi_DR[t])) for t in range(T)]
        files[name] = csv_text(PROSUMER_COLUMNS, rows)
    files["scenario.yaml"] = "\n".join(lines) + "\n"
    return files


def write_scenario(scenario: Scenario, out_dir) -> Path:
    """Write the scenario directory; returns the path of ``scenario.yaml``."""
    out = Path(out_dir)
    for name, text in sorted(scenario_texts(scenario).items()):
        atomic_write(out / name, text)
    return out / "scenario.yaml"
