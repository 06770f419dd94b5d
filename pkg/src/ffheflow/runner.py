"""Orchestration: limit loops, solver comparison and report output."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError
from .ffhe import SolveOptions, germ_from_state, solve_ffhe
from .netmodel import PQ, PV, NetworkCase
from .nr import NROptions, nr_solve
from .statcom import StatcomSpec
from .system import prepare_system
from .upfc import UpfcSpec

REPORT_SCHEMA = "ffheflow.report/1"
GEN_Q_TOL = 1e-6


@dataclass(frozen=True)
class LimitEvent:
    device: str
    quantity: str  # "|V_SH|" or "|V_SE|"
    value: float
    limit: float
    relaxed_mode: str
    substituted_mode: str
    setpoint: float


@dataclass(frozen=True)
class GenLimitEvent:
    bus: int
    q: float
    limit: float


@dataclass(frozen=True)
class RunOptions:
    solver: str = "ffhe"
    solve: SolveOptions = field(default_factory=SolveOptions)
    max_iter: int = 30  # Newton
    enforce_limits: bool = False
    enforce_gen_qlim: bool = False
    max_swaps: int = 5
    hysteresis: float = 1e-6
    max_gen_passes: int = 20

    def __post_init__(self):
        if self.solver not in ("ffhe", "nr"):
            raise ConfigurationError(f"unknown solver {self.solver!r}")


@dataclass
class RunResult:
    report: object
    events: list
    gen_events: list
    status: str  # converged | diverged | oscillating
    devices: tuple
    case: NetworkCase
    candidates: list = field(default_factory=list)
    wall_time: float = 0.0


# ---------------------------------------------------------------------------


def _solve(case, devices, options: RunOptions, start=None):
    system = prepare_system(case, devices)
    if options.solver == "nr":
        return nr_solve(system, options=NROptions(options.solve.tolerance, options.max_iter), start=start)
    germ = germ_from_state(system, start) if start is not None else None
    return solve_ffhe(system, germ=germ, options=options.solve)


def _gen_violations(report, case: NetworkCase):
    system = report.system
    z = report.z
    n = system.layout.n_nodes
    Sc = z[:n] * np.conj(system.K @ z)
    out = []
    for b in case.buses:
        if b.kind != PV:
            continue
        qg = Sc[b.id].imag + b.demand.imag
        if qg > b.q_max + GEN_Q_TOL:
            out.append(GenLimitEvent(b.ext_id, float(qg), b.q_max))
        elif qg < b.q_min - GEN_Q_TOL:
            out.append(GenLimitEvent(b.ext_id, float(qg), b.q_min))
    return out


def _switch_generators(case: NetworkCase, events) -> NetworkCase:
    by_ext = {e.bus: e for e in events}
    buses = []
    for b in case.buses:
        e = by_ext.get(b.ext_id)
        if e is not None:
            b = dataclasses.replace(b, kind=PQ, generation=complex(b.generation.real, e.limit))
        buses.append(b)
    return case.with_buses(buses)


def _device_violations(report, devices, hyst):
    """Replacement device list and events for every violated magnitude limit."""
    new, events = [], []
    for dev, res in zip(devices, report.devices):
        if isinstance(dev, StatcomSpec):
            if abs(res.v_sh) > dev.vsh_max + hyst and dev.mode != "M2":
                events.append(LimitEvent(dev.label, "|V_SH|", abs(res.v_sh), dev.vsh_max, dev.mode, "M2", dev.vsh_max))
                dev = dataclasses.replace(dev, mode="M2", setpoint=dev.vsh_max)
        else:
            if abs(res.v_sh) > dev.vsh_max + hyst and dev.shunt_mode != "M2":
                events.append(LimitEvent(dev.label, "|V_SH|", abs(res.v_sh), dev.vsh_max, dev.shunt_mode, "M2",
                                         dev.vsh_max))
                dev = dataclasses.replace(dev, shunt_mode="M2", shunt_setpoint=dev.vsh_max)
            if abs(res.v_se) > dev.vse_max + hyst and dev.vse_setpoint is None:
                # the active-power target gives way first, reactive flow is kept
                drop = "P" if dev.p_setpoint is not None else "Q"
                events.append(LimitEvent(dev.label, "|V_SE|", abs(res.v_se), dev.vse_max, drop, "VSE", dev.vse_max))
                repl = {"p_setpoint": None} if drop == "P" else {"q_setpoint": None}
                dev = dataclasses.replace(dev, vse_setpoint=dev.vse_max, **repl)
        new.append(dev)
    return tuple(new), events


def run_powerflow(case: NetworkCase, devices=(), options: RunOptions | None = None) -> RunResult:
    """Solve with optional generator reactive limits and device limit relaxation.

    Each re-solve starts from the previous solution.  Generators that leave
    their reactive range are held at the limit as load buses (no switching
    back).  Device limits switch the violating control to magnitude control
    pinned at the limit; generator states are then re-derived from the
    original case.  At most ``max_swaps`` switches are made before the run
    is declared oscillating.
    """
    options = options or RunOptions()
    t0 = time.perf_counter()
    devices = tuple(devices)
    original_case = case
    events, gen_events, candidates = [], [], []
    report = _solve(case, devices, options)
    swaps = 0
    passes = 0
    status = None
    while report.converged:
        changed = False
        if options.enforce_gen_qlim and passes < options.max_gen_passes:
            viol = _gen_violations(report, case)
            if viol:
                passes += 1
                gen_events.extend(viol)
                case = _switch_generators(case, viol)
                changed = True
        if not changed and options.enforce_limits:
            new_devices, ev = _device_violations(report, devices, options.hysteresis)
            if ev:
                swaps += len(ev)
                if swaps > options.max_swaps:
                    status = "oscillating"
                    candidates.append(report)
                    break
                events.extend(ev)
                devices = new_devices
                # generator limits are re-evaluated for the new control set
                case, passes = original_case, 0
                gen_events.clear()
                changed = True
        if not changed:
            break
        candidates.append(report)
        report = _solve(case, devices, options, start=report.z)
    if status is None:
        status = "converged" if report.converged else "diverged"
    report.events = list(events)
    # an oscillating run keeps the two states it was switching between
    kept = candidates[-2:] if status == "oscillating" else []
    return RunResult(report, events, gen_events, status, devices, case, kept, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonMetrics:
    delta_e: float | None  # percent
    delta_t: float | None  # percent
    terms_used: int
    iterations_used: int
    ffhe_time: float
    nr_time: float
    ffhe_history: tuple
    nr_history: tuple
    ffhe_status: str
    nr_status: str


def percent_reduction(reference: float, new: float) -> float:
    """``100 (reference - new) / reference``; positive when ``new`` is smaller."""
    return 100.0 * (reference - new) / reference


def reduction_factor(history) -> float:
    """Geometric-mean per-step reduction ``(h_first / h_last) ** (1/steps)``,
    starting after the first step when at least two further steps exist."""
    h = [x for x in history if x > 0 and math.isfinite(x)]
    if len(h) < 2:
        return math.nan
    if len(h) >= 3:
        h = h[1:]
    return (h[0] / h[-1]) ** (1.0 / (len(h) - 1))


def compare_solvers(case, devices=(), options: RunOptions | None = None) -> ComparisonMetrics:
    """NR to tolerance versus NR(3)-seeded FFHE to tolerance (seeding included).

    When limit handling is enabled, the final generator/device configuration
    of a limit-enforced run is used, and both solvers then start cold on it.
    """
    options = options or RunOptions()
    if options.enforce_gen_qlim or options.enforce_limits:
        final = run_powerflow(case, devices, options)
        case, devices = final.case, final.devices
    t = time.perf_counter()
    system = prepare_system(case, devices)
    nr = nr_solve(system, options=NROptions(options.solve.tolerance, options.max_iter))
    t_nr = time.perf_counter() - t
    t = time.perf_counter()
    system = prepare_system(case, devices)
    ff = solve_ffhe(system, germ="nr:3", options=options.solve)
    t_ff = time.perf_counter() - t
    de = dt = None
    if nr.converged and ff.converged:
        r_ff, r_nr = reduction_factor(ff.mismatch_history), reduction_factor(nr.mismatch_history)
        if math.isfinite(r_ff) and math.isfinite(r_nr):
            de = -percent_reduction(r_nr, r_ff)
        dt = percent_reduction(t_nr, t_ff)
    return ComparisonMetrics(de, dt, ff.terms_used, nr.iterations, t_ff, t_nr, tuple(ff.mismatch_history),
                             tuple(nr.mismatch_history), ff.status, nr.status)


# ---------------------------------------------------------------------------
# device configuration


def _complex(v, what):
    if isinstance(v, (int, float, complex)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        try:
            return complex(v.replace(" ", "").replace("i", "j"))
        except ValueError:
            pass
    raise ConfigurationError(f"{what}: cannot read {v!r} as a complex number")


def _limit(v):
    return math.inf if v is None else float(v)


def device_from_dict(d: dict):
    kind = str(d.get("type", "")).lower()
    try:
        if kind == "statcom":
            return StatcomSpec(
                bus=int(d.get("bus_i", d.get("bus"))), y_sh=_complex(d["y_sh"], "y_sh"), mode=d["mode"],
                setpoint=float(d["setpoint"]), line_to=d.get("line_to"), vsh_max=_limit(d.get("vsh_max")),
                name=d.get("name", ""),
            )
        if kind == "upfc":
            modes = d["modes"]
            if isinstance(modes, dict):
                pairs = list(modes.items())
            else:
                pairs = list(zip(modes, d["setpoints"]))
            shunt = [(m, v) for m, v in pairs if str(m) not in ("P", "Q", "VSE")]
            series = {str(m): float(v) for m, v in pairs if str(m) in ("P", "Q", "VSE")}
            if len(shunt) != 1:
                raise ConfigurationError("UPFC needs exactly one shunt mode")
            return UpfcSpec(
                bus_i=int(d["bus_i"]), bus_m=int(d["bus_m"]), y_sh=_complex(d["y_sh"], "y_sh"),
                shunt_mode=shunt[0][0], shunt_setpoint=float(shunt[0][1]), p_setpoint=series.get("P"),
                q_setpoint=series.get("Q"), vse_setpoint=series.get("VSE"), z_se=_complex(d.get("z_se", 0), "z_se"),
                vsh_max=_limit(d.get("vsh_max")), vse_max=_limit(d.get("vse_max")), name=d.get("name", ""),
            )
    except KeyError as exc:
        raise ConfigurationError(f"{kind} entry is missing {exc}") from None
    raise ConfigurationError(f"unknown device type {d.get('type')!r}")


def load_devices(source, scenario: str | None = None):
    """Devices (and optional run settings) from a YAML file or text.

    The document holds either ``devices: [...]`` or
    ``scenarios: {name: {devices: [...], ...}}``.  Returns
    ``(devices, settings)`` where ``settings`` holds any other keys of the
    selected block (``gen_qlim``, ``enforce_limits``, ``watch``).
    """
    text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) and Path(
        str(source)).exists() else str(source)
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"device file is not valid YAML: {exc}") from None
    if "scenarios" in doc:
        if scenario is None:
            raise ConfigurationError(f"choose a scenario: {', '.join(doc['scenarios'])}")
        try:
            doc = doc["scenarios"][scenario]
        except KeyError:
            raise ConfigurationError(f"unknown scenario {scenario!r}") from None
    elif scenario is not None:
        raise ConfigurationError("device file has no scenarios")
    devices = tuple(device_from_dict(d) for d in doc.get("devices", []) or [])
    settings = {k: v for k, v in doc.items() if k != "devices"}
    return devices, settings


def builtin_scenarios() -> Path:
    return Path(__file__).parent / "data" / "scenarios.yaml"


# ---------------------------------------------------------------------------
# reports


def polar(z) -> str:
    return f"{abs(z):.4f} ∠ {math.degrees(math.atan2(z.imag, z.real)):.2f}"


def rect(z) -> str:
    sign = "+" if z.imag >= 0 else "-"
    return f"{z.real:.4f} {sign} j{abs(z.imag):.4f}"


def _pol(z):
    return {"mag": abs(z), "deg": math.degrees(math.atan2(z.imag, z.real))}


def _cplx(z):
    return {"re": z.real, "im": z.imag}


def _num(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _met(target, achieved, tol):
    return bool(abs(achieved - target) <= tol)


def _device_dict(spec, res, tol):
    if isinstance(spec, StatcomSpec):
        return {
            "type": "statcom", "label": res.label, "bus": res.bus, "mode": res.mode, "setpoint": res.setpoint,
            "achieved": _num(res.achieved), "setpoint_met": _met(res.setpoint, res.achieved, tol),
            "v_bus": _pol(res.v_bus), "v_sh": _pol(res.v_sh), "s_sh": _cplx(res.s_sh), "b_eq": _num(res.b_eq),
            "line_to": spec.line_to, "line_flow": _cplx(res.line_flow) if res.line_flow is not None else None,
            "active_residual": res.active_residual,
        }
    targets = {"P": (spec.p_setpoint, res.line_flow.real), "Q": (spec.q_setpoint, res.line_flow.imag),
               "VSE": (spec.vse_setpoint, abs(res.v_se))}
    shunt_val = abs(res.v_bus) if spec.shunt_mode == "M1" else abs(res.v_sh)
    setpoints = {spec.shunt_mode: {"target": spec.shunt_setpoint, "achieved": shunt_val,
                                   "met": _met(spec.shunt_setpoint, shunt_val, tol)}}
    for k, (t, a) in targets.items():
        if t is not None:
            setpoints[k] = {"target": t, "achieved": a, "met": _met(t, a, tol)}
    return {
        "type": "upfc", "label": res.label, "bus_i": res.bus_i, "bus_m": res.bus_m, "setpoints": setpoints,
        "v_bus": _pol(res.v_bus), "v_sh": _pol(res.v_sh), "s_sh": _cplx(res.s_sh), "b_eq": _num(res.b_eq),
        "v_se": _pol(res.v_se), "i_se": _pol(res.i_se), "s_se": _cplx(res.s_se), "x_eq": _num(res.x_eq),
        "line_flow": _cplx(res.line_flow), "exchange_residual": res.exchange_residual,
    }


def report_dict(result, watch=(), metrics: ComparisonMetrics | None = None, include_timing: bool = True,
                setpoint_tol: float = 1e-6) -> dict:
    """Structured report; ``result`` is a :class:`RunResult` or a bare solve report."""
    if isinstance(result, RunResult):
        rep, status, events, gen_events, devices = (result.report, result.status, result.events,
                                                    result.gen_events, result.devices)
    else:
        rep, status, events, gen_events, devices = result, result.status, result.events, [], result.system.devices
    system = rep.system
    n = system.layout.n_nodes
    Sc = rep.z[:n] * np.conj(system.K @ rep.z)
    buses = []
    for b in system.case.buses:
        v = rep.z[b.id]
        buses.append({"id": b.ext_id, "kind": b.kind, "vm": abs(v), "va_deg": math.degrees(math.atan2(v.imag, v.real)),
                      "p": Sc[b.id].real, "q": Sc[b.id].imag})
    branches = []
    for a, bb in watch:
        branches.append({"from": a, "to": bb, "flow": _cplx(rep.branch_flow(a, bb)),
                         "series_flow": _cplx(rep.series_flow(a, bb))})
    out = {
        "schema": REPORT_SCHEMA,
        "solver": rep.solver,
        "status": status,
        "terms_used": rep.terms_used,
        "iterations": rep.iterations,
        "bus_mismatch": rep.bus_mismatch,
        "device_residual": rep.device_residual,
        "mismatch_history": [_num(float(h)) for h in rep.mismatch_history],
        "buses": buses,
        "branches": branches,
        "devices": [_device_dict(s, r, setpoint_tol) for s, r in zip(devices, rep.devices)],
        "limit_events": [dataclasses.asdict(e) for e in events],
        "generator_limit_events": [dataclasses.asdict(e) for e in gen_events],
        "notes": list(rep.notes),
    }
    if metrics is not None:
        out["comparison"] = {
            "delta_e_percent": metrics.delta_e, "delta_t_percent": metrics.delta_t,
            "terms_used": metrics.terms_used, "iterations_used": metrics.iterations_used,
            "ffhe_history": [_num(float(h)) for h in metrics.ffhe_history],
            "nr_history": [_num(float(h)) for h in metrics.nr_history],
            "ffhe_status": metrics.ffhe_status, "nr_status": metrics.nr_status,
        }
    if include_timing:
        timing = {"wall_time": rep.wall_time}
        if isinstance(result, RunResult):
            timing["run_time"] = result.wall_time
        if metrics is not None:
            timing.update(ffhe_time=metrics.ffhe_time, nr_time=metrics.nr_time)
        out["timing"] = timing
    return out


def _csv_rows(d: dict):
    rows = [("record", "id", "magnitude", "angle_deg", "real", "imag", "detail")]
    for b in d["buses"]:
        rows.append(("bus", b["id"], b["vm"], b["va_deg"], b["p"], b["q"], b["kind"]))
    for dev in d["devices"]:
        ident = dev["bus"] if dev["type"] == "statcom" else f"{dev['bus_i']}-{dev['bus_m']}"
        detail = f"b_eq={dev['b_eq']}"
        if dev["type"] == "upfc":
            detail += f";v_se={dev['v_se']['mag']}@{dev['v_se']['deg']};x_eq={dev['x_eq']}"
        rows.append((dev["type"], ident, dev["v_sh"]["mag"], dev["v_sh"]["deg"], dev["s_sh"]["re"], dev["s_sh"]["im"],
                     detail))
    for key in ("terms_used", "iterations", "bus_mismatch", "device_residual"):
        rows.append(("metric", key, "", "", d[key], "", ""))
    rows.append(("metric", "status", "", "", "", "", d["status"]))
    return rows


def _table(d: dict, watch=()) -> str:
    lines = [f"solver: {d['solver']}   status: {d['status']}   terms: {d['terms_used']}   "
             f"iterations: {d['iterations']}   mismatch: {max(d['bus_mismatch'], d['device_residual']):.3e}", ""]
    lines.append("bus voltages (p.u., degrees)")
    for b in d["buses"]:
        lines.append(f"  V_{b['id']} = {b['vm']:.4f} ∠ {b['va_deg']:.2f}")
    if d["branches"]:
        lines += ["", "branch flows (p.u.)"]
        for br in d["branches"]:
            f = complex(br["flow"]["re"], br["flow"]["im"])
            s = complex(br["series_flow"]["re"], br["series_flow"]["im"])
            lines.append(f"  S_{br['from']}-{br['to']} = {rect(f)}   (series only: {rect(s)})")
    for dev in d["devices"]:
        lines += ["", f"{dev['label']}  (* = setpoint met)"]
        vsh = complex(dev["v_sh"]["mag"] * math.cos(math.radians(dev["v_sh"]["deg"])),
                      dev["v_sh"]["mag"] * math.sin(math.radians(dev["v_sh"]["deg"])))
        vb = dev["v_bus"]
        if dev["type"] == "statcom":
            mark = "*" if dev["setpoint_met"] else " "
            lines.append(f"  mode {dev['mode']} setpoint {dev['setpoint']:g} achieved {dev['achieved']:.6f} {mark}")
            lines.append(f"  V_{dev['bus']} = {vb['mag']:.4f} ∠ {vb['deg']:.2f}")
        else:
            for k, sp in dev["setpoints"].items():
                mark = "*" if sp["met"] else " "
                lines.append(f"  {k}: setpoint {sp['target']:g} achieved {sp['achieved']:.6f} {mark}")
            lines.append(f"  V_{dev['bus_i']} = {vb['mag']:.4f} ∠ {vb['deg']:.2f}")
        lines.append(f"  V_SH = {polar(vsh)}")
        lines.append(f"  S_SH = {rect(complex(dev['s_sh']['re'], dev['s_sh']['im']))}")
        lines.append(f"  b_eq(SH) = {dev['b_eq']:.4f}")
        if dev["type"] == "statcom" and dev["line_flow"] is not None:
            lf = complex(dev["line_flow"]["re"], dev["line_flow"]["im"])
            lines.append(f"  S_{dev['bus']}-{dev['line_to']} = {rect(lf)}")
        if dev["type"] == "upfc":
            for key in ("v_se", "i_se"):
                p = dev[key]
                lines.append(f"  {key.upper()} = {p['mag']:.4f} ∠ {p['deg']:.2f}")
            lines.append(f"  S_SE = {rect(complex(dev['s_se']['re'], dev['s_se']['im']))}")
            lines.append(f"  X_eq(SE) = {dev['x_eq']:.4f}")
            lf = complex(dev["line_flow"]["re"], dev["line_flow"]["im"])
            lines.append(f"  S_{dev['bus_i']}-{dev['bus_m']} = {rect(lf)}")
    for e in d["limit_events"]:
        lines.append(f"limit: {e['device']} {e['quantity']} = {e['value']:.4f} > {e['limit']:g}; "
                     f"{e['relaxed_mode']} -> {e['substituted_mode']} at {e['setpoint']:g}")
    if d["generator_limit_events"]:
        lines.append("generators switched to fixed Q: " + ", ".join(str(e["bus"]) for e in d["generator_limit_events"]))
    if "comparison" in d:
        c = d["comparison"]
        fmt = lambda x: "n/a" if x is None else f"{x:.2f}"  # noqa: E731
        lines += ["", f"%dE = {fmt(c['delta_e_percent'])}   %T = {fmt(c['delta_t_percent'])}   "
                      f"terms {c['terms_used']} vs iterations {c['iterations_used']}"]
    return "\n".join(lines) + "\n"


def emit_report(result, fmt: str = "table", watch=(), metrics=None, include_timing: bool = True) -> str:
    """Render a run as ``table``, ``csv`` or ``json`` text."""
    d = report_dict(result, watch=watch, metrics=metrics, include_timing=include_timing and fmt == "json")
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(_csv_rows(d))
        return buf.getvalue()
    if fmt == "table":
        return _table(d, watch)
    raise ConfigurationError(f"unknown output format {fmt!r}")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def load_report(text: str) -> dict:
    """Parse a JSON report and check its schema tag."""
    d = json.loads(text)
    if d.get("schema") != REPORT_SCHEMA:
        raise ConfigurationError(f"not a {REPORT_SCHEMA} document")
    return d
