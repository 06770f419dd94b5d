"""Grid case data: parsing, validation, serialization and Y-bus assembly.

Two file forms are accepted:

* MATPOWER-style text (``mpc.bus = [...]`` tables). Both the full MATPOWER
  column layout and a compact layout are recognised by column count::

      bus     id type Pd Qd Gs Bs Vm Va
      gen     bus Pg Qg Vsp Qmin Qmax
      branch  f t r x b tap shift status

* JSON with the same fields (see ``case_to_json``).

Powers are MW/MVAr in files and per-unit in memory.
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CaseParseError, CaseValidationError, SingularElementError

SLACK, PV, PQ = "slack", "pv", "pq"
_TYPE_CODES = {1: PQ, 2: PV, 3: SLACK}
_TYPE_NUMBERS = {v: k for k, v in _TYPE_CODES.items()}


@dataclass(frozen=True)
class Bus:
    id: int
    ext_id: int
    kind: str
    demand: complex = 0j
    generation: complex = 0j
    shunt: complex = 0j
    voltage_setpoint: float = 1.0
    angle: float = 0.0  # degrees; only meaningful for the slack bus
    q_min: float = -math.inf
    q_max: float = math.inf
    has_generator: bool = False

    @property
    def injection(self) -> complex:
        return self.generation - self.demand


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    ratio: float = 0.0  # 0 means nominal (no transformer)
    shift: float = 0.0  # degrees
    status: bool = True

    @property
    def impedance(self) -> complex:
        return complex(self.r, self.x)

    @property
    def tap(self) -> complex:
        ratio = self.ratio if self.ratio != 0.0 else 1.0
        return ratio * complex(math.cos(math.radians(self.shift)), math.sin(math.radians(self.shift)))


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple
    branches: tuple
    name: str = ""
    _ext_index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "_ext_index", {b.ext_id: b.id for b in self.buses})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index_of(self, ext_id: int) -> int:
        try:
            return self._ext_index[int(ext_id)]
        except KeyError:
            raise CaseValidationError(f"unknown bus {ext_id}") from None

    def ext_ids(self) -> list:
        return [b.ext_id for b in self.buses]

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == SLACK)

    def find_branch(self, ext_a: int, ext_b: int) -> int:
        """Index of the first in-service branch joining two external buses."""
        a, b = self.index_of(ext_a), self.index_of(ext_b)
        for k, br in enumerate(self.branches):
            if br.status and {br.from_bus, br.to_bus} == {a, b}:
                return k
        raise CaseValidationError(f"no in-service branch between buses {ext_a} and {ext_b}")

    def with_buses(self, buses) -> "NetworkCase":
        return dataclasses.replace(self, buses=tuple(buses))


# ---------------------------------------------------------------------------
# unit conversion that survives a write/read round trip exactly


class _Token(float):
    """Float that remembers its source text, so unit scaling sees the exact decimal."""

    text: str

    def __new__(cls, text: str):
        obj = super().__new__(cls, text)
        obj.text = text
        return obj


def _to_pu(value, base: float) -> float:
    with localcontext() as ctx:
        ctx.prec = 60
        return float(Decimal(getattr(value, "text", str(value))) / Decimal(repr(float(base))))


def _from_pu(value: float, base: float) -> float:
    candidate = value * base
    if _to_pu(repr(candidate), base) == value:
        return candidate
    with localcontext() as ctx:
        ctx.prec = 60
        exact = Decimal(value) * Decimal(repr(float(base)))
    return float(exact) if _to_pu(repr(float(exact)), base) == value else exact


def _num(v) -> str:
    if isinstance(v, Decimal):
        return format(v.normalize(), "f")
    v = float(v)
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# ---------------------------------------------------------------------------
# parsing

_BLOCK_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[;]+);")


def _parse_float(token: str, line: int) -> float:
    t = token.strip()
    low = t.lower()
    if low in ("inf", "+inf"):
        return math.inf
    if low == "-inf":
        return -math.inf
    try:
        return _Token(t)
    except ValueError:
        raise CaseParseError(f"non-numeric entry {t!r}", line) from None


def _matpower_tables(text: str):
    scalars = {}
    tables = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if current is None:
            m = _BLOCK_RE.match(line)
            if m:
                current = m.group(1)
                tables[current] = []
                line = m.group(2)
            else:
                s = _SCALAR_RE.match(line)
                if s:
                    scalars[s.group(1)] = s.group(2).strip()
                continue
        end = "]" in line
        if end:
            line = line.split("]", 1)[0]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if tokens:
                tables[current].append(([_parse_float(t, lineno) for t in tokens], lineno))
        if end:
            current = None
    if current is not None:
        raise CaseParseError(f"table mpc.{current} is not terminated")
    return scalars, tables


def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse MATPOWER-style text or JSON case content into a validated case."""
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseParseError(exc.msg, exc.lineno) from None
        return case_from_json(data, name=name)

    scalars, tables = _matpower_tables(text)
    if "bus" not in tables:
        raise CaseParseError("missing mpc.bus table")
    base = float(scalars.get("baseMVA", 100.0))
    if not name:
        m = re.search(r"^\s*function\s+\w+\s*=\s*(\w+)", text, re.M)
        name = m.group(1) if m and m.group(1) != "case" else ""

    bus_rows = []
    for row, ln in tables["bus"]:
        if len(row) >= 13:
            bid, btype, pd, qd, gs, bs, vm, va = row[0], row[1], row[2], row[3], row[4], row[5], row[7], row[8]
        elif len(row) == 8:
            bid, btype, pd, qd, gs, bs, vm, va = row
        else:
            raise CaseParseError(f"bus row has {len(row)} columns, expected 8 or >= 13", ln)
        bus_rows.append(dict(id=bid, type=btype, pd=pd, qd=qd, gs=gs, bs=bs, vm=vm, va=va, line=ln))

    gen_rows = []
    for row, ln in tables.get("gen", []):
        if len(row) >= 8:
            g = dict(bus=row[0], pg=row[1], qg=row[2], qmax=row[3], qmin=row[4], vsp=row[5], status=row[7])
        elif len(row) == 6:
            g = dict(bus=row[0], pg=row[1], qg=row[2], vsp=row[3], qmin=row[4], qmax=row[5], status=1)
        else:
            raise CaseParseError(f"gen row has {len(row)} columns, expected 6 or >= 8", ln)
        g["line"] = ln
        gen_rows.append(g)

    branch_rows = []
    for row, ln in tables.get("branch", []):
        if len(row) >= 11:
            f, t, r, x, b, ratio, shift, status = row[0], row[1], row[2], row[3], row[4], row[8], row[9], row[10]
        elif len(row) == 8:
            f, t, r, x, b, ratio, shift, status = row
        else:
            raise CaseParseError(f"branch row has {len(row)} columns, expected 8 or >= 11", ln)
        branch_rows.append(dict(f=f, t=t, r=r, x=x, b=b, tap=ratio, shift=shift, status=status, line=ln))

    return _build_case(base, bus_rows, gen_rows, branch_rows, name)


def case_from_json(data: dict, name: str = "") -> NetworkCase:
    try:
        base = float(data.get("base_mva", 100.0))
        buses = [
            dict(id=b["id"], type=b["type"], pd=b.get("pd", 0), qd=b.get("qd", 0), gs=b.get("gs", 0),
                 bs=b.get("bs", 0), vm=b.get("vm", 1.0), va=b.get("va", 0.0), line=None)
            for b in data["buses"]
        ]
        gens = [
            dict(bus=g["bus"], pg=g.get("pg", 0), qg=g.get("qg", 0), vsp=g.get("vsp", 1.0),
                 qmin=g.get("qmin", -math.inf), qmax=g.get("qmax", math.inf), status=g.get("status", 1), line=None)
            for g in data.get("generators", [])
        ]
        branches = [
            dict(f=br["from"], t=br["to"], r=br["r"], x=br["x"], b=br.get("b", 0), tap=br.get("tap", 0),
                 shift=br.get("shift", 0), status=br.get("status", 1), line=None)
            for br in data.get("branches", [])
        ]
        units = data.get("units", "mw").lower()
        if units not in ("mw", "pu"):
            raise CaseParseError(f"unknown units {units!r}, expected 'mw' or 'pu'")
    except (KeyError, TypeError, AttributeError) as exc:
        raise CaseParseError(f"malformed JSON case: {exc}") from None
    return _build_case(base, buses, gens, branches, name or data.get("name", ""),
                       power_base=1.0 if units == "pu" else None)


def _kind(code, line):
    if isinstance(code, str):
        if code.lower() in (SLACK, PV, PQ):
            return code.lower()
        raise CaseParseError(f"unknown bus type {code!r}", line)
    code = int(code)
    if code == 4:
        raise CaseValidationError(f"isolated bus type (4) is not supported (line {line})")
    if code not in _TYPE_CODES:
        raise CaseParseError(f"unknown bus type {code}", line)
    return _TYPE_CODES[code]


def _build_case(base, bus_rows, gen_rows, branch_rows, name, power_base=None) -> NetworkCase:
    if base <= 0:
        raise CaseValidationError("base MVA must be positive")
    pb = base if power_base is None else power_base
    ext_index = {}
    for k, row in enumerate(bus_rows):
        ext = int(row["id"])
        if ext in ext_index:
            raise CaseValidationError(f"duplicate bus id {ext} (line {row['line']})")
        ext_index[ext] = k

    gen_by_bus = {}
    for g in gen_rows:
        if not g["status"]:
            continue
        ext = int(g["bus"])
        if ext not in ext_index:
            raise CaseValidationError(f"generator at unknown bus {ext} (line {g['line']})")
        gen_by_bus.setdefault(ext, []).append(g)

    buses = []
    for k, row in enumerate(bus_rows):
        ext = int(row["id"])
        kind = _kind(row["type"], row["line"])
        gens = gen_by_bus.get(ext, [])
        if kind == PV and not gens:
            kind = PQ
        vsp = float(gens[0]["vsp"]) if gens and kind != PQ else float(row["vm"])
        if kind != PQ and vsp <= 0:
            raise CaseValidationError(f"bus {ext}: voltage setpoint must be positive")
        pg = sum(_to_pu(g["pg"], pb) for g in gens) if len(gens) != 1 else _to_pu(gens[0]["pg"], pb)
        qg = sum(_to_pu(g["qg"], pb) for g in gens) if len(gens) != 1 else _to_pu(gens[0]["qg"], pb)
        qmin = sum(_to_pu(g["qmin"], pb) for g in gens) if gens else -math.inf
        qmax = sum(_to_pu(g["qmax"], pb) for g in gens) if gens else math.inf
        buses.append(
            Bus(
                id=k,
                ext_id=ext,
                kind=kind,
                demand=complex(_to_pu(row["pd"], pb), _to_pu(row["qd"], pb)),
                generation=complex(pg, qg),
                shunt=complex(_to_pu(row["gs"], pb), _to_pu(row["bs"], pb)),
                voltage_setpoint=vsp,
                angle=float(row["va"]) if kind == SLACK else 0.0,
                q_min=qmin,
                q_max=qmax,
                has_generator=bool(gens),
            )
        )

    branches = []
    for row in branch_rows:
        f, t = int(row["f"]), int(row["t"])
        if f not in ext_index or t not in ext_index:
            raise CaseValidationError(f"branch {f}-{t} references an unknown bus (line {row['line']})")
        if f == t:
            raise CaseValidationError(f"branch {f}-{t} connects a bus to itself (line {row['line']})")
        branches.append(
            Branch(ext_index[f], ext_index[t], float(row["r"]), float(row["x"]), float(row["b"]),
                   float(row["tap"]), float(row["shift"]), bool(row["status"]))
        )

    case = NetworkCase(base_mva=base, buses=buses, branches=branches, name=name)
    validate_case(case)
    return case


def validate_case(case: NetworkCase) -> None:
    slacks = [b for b in case.buses if b.kind == SLACK]
    if len(slacks) != 1:
        raise CaseValidationError(f"case must have exactly one slack bus, found {len(slacks)}")
    if [b.id for b in case.buses] != list(range(case.n_bus)):
        raise CaseValidationError("bus ids must be contiguous 0..N-1")
    connected = np.zeros(case.n_bus, dtype=bool)
    for br in case.branches:
        if br.status:
            connected[br.from_bus] = connected[br.to_bus] = True
    if case.n_bus > 1 and not connected.all():
        ext = [case.buses[k].ext_id for k in np.flatnonzero(~connected)]
        raise CaseValidationError(f"isolated buses: {ext}")


def load_case(path) -> NetworkCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def builtin_case(name: str = "case118") -> NetworkCase:
    return load_case(Path(__file__).parent / "data" / f"{name}.m")


# ---------------------------------------------------------------------------
# serialization


def _bus_rows(case, base=None):
    base = case.base_mva if base is None else base
    for b in case.buses:
        va = b.angle if b.kind == SLACK else 0.0
        vm = b.voltage_setpoint
        yield [b.ext_id, _TYPE_NUMBERS[b.kind], _from_pu(b.demand.real, base), _from_pu(b.demand.imag, base),
               _from_pu(b.shunt.real, base), _from_pu(b.shunt.imag, base), vm, va]


def _gen_rows(case, base=None):
    base = case.base_mva if base is None else base
    for b in case.buses:
        if b.has_generator:
            yield [b.ext_id, _from_pu(b.generation.real, base), _from_pu(b.generation.imag, base),
                   b.voltage_setpoint, _from_pu(b.q_min, base) if math.isfinite(b.q_min) else b.q_min,
                   _from_pu(b.q_max, base) if math.isfinite(b.q_max) else b.q_max]


def _branch_rows(case):
    for br in case.branches:
        yield [case.buses[br.from_bus].ext_id, case.buses[br.to_bus].ext_id, br.r, br.x, br.b,
               br.ratio, br.shift, int(br.status)]


def case_to_matpower(case: NetworkCase) -> str:
    """Write the compact MATPOWER-style layout."""
    out = [f"function mpc = {case.name or 'case'}", "mpc.version = '2';",
           f"mpc.baseMVA = {_num(case.base_mva)};", "",
           "%% bus data", "%\tid\ttype\tPd\tQd\tGs\tBs\tVm\tVa", "mpc.bus = ["]
    out += ["\t" + "\t".join(_num(v) for v in row) + ";" for row in _bus_rows(case)]
    out += ["];", "", "%% generator data", "%\tbus\tPg\tQg\tVsp\tQmin\tQmax", "mpc.gen = ["]
    out += ["\t" + "\t".join(_num(v) for v in row) + ";" for row in _gen_rows(case)]
    out += ["];", "", "%% branch data", "%\tf\tt\tr\tx\tb\ttap\tshift\tstatus", "mpc.branch = ["]
    out += ["\t" + "\t".join(_num(v) for v in row) + ";" for row in _branch_rows(case)]
    out += ["];", ""]
    return "\n".join(out)


def _jnum(v):
    if isinstance(v, Decimal):
        return float(v)
    return v


def case_to_json(case: NetworkCase) -> str:
    """JSON form with powers in per unit, so every float survives the round trip."""

    def val(v):
        v = _jnum(v)
        if isinstance(v, float) and math.isinf(v):
            return None
        return v

    data = {
        "name": case.name,
        "base_mva": case.base_mva,
        "units": "pu",
        "buses": [dict(zip(("id", "type", "pd", "qd", "gs", "bs", "vm", "va"), row)) for row in _bus_rows(case, 1.0)],
        "generators": [dict(zip(("bus", "pg", "qg", "vsp", "qmin", "qmax"), row)) for row in _gen_rows(case, 1.0)],
        "branches": [dict(zip(("from", "to", "r", "x", "b", "tap", "shift", "status"), row))
                     for row in _branch_rows(case)],
    }
    for b in data["buses"]:
        b["type"] = _TYPE_CODES[b["type"]]
        for k in ("pd", "qd", "gs", "bs"):
            b[k] = val(b[k])
    for g in data["generators"]:
        for k in ("pg", "qg", "qmin", "qmax"):
            g[k] = val(g[k])
        if g["qmin"] is None:
            del g["qmin"]
        if g["qmax"] is None:
            del g["qmax"]
    return json.dumps(data, indent=1)


# ---------------------------------------------------------------------------
# admittance matrix


def branch_admittances(case: NetworkCase):
    """Per-branch pi-model terms (yff, yft, ytf, ytt) for in-service branches."""
    nb = len(case.branches)
    yff = np.zeros(nb, complex)
    yft = np.zeros(nb, complex)
    ytf = np.zeros(nb, complex)
    ytt = np.zeros(nb, complex)
    for k, br in enumerate(case.branches):
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            f, t = case.buses[br.from_bus].ext_id, case.buses[br.to_bus].ext_id
            raise SingularElementError(f"branch {f}-{t} has zero series impedance")
        ys = 1.0 / br.impedance
        tap = br.tap
        ytt[k] = ys + 0.5j * br.b
        yff[k] = ytt[k] / (tap * tap.conjugate()).real
        yft[k] = -ys / tap.conjugate()
        ytf[k] = -ys / tap
    return yff, yft, ytf, ytt


def build_ybus(case: NetworkCase) -> sp.csr_matrix:
    """Bus admittance matrix (branches plus bus shunts), sparse CSR."""
    n = case.n_bus
    yff, yft, ytf, ytt = branch_admittances(case)
    f = np.array([br.from_bus for br in case.branches], dtype=int)
    t = np.array([br.to_bus for br in case.branches], dtype=int)
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, [b.shunt for b in case.buses]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def branch_flow(case: NetworkCase, V, k: int, from_end: bool = True) -> complex:
    """Complex power entering branch ``k`` at one end (pi model, includes charging)."""
    yff, yft, ytf, ytt = (a[k] for a in branch_admittances(case))
    br = case.branches[k]
    vf, vt = V[br.from_bus], V[br.to_bus]
    if from_end:
        return vf * np.conj(yff * vf + yft * vt)
    return vt * np.conj(ytf * vf + ytt * vt)


def series_flow(case: NetworkCase, V, k: int, from_end: bool = True) -> complex:
    """``V_i conj((V_i - V_j) y_series)`` -- the flow quantity used by line-flow control."""
    br = case.branches[k]
    ys = 1.0 / br.impedance
    i, j = (br.from_bus, br.to_bus) if from_end else (br.to_bus, br.from_bus)
    return V[i] * np.conj((V[i] - V[j]) * ys)
