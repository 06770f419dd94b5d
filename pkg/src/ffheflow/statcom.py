"""STATCOM: shunt voltage source ``V_SH`` behind a coupling admittance ``y_SH``.

The device current injected at the host bus ``i`` is ``(V_i + V_SH) y_SH``.
One complex unknown (``V_SH``) is closed by two real equations:

* zero active power, ``Re(V_SH conj((V_i + V_SH) y_SH)) = 0``;
* one control mode:

  ==  ==================  =============================================
  M1  bus voltage         ``|V_i| = V_sp``
  M2  source magnitude    ``|V_SH| = V_sp``
  M3  injected Q          ``Im(V_SH conj((V_i + V_SH) y_SH)) = Q_sp``
  M4  line Q flow         ``Im(V_i conj((V_i - V_j) y_ij)) = Q_sp``
  M5  susceptance         ``Im((V_i + V_SH) y_SH / V_SH) = b_sp``
  ==  ==================  =============================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .system import IM, RE, BilinearEquation, ReciprocalEquation

MODE_ALIASES = {
    "M1": "M1", "bus_voltage": "M1", "v_bus": "M1",
    "M2": "M2", "vsh_magnitude": "M2", "v_sh": "M2",
    "M3": "M3", "q_injected": "M3", "q_sh": "M3",
    "M4": "M4", "q_line_flow": "M4", "q_line": "M4",
    "M5": "M5", "b_eq": "M5", "susceptance": "M5",
}


def normalize_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[str(mode).strip()]
    except KeyError:
        raise ConfigurationError(f"unknown STATCOM mode {mode!r}") from None


@dataclass(frozen=True)
class StatcomSpec:
    """STATCOM placement and control.

    ``line_to`` names the far end of the monitored line (external id); it is
    required by mode M4 and used for reporting otherwise.
    """

    bus: int
    y_sh: complex
    mode: str
    setpoint: float
    line_to: int | None = None
    vsh_max: float = math.inf
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "y_sh", complex(self.y_sh))
        if self.y_sh == 0:
            raise ConfigurationError("STATCOM coupling admittance must be nonzero")
        if self.mode == "M4" and self.line_to is None:
            raise ConfigurationError("mode M4 needs the monitored line (line_to)")
        if self.mode in ("M1", "M2") and self.setpoint <= 0:
            raise ConfigurationError("magnitude setpoints must be positive")

    @property
    def label(self) -> str:
        return self.name or f"statcom@{self.bus}"


@dataclass(frozen=True)
class StatcomResult:
    label: str
    bus: int
    v_bus: complex
    v_sh: complex
    s_sh: complex
    b_eq: float
    line_flow: complex | None
    active_residual: float
    mode: str
    setpoint: float
    achieved: float


def series_admittance(case, i: int, j: int) -> complex:
    """Series admittance of the line joining internal buses ``i`` and ``j``."""
    k = case.find_branch(case.buses[i].ext_id, case.buses[j].ext_id)
    return 1.0 / case.branches[k].impedance


def shunt_terms(col_i, col_sh, y):
    """``V_SH conj((V_i + V_SH) y)`` as a bilinear term."""
    return (1.0, {col_sh: 1.0}, {col_i: y, col_sh: y})


def shunt_mode_equation(mode, setpoint, col_i, col_sh, y, label):
    if mode == "M1":
        return BilinearEquation(f"{label}:M1", RE, [(0.5, {col_i: 1.0}, {col_i: 1.0})], 0.5 * setpoint**2)
    if mode == "M2":
        return BilinearEquation(f"{label}:M2", RE, [(0.5, {col_sh: 1.0}, {col_sh: 1.0})], 0.5 * setpoint**2)
    raise ConfigurationError(f"{label}: shunt mode must be M1 or M2, got {mode}")


def statcom_equations(spec: StatcomSpec, case, i: int, cols: dict):
    """Device equations and node-current contributions for one STATCOM."""
    sh, y, lab = cols["vsh"], spec.y_sh, spec.label
    eqs = [BilinearEquation(f"{lab}:P=0", RE, [shunt_terms(i, sh, y)], 0.0)]
    if spec.mode in ("M1", "M2"):
        eqs.append(shunt_mode_equation(spec.mode, spec.setpoint, i, sh, y, lab))
    elif spec.mode == "M3":
        eqs.append(BilinearEquation(f"{lab}:M3", IM, [shunt_terms(i, sh, y)], spec.setpoint))
    elif spec.mode == "M4":
        j = case.index_of(spec.line_to)
        yl = series_admittance(case, i, j)
        eqs.append(BilinearEquation(f"{lab}:M4", IM, [(1.0, {i: 1.0}, {i: yl, j: -yl})], spec.setpoint))
    else:
        eqs.append(ReciprocalEquation(f"{lab}:M5", i, sh, y, spec.setpoint - y.imag))
    return eqs, {(i, i): y, (i, sh): y}


def _device_index(system, spec):
    for d, dev in enumerate(system.devices):
        if dev is spec:
            return d
    return system.devices.index(spec)


def statcom_rows(system, spec: StatcomSpec, germ) -> np.ndarray:
    """Dense real rows: host-bus pair, constraint row, mode row (4 x 2*n_vars)."""
    from .ffhe import germ_vector

    d = _device_index(system, spec)
    i = system.case.index_of(spec.bus)
    A = system.jacobian(germ_vector(system, germ)).tocsr()
    rows = [2 * i, 2 * i + 1] + list(range(system.device_rows[d].start, system.device_rows[d].stop))
    return A[rows].toarray()


def statcom_rhs(n: int, Z, system, spec: StatcomSpec, germ) -> np.ndarray:
    """RHS entries at order ``n`` for the host bus pair and the device rows."""
    from .ffhe import SeriesState, order_rhs

    d = _device_index(system, spec)
    i = system.case.index_of(spec.bus)
    state = Z if isinstance(Z, SeriesState) else SeriesState.from_coefficients(system, Z)
    b = order_rhs(system, state, n)
    rows = [2 * i, 2 * i + 1] + list(range(system.device_rows[d].start, system.device_rows[d].stop))
    return b[rows]


def statcom_recover(z, system, spec: StatcomSpec) -> StatcomResult:
    """Device quantities from a solved state vector ``z``."""
    d = _device_index(system, spec)
    i = system.case.index_of(spec.bus)
    vi, vsh = z[i], z[system.layout.device_cols[d]["vsh"]]
    y = spec.y_sh
    s_sh = vsh * np.conj((vi + vsh) * y)
    b_eq = ((vi + vsh) * y / vsh).imag if vsh != 0 else math.nan
    flow = None
    if spec.line_to is not None:
        j = system.case.index_of(spec.line_to)
        flow = complex(vi * np.conj((vi - z[j]) * series_admittance(system.case, i, j)))
    achieved = {
        "M1": abs(vi), "M2": abs(vsh), "M3": s_sh.imag,
        "M4": flow.imag if flow is not None else math.nan, "M5": b_eq,
    }[spec.mode]
    return StatcomResult(spec.label, spec.bus, complex(vi), complex(vsh), complex(s_sh), float(b_eq), flow,
                         float(s_sh.real), spec.mode, float(spec.setpoint), float(achieved))
