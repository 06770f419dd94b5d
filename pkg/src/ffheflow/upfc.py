"""UPFC: a STATCOM-like shunt source plus a series current source on one line.

The line ``i - m`` is reconnected to an internal node ``m'``; the series
converter is the current ``I_SE`` leaving bus ``i`` and entering ``m'``,
in series with the coupling impedance ``z_se`` (added to the line).  The
injected series voltage is ``V_SE = V_m' - V_i``.

Unknowns: ``V_SH`` and ``I_SE``.  Equations:

* power exchange, ``Re(V_SE conj(I_SE)) + Re(V_SH conj((V_i + V_SH) y_SH)) = 0``;
* one shunt mode (M1 bus voltage or M2 source magnitude);
* two series modes out of ``P`` (``Re(V_i conj I_SE)``), ``Q``
  (``Im(V_i conj I_SE)``) and ``VSE`` (``|V_SE|``; used when the
  injected-voltage limit binds).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .statcom import normalize_mode, shunt_mode_equation, shunt_terms
from .system import IM, RE, BilinearEquation


@dataclass(frozen=True)
class UpfcSpec:
    """UPFC on the line ``bus_i - bus_m`` with its shunt side at ``bus_i``.

    Exactly two of ``p_setpoint``, ``q_setpoint`` and ``vse_setpoint`` must
    be given.
    """

    bus_i: int
    bus_m: int
    y_sh: complex
    shunt_mode: str
    shunt_setpoint: float
    p_setpoint: float | None = None
    q_setpoint: float | None = None
    vse_setpoint: float | None = None
    z_se: complex = 0j
    vsh_max: float = math.inf
    vse_max: float = math.inf
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shunt_mode", normalize_mode(self.shunt_mode))
        object.__setattr__(self, "y_sh", complex(self.y_sh))
        object.__setattr__(self, "z_se", complex(self.z_se))
        if self.y_sh == 0:
            raise ConfigurationError("UPFC shunt admittance must be nonzero")
        if self.bus_i == self.bus_m:
            raise ConfigurationError("UPFC needs two distinct buses")
        if self.shunt_mode not in ("M1", "M2"):
            raise ConfigurationError("UPFC shunt mode must be M1 (bus voltage) or M2 (source magnitude)")
        n_series = sum(v is not None for v in (self.p_setpoint, self.q_setpoint, self.vse_setpoint))
        if n_series != 2:
            raise ConfigurationError(f"UPFC needs three control targets in total, got {1 + n_series}")

    @property
    def label(self) -> str:
        return self.name or f"upfc@{self.bus_i}-{self.bus_m}"

    @property
    def series_modes(self) -> tuple:
        return tuple(k for k, v in (("P", self.p_setpoint), ("Q", self.q_setpoint), ("VSE", self.vse_setpoint))
                     if v is not None)


@dataclass(frozen=True)
class UpfcResult:
    label: str
    bus_i: int
    bus_m: int
    v_bus: complex
    v_sh: complex
    s_sh: complex
    b_eq: float
    v_se: complex
    i_se: complex
    s_se: complex
    x_eq: float
    line_flow: complex
    exchange_residual: float


def upfc_equations(spec: UpfcSpec, case, i: int, node: int, cols: dict):
    sh, se, y, lab = cols["vsh"], cols["ise"], spec.y_sh, spec.label
    vse = {node: 1.0, i: -1.0}
    exchange = BilinearEquation(f"{lab}:exchange", RE, [(1.0, vse, {se: 1.0}), shunt_terms(i, sh, y)], 0.0)
    eqs = [exchange, shunt_mode_equation(spec.shunt_mode, spec.shunt_setpoint, i, sh, y, lab)]
    if spec.p_setpoint is not None:
        eqs.append(BilinearEquation(f"{lab}:P", RE, [(1.0, {i: 1.0}, {se: 1.0})], spec.p_setpoint))
    if spec.q_setpoint is not None:
        eqs.append(BilinearEquation(f"{lab}:Q", IM, [(1.0, {i: 1.0}, {se: 1.0})], spec.q_setpoint))
    if spec.vse_setpoint is not None:
        eqs.append(BilinearEquation(f"{lab}:VSE", RE, [(0.5, vse, vse)], 0.5 * spec.vse_setpoint**2))
    kc = {(i, i): y, (i, sh): y, (i, se): 1.0, (node, se): -1.0}
    return eqs, kc


def _device_index(system, spec):
    for d, dev in enumerate(system.devices):
        if dev is spec:
            return d
    return system.devices.index(spec)


def _internal_node(system, d):
    return system.layout.n_bus + sum(
        1 for dev in system.devices[:d] if isinstance(dev, UpfcSpec)
    )


def _rows(system, spec):
    d = _device_index(system, spec)
    i = system.case.index_of(spec.bus_i)
    m = _internal_node(system, d)
    return [2 * i, 2 * i + 1, 2 * m, 2 * m + 1] + list(range(system.device_rows[d].start, system.device_rows[d].stop))


def upfc_rows(system, spec: UpfcSpec, germ) -> np.ndarray:
    """Dense real rows for buses ``i``, ``m'`` and the four device equations."""
    from .ffhe import germ_vector

    A = system.jacobian(germ_vector(system, germ)).tocsr()
    return A[_rows(system, spec)].toarray()


def upfc_rhs(n: int, Z, system, spec: UpfcSpec, germ) -> np.ndarray:
    from .ffhe import SeriesState, order_rhs

    state = Z if isinstance(Z, SeriesState) else SeriesState.from_coefficients(system, Z)
    return order_rhs(system, state, n)[_rows(system, spec)]


def upfc_recover(z, system, spec: UpfcSpec) -> UpfcResult:
    d = _device_index(system, spec)
    i = system.case.index_of(spec.bus_i)
    m = _internal_node(system, d)
    cols = system.layout.device_cols[d]
    vi, vm, vsh, ise = z[i], z[m], z[cols["vsh"]], z[cols["ise"]]
    y = spec.y_sh
    s_sh = vsh * np.conj((vi + vsh) * y)
    b_eq = ((vi + vsh) * y / vsh).imag if vsh != 0 else math.nan
    v_se = vm - vi
    s_se = v_se * np.conj(ise)
    x_eq = (v_se / ise).imag if ise != 0 else math.nan
    return UpfcResult(spec.label, spec.bus_i, spec.bus_m, complex(vi), complex(vsh), complex(s_sh), float(b_eq),
                      complex(v_se), complex(ise), complex(s_se), float(x_eq), complex(vi * np.conj(ise)),
                      float(s_se.real + s_sh.real))
