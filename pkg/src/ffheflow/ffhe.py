"""Embedded power-series solver with an adjustable germ.

Each unknown is expanded as ``z(alpha) = sum_n z[n] alpha**n`` with
``z[0]`` equal to the germ.  Because every equation is embedded as
``f(z(alpha)) = f(C) + alpha (target - f(C))``, the coefficients satisfy::

    A z[n] = B[n],    A = df/dz at the germ,
    B[n] = delta_{n,1} (target - f(C)) - sum_{d=1}^{n-1} (known products)

``A`` is factorized once and reused for every order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import pseries
from .errors import ConfigurationError, InvalidGermError, SingularSystemError
from .netmodel import branch_flow, series_flow
from .statcom import StatcomSpec, statcom_recover
from .system import PreparedSystem, prepare_system, to_complex
from .upfc import UpfcSpec, upfc_recover

FLAT_BUS = 1.0 + 0j
FLAT_SHUNT = -1.0 + 0j
FLAT_SERIES = 0.1 + 0j
ZERO_PERTURBATION = 1e-6


@dataclass(frozen=True)
class Germ:
    """Order-0 state.

    ``C`` covers every node (case buses first, then internal series nodes),
    ``C_sh`` one entry per device, ``D_se`` one entry per UPFC.
    """

    C: np.ndarray
    C_sh: tuple = ()
    D_se: tuple = ()
    perturbed: tuple = ()  # names of constants moved off zero


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-8
    max_terms: int = 60
    germ: object = "nr:3"
    eval_method: str = "partial_sum"
    divergence_window: int = 5

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if self.max_terms < 2:
            raise ConfigurationError("max_terms must be at least 2")
        if self.eval_method not in ("partial_sum", "sum", "pade"):
            raise ConfigurationError(f"unknown evaluation method {self.eval_method!r}")


@dataclass
class SolveReport:
    solver: str
    status: str
    V: np.ndarray  # case buses
    z: np.ndarray  # full complex state
    devices: list
    terms_used: int
    iterations: int
    mismatch_history: list
    bus_mismatch: float
    device_residual: float
    wall_time: float
    system: PreparedSystem = field(repr=False)
    germ: Germ | None = field(default=None, repr=False)
    eval_method: str = "partial_sum"
    events: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def mismatch(self) -> float:
        return max(self.bus_mismatch, self.device_residual)

    def voltage(self, ext_id: int) -> complex:
        return complex(self.V[self.system.case.index_of(ext_id)])

    def _series_device_flow(self, a, b):
        """Flow on a line carrying a UPFC, or ``None``."""
        nc = self.system.node_case
        aux = self.system.layout.n_bus
        for dev, res in zip(self.system.devices, self.devices):
            if not isinstance(dev, UpfcSpec):
                continue
            node = aux
            aux += 1
            if (dev.bus_i, dev.bus_m) == (a, b):
                return res.line_flow
            if (dev.bus_m, dev.bus_i) == (a, b):
                # from the far end: the rerouted line towards the internal node
                return nc, nc.find_branch(a, nc.buses[node].ext_id), a
        return None

    def _flow(self, a, b, fn):
        nc = self.system.node_case
        dev = self._series_device_flow(a, b)
        if isinstance(dev, complex):
            return dev
        if dev is not None:
            nc, k, a = dev
        else:
            k = nc.find_branch(a, b)
        return complex(fn(nc, self.z, k, from_end=nc.branches[k].from_bus == nc.index_of(a)))

    def branch_flow(self, a: int, b: int) -> complex:
        """Pi-model complex power leaving bus ``a`` towards ``b``.

        On a UPFC line the flow at the shunt end is ``V_i conj(I_SE)``.
        """
        return self._flow(a, b, branch_flow)

    def series_flow(self, a: int, b: int) -> complex:
        """``V_a conj((V_a - V_b) y_series)`` for the line ``a - b``."""
        return self._flow(a, b, series_flow)

    def device(self, label_or_index):
        if isinstance(label_or_index, int):
            return self.devices[label_or_index]
        return next(d for d in self.devices if d.label == label_or_index)


# ---------------------------------------------------------------------------
# germs


def flat_germ(system: PreparedSystem) -> Germ:
    nd = len(system.devices)
    nu = sum(isinstance(d, UpfcSpec) for d in system.devices)
    return Germ(np.full(system.layout.n_nodes, FLAT_BUS), (FLAT_SHUNT,) * nd, (FLAT_SERIES,) * nu)


def germ_from_state(system: PreparedSystem, z) -> Germ:
    """Germ taken from a full state vector; zero constants are nudged off zero."""
    z = np.array(z, dtype=complex)
    n = system.layout.n_nodes
    if len(z) != system.n_vars:
        raise ConfigurationError(f"state has {len(z)} entries, system needs {system.n_vars}")
    perturbed = []
    bad = np.flatnonzero(z == 0)
    for j in bad:
        z[j] = ZERO_PERTURBATION
        perturbed.append(_var_name(system, j))
    cols = system.layout.device_cols
    C_sh = tuple(complex(z[c["vsh"]]) for c in cols)
    D_se = tuple(complex(z[c["ise"]]) for c in cols if "ise" in c)
    return Germ(z[:n].copy(), C_sh, D_se, tuple(perturbed))


def _var_name(system, j):
    n = system.layout.n_nodes
    if j < n:
        return f"C[{system.node_case.buses[j].ext_id}]"
    for d, c in enumerate(system.layout.device_cols):
        for k, v in c.items():
            if v == j:
                return f"{system.devices[d].label}:{k}"
    return f"z[{j}]"


def germ_vector(system: PreparedSystem, germ: Germ) -> np.ndarray:
    z = np.empty(system.n_vars, dtype=complex)
    n = system.layout.n_nodes
    C = np.asarray(germ.C, dtype=complex)
    if len(C) == system.layout.n_bus and n > len(C):
        # internal series nodes start at their shunt bus value
        extra = []
        for dev in system.devices:
            if isinstance(dev, UpfcSpec):
                extra.append(C[system.case.index_of(dev.bus_i)])
        C = np.concatenate([C, extra])
    if len(C) != n:
        raise ConfigurationError(f"germ has {len(C)} bus constants, system has {n} nodes")
    z[:n] = C
    cols = system.layout.device_cols
    if len(germ.C_sh) != len(cols):
        raise ConfigurationError("germ needs one shunt constant per device")
    u = 0
    for d, c in enumerate(cols):
        z[c["vsh"]] = germ.C_sh[d]
        if "ise" in c:
            z[c["ise"]] = germ.D_se[u]
            u += 1
    if np.any(z == 0):
        raise InvalidGermError(f"germ constant {_var_name(system, int(np.flatnonzero(z == 0)[0]))} is zero")
    return z


def make_germ(case_or_system, devices=(), strategy="flat") -> Germ:
    """Germ for a case: ``"flat"``, ``"nr:K"`` / ``("nr", K)``, a :class:`Germ`, or a state vector."""
    system = case_or_system if isinstance(case_or_system, PreparedSystem) else prepare_system(case_or_system, devices)
    if isinstance(strategy, Germ):
        germ_vector(system, strategy)
        return strategy
    if isinstance(strategy, np.ndarray):
        return germ_from_state(system, strategy)
    k = _nr_iterations(strategy)
    if k == 0:
        return flat_germ(system)
    from .nr import nr_seed

    return nr_seed(system, k=k)


def _nr_iterations(strategy) -> int:
    if strategy in (None, "flat"):
        return 0
    if isinstance(strategy, tuple) and strategy[0] in ("nr", "nr_seeded"):
        return int(strategy[1])
    if isinstance(strategy, str) and strategy.startswith("nr"):
        _, _, k = strategy.partition(":")
        return int(k) if k else 3
    raise ConfigurationError(f"unknown germ strategy {strategy!r}")


# ---------------------------------------------------------------------------
# linear system and right-hand sides


@dataclass
class EmbeddedSystem:
    A: object  # scipy sparse, csc
    lu: object
    z0: np.ndarray
    f0: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def solve(self, b):
        return self.lu.solve(b)


def _row_blocks(system):
    n = system.layout.n_nodes
    blocks = [(f"bus {system.node_case.buses[k].ext_id}", [2 * k, 2 * k + 1]) for k in range(n)]
    for d, sl in enumerate(system.device_rows):
        blocks.append((system.devices[d].label, list(range(sl.start, sl.stop))))
    return blocks


def _first_dependent_block(system, A) -> str:
    dense = A.toarray()
    rows = []
    for name, idx in _row_blocks(system):
        rows.extend(idx)
        if np.linalg.matrix_rank(dense[rows]) < len(rows):
            return name
    return "unknown"


def factorize(system: PreparedSystem, A, context: str = ""):
    try:
        lu = spla.splu(A.tocsc())
    except RuntimeError:
        lu = None
    if lu is not None:
        d = np.abs(lu.U.diagonal())
        if d.size and d.min() > 1e-13 * max(d.max(), 1.0):
            return lu
    block = _first_dependent_block(system, A)
    raise SingularSystemError(f"{context}singular linear system; first dependent rows: {block}", block=block)


def assemble_system(system: PreparedSystem, germ: Germ) -> EmbeddedSystem:
    """Matrix of the order-n equations at ``germ``, factorized once."""
    z0 = germ_vector(system, germ)
    A = system.jacobian(z0)
    lu = factorize(system, A)
    return EmbeddedSystem(A, lu, z0, system.values(z0), system.targets())


class SeriesState:
    """Coefficient storage: ``Z[n]`` for all unknowns and ``J[n] = K Z[n]``."""

    def __init__(self, system: PreparedSystem, capacity: int):
        self.system = system
        self.Z = np.zeros((capacity, system.n_vars), dtype=complex)
        self.J = np.zeros((capacity, system.layout.n_nodes), dtype=complex)
        self.n = 0
        self.f0 = None
        self.targets = system.targets()

    def append(self, z):
        if self.n == len(self.Z):
            self.Z = np.vstack([self.Z, np.zeros_like(self.Z)])
            self.J = np.vstack([self.J, np.zeros_like(self.J)])
        self.Z[self.n] = z
        self.J[self.n] = self.system.K @ z
        if self.n == 0:
            self.f0 = self.system.values(z)
        self.n += 1

    @classmethod
    def from_coefficients(cls, system, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=complex))
        st = cls(system, len(Z))
        for z in Z:
            st.append(z)
        return st

    @property
    def coefficients(self) -> np.ndarray:
        return self.Z[: self.n]


def rhs_base(n: int, state: SeriesState, system: PreparedSystem) -> np.ndarray:
    """Node-row entries (slack, PV, PQ) of the order-n right-hand side."""
    if state.n < n:
        raise IndexError(f"order {n} needs coefficients through {n - 1}, have {state.n}")
    nn = system.layout.n_nodes
    eta = 1.0 if n == 1 else 0.0
    b = eta * (state.targets[: 2 * nn] - state.f0[: 2 * nn])
    if n >= 2:
        V = state.Z[:n, :nn]
        pbe = pseries.conv_columns(state.J[:n], V, n, True)  # sum conj(J[d]) V[n-d]
        first = pbe.real
        second = pbe.imag.copy()
        pv = system.kinds == 1
        if pv.any():
            second[pv] = 0.5 * pseries.conv_columns(V[:, pv], V[:, pv], n, True).real
        first[system.slack] = 0.0
        second[system.slack] = 0.0
        b[0::2] -= first
        b[1::2] -= second
    return b


def order_rhs(system: PreparedSystem, state: SeriesState, n: int) -> np.ndarray:
    """Full right-hand side at order ``n`` (node rows then device rows)."""
    nn = system.layout.n_nodes
    b = np.empty(system.n_eq)
    b[: 2 * nn] = rhs_base(n, state, system)
    eta = 1.0 if n == 1 else 0.0
    for r, eq in enumerate(system.equations):
        row = 2 * nn + r
        b[row] = eta * (state.targets[row] - state.f0[row]) - eq.convolution(state.Z, n)
    return b


# ---------------------------------------------------------------------------
# mismatch


def compute_mismatch(system: PreparedSystem, z) -> float:
    """Largest bus residual: ``|dS|`` at load buses, ``max(|dP|, |d|V||)`` at
    generator buses and ``|V - V_sp|`` at the slack."""
    n = system.layout.n_nodes
    z = np.asarray(z, dtype=complex)
    V = z[:n]
    Sc = V * np.conj(system.K @ z)
    err = np.abs(Sc - system.S)
    pv = system.kinds == 1
    err[pv] = np.maximum(np.abs(Sc[pv].real - system.S[pv].real), np.abs(np.abs(V[pv]) - system.Vsp[pv]))
    err[system.slack] = abs(V[system.slack] - system.slack_target)
    return float(err.max()) if n else 0.0


def device_residuals(system: PreparedSystem, z) -> np.ndarray:
    nn = system.layout.n_nodes
    t = system.targets()[2 * nn:]
    return np.array([eq.value(z) for eq in system.equations]) - t


def _device_mismatch(system, z) -> float:
    r = device_residuals(system, z)
    return float(np.abs(r).max()) if r.size else 0.0


def recover_devices(system: PreparedSystem, z) -> list:
    out = []
    for dev in system.devices:
        if isinstance(dev, StatcomSpec):
            out.append(statcom_recover(z, system, dev))
        else:
            out.append(upfc_recover(z, system, dev))
    return out


def build_report(solver, status, system, z, history, t0, *, terms=0, iterations=0, germ=None,
                 eval_method="partial_sum", notes=()) -> SolveReport:
    z = np.asarray(z, dtype=complex)
    return SolveReport(
        solver=solver, status=status, V=z[: system.layout.n_bus].copy(), z=z, devices=recover_devices(system, z),
        terms_used=terms, iterations=iterations, mismatch_history=list(history),
        bus_mismatch=compute_mismatch(system, z), device_residual=_device_mismatch(system, z),
        wall_time=time.perf_counter() - t0, system=system, germ=germ, eval_method=eval_method, notes=list(notes),
    )


# ---------------------------------------------------------------------------


def solve_ffhe(case, devices=(), germ=None, options: SolveOptions | None = None) -> SolveReport:
    """Solve the power flow by the germ-embedded power series.

    Parameters
    ----------
    case : NetworkCase or PreparedSystem
    devices : sequence of StatcomSpec / UpfcSpec
        Ignored when ``case`` is already a prepared system.
    germ : Germ, state vector, or strategy string; defaults to ``options.germ``.
    options : SolveOptions

    Returns
    -------
    SolveReport
        ``status`` is ``"converged"`` or ``"diverged"``; ``terms_used``
        counts coefficients including order 0.
    """
    options = options or SolveOptions()
    t0 = time.perf_counter()
    system = case if isinstance(case, PreparedSystem) else prepare_system(case, devices)
    germ = make_germ(system, strategy=options.germ if germ is None else germ)
    emb = assemble_system(system, germ)

    state = SeriesState(system, options.max_terms)
    state.append(emb.z0)
    tol = options.tolerance
    method = "pade" if options.eval_method == "pade" else "partial_sum"
    notes = [f"germ constant perturbed: {p}" for p in germ.perturbed]

    z = emb.z0.copy()
    mis = max(compute_mismatch(system, z), _device_mismatch(system, z))
    history = [mis]
    norms = [float(np.abs(emb.z0).max())]
    status = "converged" if mis <= tol else "diverged"
    growth = 0
    while status != "converged" and state.n < options.max_terms:
        n = state.n
        x = emb.solve(order_rhs(system, state, n))
        zn = to_complex(x)
        state.append(zn)
        norms.append(float(np.abs(zn).max()))
        if method == "pade" and n >= 2:
            z_try = pseries.evaluate_columns(state.coefficients, "pade")
            if not np.all(np.isfinite(z_try)):
                z_try = state.coefficients.sum(axis=0)
            z = z_try
        else:
            z = z + zn
        mis = max(compute_mismatch(system, z), _device_mismatch(system, z))
        history.append(mis)
        if mis <= tol:
            status = "converged"
            break
        if not np.isfinite(mis):
            notes.append(f"non-finite state at order {n}")
            break
        growth = growth + 1 if norms[-1] > norms[-2] and history[-1] > history[-2] else 0
        if method == "partial_sum" and growth >= options.divergence_window:
            notes.append(f"coefficients grew for {growth} consecutive orders (stopped at order {n})")
            break
    report = build_report("ffhe", status, system, z, history, t0, terms=state.n, germ=germ,
                          eval_method=method, notes=notes)
    report.coefficients = state.coefficients.copy()
    return report


__all__ = [
    "Germ", "SolveOptions", "SolveReport", "EmbeddedSystem", "SeriesState", "flat_germ", "germ_from_state",
    "germ_vector", "make_germ", "assemble_system", "rhs_base", "order_rhs", "compute_mismatch",
    "device_residuals", "solve_ffhe",
]
