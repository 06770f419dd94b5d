"""Equation set shared by the embedded-series solver and Newton's method.

All unknowns are complex and collected in one vector ``z``::

    z = [V_0 .. V_{N-1}, V_aux .., device unknowns ..]

where auxiliary nodes are the internal nodes created by UPFC series
insertion.  Every real equation has the form ``f(z) = target`` with ``f``
a sum of terms ``part(s * (a.z) * conj(b.z))`` (a *bilinear* term), or the
special reciprocal form used by the equivalent-susceptance mode.

For a series ``z(alpha)`` every equation is embedded as::

    f(z(alpha)) = f(C) + alpha * (target - f(C))

so that the order-n coefficient equation is linear in ``z[n]`` with a
matrix equal to the Jacobian of ``f`` at the germ ``C``.

The real unknown vector interleaves ``(Re z_j, Im z_j)`` at ``(2j, 2j+1)``.
Node ``k`` owns equation rows ``2k, 2k+1``; device equations follow.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import pseries
from .errors import ConfigurationError, InvalidGermError
from .netmodel import PQ, PV, SLACK, Branch, Bus, NetworkCase, build_ybus

RE, IM = 0, 1


def _lin(coefs: dict) -> tuple:
    idx = np.fromiter(coefs.keys(), dtype=np.intp, count=len(coefs))
    val = np.fromiter(coefs.values(), dtype=np.complex128, count=len(coefs))
    return idx, val


class BilinearEquation:
    """``part(sum_t s_t (a_t . z) conj(b_t . z)) = target``.

    ``terms`` is a list of ``(s, a, b)`` with ``a``/``b`` given as
    ``{column: coefficient}`` dictionaries.
    """

    def __init__(self, name, part, terms, target):
        self.name = name
        self.part = part
        self.terms = [(complex(s), _lin(a), _lin(b)) for s, a, b in terms]
        self.target = float(target)

    @staticmethod
    def _dot(lin, z):
        idx, val = lin
        return z[..., idx] @ val

    def value(self, z) -> float:
        tot = 0j
        for s, a, b in self.terms:
            tot += s * self._dot(a, z) * np.conj(self._dot(b, z))
        return tot.imag if self.part == IM else tot.real

    def linearize(self, z0):
        """``(c1, c2)`` such that ``df = part(c1 . dz + c2 . conj(dz))``."""
        c1, c2 = {}, {}
        for s, a, b in self.terms:
            pa, qb = self._dot(a, z0), self._dot(b, z0)
            for j, v in zip(*a):
                c1[j] = c1.get(j, 0j) + s * np.conj(qb) * v
            for j, v in zip(*b):
                c2[j] = c2.get(j, 0j) + s * pa * np.conj(v)
        return c1, c2

    def convolution(self, Z, n) -> float:
        """``part`` of the known (d = 1..n-1) part of the order-n coefficient."""
        if n < 2:
            return 0.0
        tot = 0j
        for s, a, b in self.terms:
            P = self._dot(a, Z[:n])
            Q = self._dot(b, Z[:n])
            tot += s * pseries.cauchy_term_truncated(Q, P, n, conjugate_a=True)
        return tot.imag if self.part == IM else tot.real


class ReciprocalEquation:
    """``Im(y * V_i / V_s) = target``, embedded through ``W = 1/V_s``.

    ``W`` is carried as a reciprocal series, so the order-n coefficient of
    ``y V_i W`` stays linear in ``(V_i[n], V_s[n])``.
    """

    part = IM

    def __init__(self, name, col_i, col_s, y, target):
        self.name = name
        self.col_i = col_i
        self.col_s = col_s
        self.y = complex(y)
        self.target = float(target)

    def value(self, z) -> float:
        return (self.y * z[self.col_i] / z[self.col_s]).imag

    def linearize(self, z0):
        vi, vs = z0[self.col_i], z0[self.col_s]
        if vs == 0:
            raise InvalidGermError(f"{self.name}: shunt source germ must be nonzero")
        c1 = {self.col_i: self.y / vs}
        c1[self.col_s] = c1.get(self.col_s, 0j) - self.y * vi / vs**2
        return c1, {}

    def convolution(self, Z, n) -> float:
        if n < 2:
            return 0.0
        vi = np.ascontiguousarray(Z[:n, self.col_i])
        vs = np.ascontiguousarray(Z[:n, self.col_s])
        W = pseries.reciprocal_series(vs, n)
        known = pseries.cauchy_term_truncated(vi, W, n)
        # W[n] without its V_s[n] part
        w_rest = -W[0] * pseries.cauchy_term_truncated(W, vs, n)
        return (self.y * (known + vi[0] * w_rest)).imag


@dataclass
class Layout:
    """Column bookkeeping for the complex unknown vector."""

    n_bus: int
    n_nodes: int
    n_vars: int
    device_cols: list = field(default_factory=list)  # per device: dict name -> column


@dataclass
class PreparedSystem:
    """A network plus devices reduced to nodes, unknowns and equations."""

    case: NetworkCase  # original case
    node_case: NetworkCase  # with internal nodes and rerouted branches
    devices: tuple
    layout: Layout
    Y: sp.csr_matrix
    K: sp.csr_matrix  # node currents J = K z
    kinds: np.ndarray  # per node: 0 slack, 1 pv, 2 pq
    S: np.ndarray  # specified complex injections per node (pv: only real part used)
    Vsp: np.ndarray
    slack_target: complex
    slack: int
    equations: list  # device equations, in row order
    n_eq: int
    device_rows: list  # per device: slice of its rows in the real system

    @property
    def n_vars(self):
        return self.layout.n_vars

    def node_values(self, z, J=None):
        """Per node (first, second) equation values of the node rows."""
        n = self.layout.n_nodes
        V = z[:n]
        if J is None:
            J = self.K @ z
        Sc = V * np.conj(J)
        first = Sc.real.copy()
        second = Sc.imag.copy()
        pv = self.kinds == 1
        second[pv] = 0.5 * (V[pv] * np.conj(V[pv])).real
        s = self.slack
        first[s], second[s] = V[s].real, V[s].imag
        return first, second, Sc

    def node_targets(self):
        first = self.S.real.copy()
        second = self.S.imag.copy()
        pv = self.kinds == 1
        second[pv] = 0.5 * self.Vsp[pv] ** 2
        first[self.slack], second[self.slack] = self.slack_target.real, self.slack_target.imag
        return first, second

    def values(self, z) -> np.ndarray:
        """All real equation values in row order."""
        first, second, _ = self.node_values(z)
        out = np.empty(self.n_eq)
        out[0:2 * self.layout.n_nodes:2] = first
        out[1:2 * self.layout.n_nodes:2] = second
        for r, eq in enumerate(self.equations):
            out[2 * self.layout.n_nodes + r] = eq.value(z)
        return out

    def targets(self) -> np.ndarray:
        first, second = self.node_targets()
        out = np.empty(self.n_eq)
        out[0:2 * self.layout.n_nodes:2] = first
        out[1:2 * self.layout.n_nodes:2] = second
        for r, eq in enumerate(self.equations):
            out[2 * self.layout.n_nodes + r] = eq.target
        return out

    def residual(self, z) -> np.ndarray:
        return self.values(z) - self.targets()

    def _node_pattern(self):
        pat = getattr(self, "_pattern", None)
        if pat is None:
            n = self.layout.n_nodes
            Kc = self.K.tocoo()
            keep = Kc.row != self.slack
            kr, kc, kv = Kc.row[keep], Kc.col[keep], Kc.data[keep]
            pq_second = self.kinds[kr] == 2
            nodes = np.arange(n)
            pat = dict(kr=kr, kc=kc, kv=kv, pq_second=pq_second,
                       nonslack=nodes[nodes != self.slack], pq=np.flatnonzero(self.kinds == 2),
                       pv=np.flatnonzero(self.kinds == 1))
            self._pattern = pat
        return pat

    def jacobian(self, z0) -> sp.csc_matrix:
        """Real Jacobian of :meth:`values` at ``z0`` (interleaved layout)."""
        p = self._node_pattern()
        nz = self.layout.n_vars
        J0 = self.K @ z0
        V0 = z0[: self.layout.n_nodes]
        rows, cols, c1, c2, parts = [], [], [], [], []

        def add(r, c, a, b, part):
            rows.append(np.asarray(r, dtype=np.intp))
            cols.append(np.asarray(c, dtype=np.intp))
            c1.append(np.asarray(a, dtype=complex))
            c2.append(np.asarray(b, dtype=complex))
            parts.append(np.full(len(rows[-1]), part))

        kr, kc, kv = p["kr"], p["kc"], p["kv"]
        zero_k = np.zeros(len(kr), complex)
        # Re/Im(V_k conj(J_k)): d/dV_k -> conj(J_k); d/dconj(z) -> V_k conj(K)
        add(2 * kr, kc, zero_k, V0[kr] * np.conj(kv), RE)
        ns = p["nonslack"]
        add(2 * ns, ns, np.conj(J0[ns]), np.zeros(len(ns)), RE)
        sel = p["pq_second"]
        add(2 * kr[sel] + 1, kc[sel], zero_k[sel], V0[kr[sel]] * np.conj(kv[sel]), IM)
        pq = p["pq"]
        add(2 * pq + 1, pq, np.conj(J0[pq]), np.zeros(len(pq)), IM)
        pv = p["pv"]
        add(2 * pv + 1, pv, 0.5 * np.conj(V0[pv]), 0.5 * V0[pv], RE)
        s = self.slack
        add([2 * s, 2 * s + 1], [s, s], [1.0, 1.0], [0.0, 0.0], RE)
        parts[-1][1] = IM
        base = 2 * self.layout.n_nodes
        for r, eq in enumerate(self.equations):
            d1, d2 = eq.linearize(z0)
            keys = sorted(set(d1) | set(d2))
            add([base + r] * len(keys), keys, [d1.get(k, 0j) for k in keys], [d2.get(k, 0j) for k in keys], eq.part)
        return _real_rows(np.concatenate(rows), np.concatenate(cols), np.concatenate(c1), np.concatenate(c2),
                          np.concatenate(parts), self.n_eq, nz)


def _real_rows(r, c, c1, c2, part, n_rows, nz) -> sp.csc_matrix:
    """Real matrix of ``part(c1 x + c2 conj(x))`` entries in interleaved columns."""
    im = part == IM
    xr = np.where(im, c1.imag + c2.imag, c1.real + c2.real)
    xi = np.where(im, c1.real - c2.real, c2.imag - c1.imag)
    data = np.concatenate([xr, xi])
    rr = np.concatenate([r, r])
    cc = np.concatenate([2 * c, 2 * c + 1])
    return sp.csc_matrix((data, (rr, cc)), shape=(n_rows, 2 * nz))


def to_real(z) -> np.ndarray:
    x = np.empty(2 * len(z))
    x[0::2] = z.real
    x[1::2] = z.imag
    return x


def to_complex(x) -> np.ndarray:
    return x[0::2] + 1j * x[1::2]


# ---------------------------------------------------------------------------


def _insert_series_nodes(case: NetworkCase, devices):
    """Add one internal node per UPFC and reroute its line through it."""
    from .upfc import UpfcSpec

    buses = list(case.buses)
    branches = list(case.branches)
    next_ext = max(b.ext_id for b in case.buses) + 1
    aux = []
    for dev in devices:
        if not isinstance(dev, UpfcSpec):
            aux.append(None)
            continue
        i, m = case.index_of(dev.bus_i), case.index_of(dev.bus_m)
        try:
            k = case.find_branch(dev.bus_i, dev.bus_m)
        except Exception:
            raise ConfigurationError(f"UPFC {dev.bus_i}-{dev.bus_m}: no in-service line between the buses") from None
        node = len(buses)
        buses.append(Bus(id=node, ext_id=next_ext, kind=PQ))
        next_ext += 1
        br = branches[k]
        z = br.impedance + dev.z_se
        if br.from_bus == i:
            branches[k] = dataclasses.replace(br, from_bus=node, r=z.real, x=z.imag)
        else:
            branches[k] = dataclasses.replace(br, to_bus=node, r=z.real, x=z.imag)
        aux.append((i, m, node, k))
    node_case = NetworkCase(base_mva=case.base_mva, buses=buses, branches=branches, name=case.name)
    return node_case, aux


def prepare_system(case: NetworkCase, devices=()) -> PreparedSystem:
    """Reduce a case and device list to the unknown/equation structure."""
    from .statcom import StatcomSpec, statcom_equations
    from .upfc import UpfcSpec, upfc_equations

    devices = tuple(devices)
    node_case, aux = _insert_series_nodes(case, devices)
    n = node_case.n_bus
    Y = build_ybus(node_case)

    cols = []
    nv = n
    for dev in devices:
        if isinstance(dev, StatcomSpec):
            cols.append({"vsh": nv})
            nv += 1
        elif isinstance(dev, UpfcSpec):
            cols.append({"vsh": nv, "ise": nv + 1})
            nv += 2
        else:
            raise ConfigurationError(f"unsupported device {dev!r}")
    layout = Layout(n_bus=case.n_bus, n_nodes=n, n_vars=nv, device_cols=cols)

    kinds = np.array([{SLACK: 0, PV: 1, PQ: 2}[b.kind] for b in node_case.buses])
    S = np.array([b.injection for b in node_case.buses], dtype=complex)
    Vsp = np.array([b.voltage_setpoint for b in node_case.buses])
    slack = node_case.slack
    sb = node_case.buses[slack]
    slack_target = sb.voltage_setpoint * np.exp(1j * np.deg2rad(sb.angle))

    K = sp.lil_matrix((n, nv), dtype=complex)
    K[:, :n] = Y
    equations = []
    device_rows = []
    used = set()
    for d, dev in enumerate(devices):
        if isinstance(dev, StatcomSpec):
            i = case.index_of(dev.bus)
            host = node_case.buses[i]
            if host.kind != PQ:
                raise ConfigurationError(f"STATCOM host bus {dev.bus} must be a load bus")
            eqs, kcontrib = statcom_equations(dev, case, i, cols[d])
        else:
            i, m, node, k = aux[d]
            if node_case.buses[i].kind != PQ:
                raise ConfigurationError(f"UPFC shunt bus {dev.bus_i} must be a load bus")
            eqs, kcontrib = upfc_equations(dev, case, i, node, cols[d])
        if i in used:
            raise ConfigurationError(f"more than one device at bus {case.buses[i].ext_id}")
        used.add(i)
        for (r, c), v in kcontrib.items():
            K[r, c] += v
        start = 2 * n + len(equations)
        device_rows.append(slice(start, start + len(eqs)))
        equations.extend(eqs)

    return PreparedSystem(
        case=case, node_case=node_case, devices=devices, layout=layout, Y=Y, K=K.tocsr(),
        kinds=kinds, S=S, Vsp=Vsp, slack_target=complex(slack_target), slack=slack,
        equations=equations, n_eq=2 * n + len(equations), device_rows=device_rows,
    )


def replace_buses(case: NetworkCase, updates: dict) -> NetworkCase:
    """Copy of ``case`` with selected buses replaced (``{index: Bus}``)."""
    buses = [updates.get(b.id, b) for b in case.buses]
    return case.with_buses(buses)


__all__ = [
    "BilinearEquation", "ReciprocalEquation", "PreparedSystem", "Layout", "prepare_system",
    "to_real", "to_complex", "replace_buses", "RE", "IM", "Branch",
]
