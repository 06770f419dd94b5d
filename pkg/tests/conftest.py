import math

import numpy as np
import pytest

from ffheflow.ffhe import Germ, SeriesState, assemble_system, order_rhs
from ffheflow.netmodel import PQ, PV, SLACK, Branch, Bus, NetworkCase, builtin_case
from ffheflow.statcom import StatcomSpec
from ffheflow.system import to_complex, to_real
from ffheflow.upfc import UpfcSpec

Y_SH = 50 - 50j


def small_case(n: int, rng, with_pv: bool = True) -> NetworkCase:
    """Chain-plus-chords test network: bus 0 slack, optional PV at the far end."""
    buses = []
    for k in range(n):
        if k == 0:
            kind = SLACK
        elif with_pv and n >= 5 and k == n - 1:
            kind = PV
        else:
            kind = PQ
        gen = kind != PQ
        buses.append(Bus(
            id=k, ext_id=k + 1, kind=kind,
            demand=0j if k == 0 else complex(rng.uniform(0, 0.4), rng.uniform(0, 0.15)),
            generation=complex(0.3, 0) if kind == PV else 0j,
            shunt=complex(0, rng.uniform(0, 0.05)) if k == 1 else 0j,
            voltage_setpoint=1.02 if gen else 1.0, angle=5.0 if kind == SLACK else 0.0,
            q_min=-math.inf, q_max=math.inf, has_generator=gen,
        ))
    branches = [Branch(k, k + 1, rng.uniform(0.005, 0.03), rng.uniform(0.05, 0.15), rng.uniform(0, 0.04),
                       1.0 if k == 0 else 0.0)
                for k in range(n - 1)]
    if n >= 4:
        branches.append(Branch(0, n - 1, 0.02, 0.12, 0.02))
    return NetworkCase(100.0, buses, branches, name=f"test{n}")


def statcom_for(mode: str, case: NetworkCase) -> StatcomSpec:
    sp = {"M1": 1.0, "M2": 1.02, "M3": 0.1, "M4": 0.05, "M5": -0.1}[mode]
    return StatcomSpec(bus=2, y_sh=Y_SH, mode=mode, setpoint=sp, line_to=1)


def upfc_for(case: NetworkCase, shunt_mode="M1", series=("P", "Q"), bus_i=3, bus_m=2) -> UpfcSpec:
    vals = {"P": 0.1, "Q": 0.02, "VSE": 0.05}
    kw = {f"{k.lower()}_setpoint": vals[k] for k in series}
    return UpfcSpec(bus_i=bus_i, bus_m=bus_m, y_sh=Y_SH, shunt_mode=shunt_mode,
                    shunt_setpoint=1.0 if shunt_mode == "M1" else 1.02, z_se=0.01 + 0.01j, **kw)


def random_germ(system, rng, spread=0.05) -> Germ:
    n = system.layout.n_nodes
    C = np.exp(1j * rng.uniform(-0.1, 0.1, n)) * (1 + spread * rng.uniform(-1, 1, n))
    nd = len(system.devices)
    C_sh = tuple(-1.0 + spread * complex(*rng.uniform(-1, 1, 2)) for _ in range(nd))
    D_se = tuple(0.1 + spread * complex(*rng.uniform(-1, 1, 2))
                 for d in system.devices if isinstance(d, UpfcSpec))
    return Germ(C, C_sh, D_se)


def operating_germ(case, devices, rng, k: int = 2, jitter: float = 1e-3) -> Germ:
    """Germ near a physical operating point: a perturbed k-step Newton state.

    UPFC voltage-magnitude series modes are degenerate at a flat start
    (``V_SE = 0``), so those systems are seeded from the same device with
    P/Q series control, as the limit loop does.
    """
    import dataclasses
    import warnings

    from ffheflow.ffhe import germ_from_state, germ_vector
    from ffheflow.nr import nr_seed
    from ffheflow.system import prepare_system

    seed_devs = []
    for d in devices:
        if isinstance(d, UpfcSpec) and d.vse_setpoint is not None:
            d = dataclasses.replace(d, p_setpoint=d.p_setpoint if d.p_setpoint is not None else 0.1,
                                    q_setpoint=d.q_setpoint if d.q_setpoint is not None else 0.02,
                                    vse_setpoint=None)
        seed_devs.append(d)
    seed_sys = prepare_system(case, seed_devs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        z = germ_vector(seed_sys, nr_seed(seed_sys, k=k))
    z = z * (1 + jitter * (rng.normal(size=z.size) + 1j * rng.normal(size=z.size)))
    return germ_from_state(prepare_system(case, devices), z)


def series_coefficients(system, germ, order: int) -> np.ndarray:
    """Coefficients ``Z[0..order]`` from the package recurrences."""
    emb = assemble_system(system, germ)
    state = SeriesState(system, order + 1)
    state.append(emb.z0)
    for n in range(1, order + 1):
        state.append(to_complex(emb.solve(order_rhs(system, state, n))))
    return state.coefficients.copy()


def finite_difference_jacobian(system, z0, h=1e-3):
    """Central differences with one Richardson step (error O(h**4))."""
    x0 = to_real(z0)

    def central(j, step):
        e = np.zeros_like(x0)
        e[j] = step
        return (system.values(to_complex(x0 + e)) - system.values(to_complex(x0 - e))) / (2 * step)

    cols = [(4 * central(j, h / 2) - central(j, h)) / 3 for j in range(len(x0))]
    return np.array(cols).T


@pytest.fixture(scope="session")
def case118():
    return builtin_case()


# ---------------------------------------------------------------------------
# acceptance recorder: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: dict = {}


class Checks:
    """Collects named tolerance checks under one acceptance criterion."""

    def __init__(self, criterion: str):
        self.items = ACCEPTANCE.setdefault(criterion, [])
        self.failed = []

    def close(self, label, got, want, tol) -> bool:
        err = abs(got - want)
        ok = bool(err <= tol)
        detail = f"{label}: got {got:.6g}, want {want:.6g}, err {err:.1e} > {tol:.0e}"
        self.items.append((ok, detail))
        if not ok:
            self.failed.append(detail)
        return ok

    def true(self, label, cond) -> bool:
        self.items.append((bool(cond), label))
        if not cond:
            self.failed.append(label)
        return bool(cond)

    def verify(self):
        assert not self.failed, "; ".join(self.failed)


@pytest.fixture
def checks():
    return Checks


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, items in ACCEPTANCE.items():
        bad = [d for ok, d in items if not ok]
        line = f"{'PASS' if not bad else 'FAIL'}  {name}  ({len(items) - len(bad)}/{len(items)} checks)"
        terminalreporter.write_line(line)
        for d in bad[:8]:
            terminalreporter.write_line(f"        {d}")
