"""Newton-Raphson in rectangular coordinates on the same unknowns and equations."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, SingularSystemError
from .ffhe import build_report, compute_mismatch, device_residuals, factorize, flat_germ, germ_from_state, germ_vector
from .system import PreparedSystem, prepare_system, to_complex


@dataclass(frozen=True)
class NROptions:
    tolerance: float = 1e-8
    max_iter: int = 30

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")


def _mismatch(system, z):
    r = device_residuals(system, z)
    return max(compute_mismatch(system, z), float(np.abs(r).max()) if r.size else 0.0)


def newton_steps(system: PreparedSystem, z0, max_iter: int, tol: float | None = None):
    """Yield ``(iteration, z, mismatch)`` starting with iteration 0 at ``z0``."""
    z = np.array(z0, dtype=complex)
    mis = _mismatch(system, z)
    yield 0, z, mis
    for it in range(1, max_iter + 1):
        if tol is not None and mis <= tol:
            return
        A = system.jacobian(z)
        try:
            lu = factorize(system, A, context=f"Newton iteration {it}: ")
        except SingularSystemError as exc:
            raise SingularSystemError(str(exc), block=exc.block) from None
        dx = lu.solve(-system.residual(z))
        z = z + to_complex(dx)
        mis = _mismatch(system, z)
        yield it, z, mis
        if not np.isfinite(mis):
            return


def nr_solve(case, devices=(), options: NROptions | None = None, start=None):
    """Plain full Newton from ``start`` (a state vector or germ; flat by default)."""
    options = options or NROptions()
    t0 = time.perf_counter()
    system = case if isinstance(case, PreparedSystem) else prepare_system(case, devices)
    if start is None:
        z0 = germ_vector(system, flat_germ(system))
    elif hasattr(start, "C"):
        z0 = germ_vector(system, start)
    else:
        z0 = np.asarray(start, dtype=complex)
    history = []
    z, it = z0, 0
    for it, z, mis in newton_steps(system, z0, options.max_iter, options.tolerance):
        history.append(mis)
    status = "converged" if history[-1] <= options.tolerance else "diverged"
    return build_report("nr", status, system, z, history, t0, iterations=it)


def nr_seed(case, devices=(), k: int = 3):
    """Germ from the Newton state after exactly ``k`` iterations from flat start."""
    system = case if isinstance(case, PreparedSystem) else prepare_system(case, devices)
    if k < 0:
        raise ConfigurationError("k must be non-negative")
    flat = flat_germ(system)
    if k == 0:
        return flat
    last = germ_vector(system, flat)
    done = 0
    try:
        for it, z, mis in newton_steps(system, last, k):
            if not np.all(np.isfinite(z)):
                break
            last, done = z, it
    except SingularSystemError:
        pass
    if done < k:
        warnings.warn(f"Newton seeding stopped after {done} of {k} iterations", RuntimeWarning, stacklevel=2)
    return germ_from_state(system, last)
