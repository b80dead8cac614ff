"""Fixed-point coupling of the transmission and feeder solvers.

Each exchange does one (a)-(b)-(c) pass: (a) solve the transmission network
with every feeder represented as a constant-PQ injection at its boundary bus,
(b) solve each feeder at the resulting boundary voltage, (c) refresh the
injections from the aggregated head powers. The pass is exposed as
:func:`exchange_step`; :func:`solve_coupled` iterates it to a fixed point.

Plain alternation contracts only while the product of the feeder's load
voltage sensitivity and the transmission voltage-injection sensitivity stays
below one; it reaches one exactly at the system fold and can exceed one well
before it for strongly voltage-dependent load behind a stiff boundary. To
keep every operating point up to the nose reachable, ``solve_coupled``
drives the injection fixed point with a Broyden secant iteration whose first
step is the plain alternation step; the fixed point is unchanged and
``accelerate=False`` restores plain alternation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import dpf, tpf
from .netmodel import CoupledSystem
from .zipload import eval_zip

DEFAULT_TOL = 1e-6
MAX_EXCHANGES = 20


class ExchangeRecord(NamedTuple):
    iteration: int
    bus: str
    v_pu: float
    p_pu: float
    q_pu: float


@dataclass(frozen=True, eq=False)
class CoupledSolution:
    transmission: tpf.PowerFlowSolution | None
    feeders: tuple[dpf.FeederSolution | None, ...]
    feeder_pq: tuple[complex, ...]
    boundary_trace: tuple[ExchangeRecord, ...]
    converged: bool
    exchanges: int
    cause: str | None = None

    def injections(self, sys: CoupledSystem) -> dict[str, complex]:
        """Boundary injections implied by the current feeder demands (load negative)."""
        out: dict[str, complex] = {}
        for feeder, s in zip(sys.feeders, self.feeder_pq):
            out[feeder.boundary_bus] = out.get(feeder.boundary_bus, 0j) - s
        return out

    def boundary_voltage(self, sys: CoupledSystem, feeder_index: int) -> complex:
        if self.transmission is None:
            raise ValueError("no transmission solution yet")
        return self.transmission.voltage(sys.feeders[feeder_index].boundary_bus)


def initial_guess(sys: CoupledSystem, lam: float) -> CoupledSolution:
    """Flat starting point: feeder demand estimated from ZIP at nominal voltage."""
    pq = []
    for feeder in sys.feeders:
        s = 0j
        for ld in feeder.loads.values():
            p, q = eval_zip(ld, ld.v0, lam)
            s += complex(p, q)
        for dg in feeder.dg_units.values():
            s -= dg.p_rated
        pq.append(feeder.replication * s)
    return CoupledSolution(
        transmission=None,
        feeders=tuple(None for _ in sys.feeders),
        feeder_pq=tuple(pq),
        boundary_trace=(),
        converged=False,
        exchanges=0,
    )


def exchange_step(
    sys: CoupledSystem,
    lam: float,
    prev: CoupledSolution,
    tol: float = DEFAULT_TOL,
) -> CoupledSolution:
    """One transmission-feeder-injection pass; appends to the boundary trace.

    The returned solution is converged when boundary voltages and injections
    moved by at most ``tol`` relative to ``prev``.
    """
    step_no = prev.exchanges + 1
    tsol = tpf.solve_newton(sys.transmission, prev.injections(sys), lam, start=prev.transmission)
    if not tsol.converged:
        return replace(
            prev,
            transmission=tsol,
            converged=False,
            exchanges=step_no,
            cause=f"transmission solve failed ({tsol.cause})",
        )

    fsols: list[dpf.FeederSolution] = []
    new_pq: list[complex] = []
    trace = list(prev.boundary_trace)
    max_dv = 0.0
    for i, feeder in enumerate(sys.feeders):
        v_b = tsol.voltage(feeder.boundary_bus)
        warm = prev.feeders[i] if prev.feeders else None
        fsol = dpf.solve_bfs(feeder, v_b, lam, start=warm)
        if not fsol.converged:
            return replace(
                prev,
                transmission=tsol,
                converged=False,
                exchanges=step_no,
                cause=f"feeder {i} sweep failed",
            )
        p, q = dpf.aggregate_head_power(fsol, feeder)
        fsols.append(fsol)
        new_pq.append(complex(p, q))
        trace.append(ExchangeRecord(step_no, feeder.boundary_bus, abs(v_b), p, q))
        if prev.transmission is not None:
            max_dv = max(max_dv, abs(v_b - prev.transmission.voltage(feeder.boundary_bus)))
        # on the very first pass there is no prior voltage; injection
        # consistency alone decides (a self-consistent guess is converged)

    if sys.feeders:
        max_ds = max(abs(a - b) for a, b in zip(new_pq, prev.feeder_pq))
    else:
        max_ds = 0.0
        max_dv = 0.0 if prev.transmission is not None else max_dv
    converged = max_dv <= tol and max_ds <= tol

    return CoupledSolution(
        transmission=tsol,
        feeders=tuple(fsols),
        feeder_pq=tuple(new_pq),
        boundary_trace=tuple(trace),
        converged=converged,
        exchanges=step_no,
        cause=None,
    )


def _stack(pq) -> np.ndarray:
    arr = np.asarray(pq, dtype=complex)
    return np.concatenate([arr.real, arr.imag])


def _unstack(vec: np.ndarray) -> tuple[complex, ...]:
    n = len(vec) // 2
    return tuple(complex(vec[i], vec[n + i]) for i in range(n))


def solve_coupled(
    sys: CoupledSystem,
    lam: float = 1.0,
    warm: CoupledSolution | None = None,
    tol: float = DEFAULT_TOL,
    max_exchanges: int = MAX_EXCHANGES,
    accelerate: bool = True,
) -> CoupledSolution:
    """Converged coupled operating point at load level ``lam``.

    ``warm`` reuses a nearby solution (typically the previous continuation
    point); the margin search depends on this to stay cheap near the nose.
    Non-convergence of either sub-solver or exhausting the exchange budget
    returns an unconverged solution with a cause tag, which the nose search
    treats as "past the limit" information rather than an error.
    """
    if warm is not None:
        cur = replace(warm, boundary_trace=(), exchanges=0, converged=False, cause=None)
    else:
        cur = initial_guess(sys, lam)
    if not sys.feeders:
        cur = exchange_step(sys, lam, cur, tol)
        if cur.transmission is not None and cur.transmission.converged:
            return replace(cur, converged=True)
        return cur

    n2 = 2 * len(sys.feeders)
    broyden = -np.eye(n2)  # first secant step reproduces plain alternation
    s_vec = _stack(cur.feeder_pq)
    prev_pair: tuple[np.ndarray, np.ndarray] | None = None

    while cur.exchanges < max_exchanges:
        trial = exchange_step(sys, lam, replace(cur, feeder_pq=_unstack(s_vec)), tol)
        if trial.cause is not None:
            # sub-solver failed at this injection; pull back sharply toward
            # the last evaluated point instead of giving up outright
            if not accelerate or prev_pair is None:
                return trial
            gap = s_vec - prev_pair[0]
            if float(np.linalg.norm(gap)) < 1e-10 * (1.0 + float(np.linalg.norm(prev_pair[0]))):
                return trial
            s_vec = prev_pair[0] + 0.125 * gap
            cur = replace(cur, exchanges=trial.exchanges)
            continue
        g_vec = _stack(trial.feeder_pq)
        residual = g_vec - s_vec
        if trial.converged:
            return trial
        cur = trial
        if not accelerate:
            s_vec = g_vec
            continue
        if prev_pair is not None:
            d_s = s_vec - prev_pair[0]
            d_r = residual - prev_pair[1]
            denom = float(d_s @ d_s)
            if denom > 1e-30:
                broyden += np.outer(d_r - broyden @ d_s, d_s) / denom
        prev_pair = (s_vec.copy(), residual.copy())
        try:
            step = np.linalg.solve(broyden, -residual)
        except np.linalg.LinAlgError:
            broyden = -np.eye(n2)
            step = residual.copy()
        r_norm = float(np.linalg.norm(residual))
        if not np.all(np.isfinite(step)) or float(np.linalg.norm(step)) > 50.0 * max(r_norm, 1e-12):
            broyden = -np.eye(n2)
            step = residual.copy()
        s_vec = s_vec + step
    return replace(cur, converged=False, cause="exchange budget exhausted")


def depressed_start(sol: CoupledSolution, scale: float) -> CoupledSolution:
    """Warm-start variant with load-side voltages scaled down.

    Near maximum boundary transfer the transmission equations carry two
    solutions for the same injection; a Newton warm-started high never sees
    the low one. Scaling the pq voltages steers the restart onto the low
    branch, where the coupled fixed point lives past the interface's own
    power fold.
    """
    ts = sol.transmission
    if ts is None:
        return sol
    vm = np.asarray(ts.v_mag, float).copy() * scale
    ts2 = tpf.PowerFlowSolution(
        bus_ids=ts.bus_ids, v_mag=vm, v_ang=np.asarray(ts.v_ang, float).copy(),
        converged=ts.converged, iterations=ts.iterations, max_mismatch=ts.max_mismatch,
    )
    feeders = tuple(
        None if f is None else dpf.FeederSolution(
            node_ids=f.node_ids, v={n: scale * v for n, v in f.v.items()},
            head_p=f.head_p, head_q=f.head_q, converged=f.converged, iterations=f.iterations,
        )
        for f in sol.feeders
    )
    return replace(sol, transmission=ts2, feeders=feeders)


def delivered_total_p(sys: CoupledSystem, sol: CoupledSolution, lam: float) -> float:
    """System-wide ZIP active power (pu) drawn at the solved voltages."""
    total = tpf.delivered_load_p(sys.transmission, sol.transmission.v_mag, lam)
    for feeder, fsol in zip(sys.feeders, sol.feeders):
        p, _ = dpf.feeder_load_pq(feeder, fsol, lam)
        total += feeder.replication * p
    return total


__all__ = [
    "CoupledSolution",
    "ExchangeRecord",
    "initial_guess",
    "exchange_step",
    "solve_coupled",
    "depressed_start",
    "delivered_total_p",
]
