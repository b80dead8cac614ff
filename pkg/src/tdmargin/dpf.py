"""Backward/forward-sweep power flow for radial feeders.

The feeder hangs off a transmission boundary bus through its substation
transformer. The sweep works in feeder per unit on the secondary side: the
source voltage seen by the feeder head is ``v_boundary / k_eff`` minus the
drop across the transformer leakage, where ``k_eff = k_nominal /
tap_secondary``. Head power is reported on the primary (transmission) side;
an ideal ratio conserves power, so it equals the secondary-terminal power.

Loads are ZIP and re-evaluated at the latest node voltage each sweep. DG
units inject constant active power; in volt-var mode their reactive output
follows the droop around the setpoint and is also refreshed every sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import DgUnit, FeederModel, FeederSegment, SubstationTransformer, feeder_parents, feeder_topology_order
from .zipload import eval_zip

# run well below the contractual 1e-8 so recomputed balances close to 1e-8 too
DEFAULT_TOL = 1e-11
MAX_SWEEPS = 100
_V_FLOOR = 0.01


@dataclass(frozen=True, eq=False)
class FeederSolution:
    node_ids: tuple[str, ...]
    v: dict[str, complex]
    head_p: float
    head_q: float
    converged: bool
    iterations: int

    def vm(self, node: str) -> float:
        return abs(self.v[node])


def refer_feeder_impedance(seg: FeederSegment, xfmr: SubstationTransformer) -> complex:
    """Segment impedance seen from the transmission side: ``k_eff**2 * z``."""
    return xfmr.k_eff**2 * seg.z


def dg_q_vvc(dg: DgUnit, v: float) -> float:
    """Droop reactive output at node voltage ``v``; zero in unity-pf mode.

    Output ramps linearly from 0 at the setpoint to +q_max one droop band
    below it (injection) and -q_max one band above (absorption).
    """
    if dg.mode != "vvc":
        return 0.0
    frac = (dg.v_set - v) / dg.droop_band
    return dg.q_max * min(1.0, max(-1.0, frac))


def solve_bfs(
    feeder: FeederModel,
    head_voltage: complex,
    lam: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = MAX_SWEEPS,
    start: FeederSolution | None = None,
    scale_dg: bool = False,
) -> FeederSolution:
    """Fixed point of backward current aggregation and forward voltage drops.

    ``head_voltage`` is the complex boundary-bus voltage on the transmission
    side. ``scale_dg`` optionally grows DG active output with ``lam`` (off by
    default: generation does not track load).
    """
    if abs(head_voltage) <= 0:
        raise ValueError("head voltage magnitude must be positive")
    head_voltage = complex(head_voltage)
    order = feeder_topology_order(feeder)
    parents = feeder_parents(feeder)
    xfmr = feeder.head_transformer
    v_src = head_voltage / xfmr.k_eff
    dg_p_scale = lam if scale_dg else 1.0

    v = {n: (start.v[n] if start is not None and n in start.v else v_src) for n in order}
    head = order[0]
    reverse = list(reversed(order))
    converged = False
    sweeps = 0
    i_branch: dict[str, complex] = {}
    i_total = 0j

    for sweeps in range(1, max_sweeps + 1):
        # backward: node injection currents, then accumulate toward the head
        i_node: dict[str, complex] = {}
        for n in order:
            s_draw = 0j
            vn = v[n]
            vm = abs(vn)
            if vm < _V_FLOOR or not np.isfinite(vm):
                return FeederSolution(tuple(order), dict(v), float("nan"), float("nan"), False, sweeps)
            if n in feeder.loads:
                p, q = eval_zip(feeder.loads[n], vm, lam)
                s_draw += complex(p, q)
            if n in feeder.dg_units:
                dg = feeder.dg_units[n]
                s_draw -= complex(dg_p_scale * dg.p_rated, dg_q_vvc(dg, vm))
            i_node[n] = np.conj(s_draw / vn)
        i_branch = dict(i_node)
        for n in reverse:
            if n == head:
                continue
            parent = parents[n].from_node
            i_branch[parent] += i_branch[n]
        i_total = i_branch[head]

        # forward: head from the source, children from their parents
        max_dv = 0.0
        v_new_head = v_src - xfmr.series_z * i_total
        max_dv = max(max_dv, abs(v_new_head - v[head]))
        v[head] = v_new_head
        for n in order[1:]:
            seg = parents[n]
            v_new = v[seg.from_node] - seg.z * i_branch[n]
            max_dv = max(max_dv, abs(v_new - v[n]))
            v[n] = v_new
        if max_dv <= tol:
            converged = True
            break

    s_head = v_src * np.conj(i_total)
    return FeederSolution(
        node_ids=tuple(order),
        v=dict(v),
        head_p=float(s_head.real),
        head_q=float(s_head.imag),
        converged=converged,
        iterations=sweeps,
    )


def aggregate_head_power(sol: FeederSolution, feeder: FeederModel) -> tuple[float, float]:
    """Power drawn at the transformer primary times replication; load positive."""
    r = feeder.replication
    return r * sol.head_p, r * sol.head_q


def feeder_load_pq(feeder: FeederModel, sol: FeederSolution, lam: float = 1.0) -> tuple[float, float]:
    """ZIP power actually delivered to the feeder's loads (single copy, pu)."""
    p_tot = q_tot = 0.0
    for n, ld in feeder.loads.items():
        p, q = eval_zip(ld, abs(sol.v[n]), lam)
        p_tot += p
        q_tot += q
    return p_tot, q_tot


def feeder_dg_pq(feeder: FeederModel, sol: FeederSolution, lam: float = 1.0, scale_dg: bool = False) -> tuple[float, float]:
    """DG injection at the solved voltages (single copy, pu)."""
    scale = lam if scale_dg else 1.0
    p_tot = q_tot = 0.0
    for n, dg in feeder.dg_units.items():
        p_tot += scale * dg.p_rated
        q_tot += dg_q_vvc(dg, abs(sol.v[n]))
    return p_tot, q_tot


def feeder_losses(feeder: FeederModel, sol: FeederSolution, head_voltage: complex | None = None) -> tuple[float, float]:
    """Series I^2*Z losses over segments plus the transformer leakage (single copy, pu).

    Currents are recovered from solved voltage drops alone, so this is
    independent of the load and DG models and usable as a balance oracle.
    Pass the boundary voltage to include the leakage loss; with an ideal
    transformer it contributes nothing either way.
    """
    p_loss = q_loss = 0.0
    for seg in feeder.segments:
        z = seg.z
        if z == 0:
            continue
        i = (sol.v[seg.from_node] - sol.v[seg.to_node]) / z
        s = abs(i) ** 2 * z
        p_loss += s.real
        q_loss += s.imag
    xfmr = feeder.head_transformer
    if xfmr.series_z != 0 and head_voltage is not None:
        head = feeder_topology_order(feeder)[0]
        i_total = (complex(head_voltage) / xfmr.k_eff - sol.v[head]) / xfmr.series_z
        s = abs(i_total) ** 2 * xfmr.series_z
        p_loss += s.real
        q_loss += s.imag
    return p_loss, q_loss


__all__ = [
    "FeederSolution",
    "refer_feeder_impedance",
    "dg_q_vvc",
    "solve_bfs",
    "aggregate_head_power",
    "feeder_load_pq",
    "feeder_dg_pq",
    "feeder_losses",
]
