"""Voltage-reduction scenarios and effective-impedance analytics.

Lowering the substation secondary tap raises the effective transformer ratio
``k_eff`` and therefore scales the feeder impedance seen from the source by
``k_eff**2``. With nonzero feeder impedance that referral outweighs the load
relief from the lower feeder voltage, so the stability margin shrinks; with a
zero-impedance feeder only the load relief remains and the margin grows. The
scenario tooling here builds both situations and compares margins the way a
utility study table would.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from . import margin
from .netmodel import (
    CoupledSystem,
    DgUnit,
    FeederModel,
    FeederSegment,
    ModelError,
    SubstationTransformer,
    TransmissionBranch,
    TransmissionBus,
    TransmissionNetwork,
    feeder_topology_order,
)
from .zipload import ZipLoad, total_base_load

DG_MODES = ("none", "upf", "vvc")
# inverter sized with enough headroom that the default 0.44*s reactive limit
# stays inside sqrt(s^2 - p^2)
DG_S_OVER_P = 1.12


@dataclass(frozen=True)
class CvrScenario:
    label: str
    tap_secondary: float = 1.0
    dg_mode: str = "none"
    dg_vset: float = 1.05
    dg_penetration: float = 0.0

    def __post_init__(self) -> None:
        if not 0.9 <= self.tap_secondary <= 1.1:
            raise ModelError(f"scenario tap {self.tap_secondary} outside the transformer range")
        if self.dg_mode not in DG_MODES:
            raise ModelError(f"unknown DG mode {self.dg_mode!r}")
        if not 0.9 <= self.dg_vset <= 1.1:
            raise ModelError(f"DG voltage setpoint {self.dg_vset} outside [0.9, 1.1]")


@dataclass(frozen=True)
class ImpedancePath:
    z_transmission: complex
    z_distribution: complex
    k_eff: float
    z_eq: complex


@dataclass(frozen=True)
class ScenarioRow:
    label: str
    vsm_mw: float
    lambda_max: float
    vsm_lambda_mw: float
    pct_reduction: float | None
    failed: bool = False


@dataclass(frozen=True)
class ScenarioReport:
    rows: tuple[ScenarioRow, ...]

    def to_text(self) -> str:
        header = f"{'scenario':<28} {'VSM (MW)':>12} {'lambda_max':>11} {'VSM_lam (MW)':>13} {'% reduction':>12}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            if r.failed:
                lines.append(f"{r.label:<28} {'failed':>12}")
                continue
            pct = "" if r.pct_reduction is None else f"{r.pct_reduction:.2f}"
            lines.append(
                f"{r.label:<28} {r.vsm_mw:>12.4f} {r.lambda_max:>11.4f} {r.vsm_lambda_mw:>13.4f} {pct:>12}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "vsm_mw", "lambda_max", "pct_reduction"])
        for r in self.rows:
            if r.failed:
                w.writerow([r.label, "failed", "", ""])
            else:
                pct = "" if r.pct_reduction is None else repr(r.pct_reduction)
                w.writerow([r.label, repr(r.vsm_mw), repr(r.lambda_max), pct])
        return buf.getvalue()


def effective_impedance(z_t: complex, z_d: complex, k_eff: float) -> ImpedancePath:
    """Source-to-load impedance with the feeder part referred through the ratio."""
    if k_eff <= 0:
        raise ModelError("effective ratio must be positive")
    return ImpedancePath(
        z_transmission=complex(z_t),
        z_distribution=complex(z_d),
        k_eff=k_eff,
        z_eq=complex(z_t) + k_eff**2 * complex(z_d),
    )


def build_extended_two_bus(
    z_t: complex,
    z_d: complex,
    load: ZipLoad,
    tap: float = 1.0,
    s_base: float = 100.0,
) -> CoupledSystem:
    """Infinite bus, one line, a tapped substation transformer, one feeder load.

    With ``z_d = 0`` the load sits directly at the feeder head, which is the
    no-feeder variant of the study system.
    """
    z_t = complex(z_t)
    z_d = complex(z_d)
    buses = (
        TransmissionBus(id="bus1", kind="slack", v_set=1.0),
        TransmissionBus(id="bus2", kind="pq"),
    )
    branches = (TransmissionBranch(from_bus="bus1", to_bus="bus2", r=z_t.real, x=z_t.imag),)
    xfmr = SubstationTransformer(k_nominal=1.0, tap_secondary=tap)
    if z_d == 0:
        segments: tuple[FeederSegment, ...] = ()
        loads = {"head": load}
    else:
        segments = (FeederSegment(from_node="head", to_node="load", r=z_d.real, x=z_d.imag),)
        loads = {"load": load}
    feeder = FeederModel(
        head_transformer=xfmr,
        segments=segments,
        loads=loads,
        boundary_bus="bus2",
    )
    return CoupledSystem(
        transmission=TransmissionNetwork(buses=buses, branches=branches),
        feeders=(feeder,),
        s_base=s_base,
    )


def apply_cvr(sys: CoupledSystem, scenario: CvrScenario) -> CoupledSystem:
    """Set every feeder head tap and every volt-var DG setpoint per the scenario."""
    feeders = []
    for f in sys.feeders:
        xfmr = replace(f.head_transformer, tap_secondary=scenario.tap_secondary)
        dg = {
            n: (replace(u, v_set=scenario.dg_vset) if u.mode == "vvc" else u)
            for n, u in f.dg_units.items()
        }
        feeders.append(replace(f, head_transformer=xfmr, dg_units=dg))
    return replace(sys, feeders=tuple(feeders))


def with_dg(sys: CoupledSystem, mode: str, penetration: float, v_set: float = 1.05) -> CoupledSystem:
    """Copy of ``sys`` with DG materialized on every feeder at the given penetration.

    Total DG active rating per feeder equals ``penetration`` times the
    feeder's base load, allocated proportionally to node load size. ``mode``
    "none" strips all DG instead.
    """
    if mode not in DG_MODES:
        raise ModelError(f"unknown DG mode {mode!r}")
    feeders = []
    for f in sys.feeders:
        if mode == "none" or penetration <= 0.0:
            feeders.append(replace(f, dg_units={}))
            continue
        dg: dict[str, DgUnit] = {}
        for node, ld in f.loads.items():
            if ld.p0 <= 0.0:
                continue
            p = penetration * ld.p0
            s = DG_S_OVER_P * p
            dg[node] = DgUnit(p_rated=p, s_rated=s, mode=mode, v_set=v_set,
                              q_max=0.44 * s, droop_band=0.04)
        feeders.append(replace(f, dg_units=dg))
    return replace(sys, feeders=tuple(feeders))


def flatten_system(sys: CoupledSystem) -> CoupledSystem:
    """Fold every feeder into the transmission network via k^2 referral.

    Feeder node voltages map to ``k_eff`` times their physical value, so each
    referred ZIP load keeps its power by raising its nominal voltage to
    ``k_eff * v0``. Replicated copies are combined by symmetry: impedances
    divide by the count, powers multiply. Volt-var DG has no constant-PQ
    equivalent and cannot be flattened.
    """
    buses = {b.id: b for b in sys.transmission.buses}
    branches = list(sys.transmission.branches)
    for fi, feeder in enumerate(sys.feeders):
        k = feeder.head_transformer.k_eff
        rep = feeder.replication
        series = feeder.head_transformer.series_z
        order = feeder_topology_order(feeder)
        head = order[0]
        prefix = f"f{fi}:"

        def bus_for(node: str) -> str:
            if node == head and series == 0:
                return feeder.boundary_bus
            return prefix + node

        for node in order:
            bid = bus_for(node)
            if bid not in buses:
                buses[bid] = TransmissionBus(id=bid, kind="pq")
        if series != 0:
            z = k**2 * series / rep
            branches.append(TransmissionBranch(from_bus=feeder.boundary_bus,
                                               to_bus=bus_for(head), r=z.real, x=z.imag))
        for seg in feeder.segments:
            z = k**2 * seg.z / rep
            branches.append(TransmissionBranch(from_bus=bus_for(seg.from_node),
                                               to_bus=bus_for(seg.to_node), r=z.real, x=z.imag))
        for node, ld in feeder.loads.items():
            bid = bus_for(node)
            bus = buses[bid]
            if bus.native_load is not None:
                raise ModelError(f"cannot flatten: bus {bid!r} would carry two ZIP loads")
            referred = replace(ld, p0=rep * ld.p0, q0=rep * ld.q0, v0=k * ld.v0)
            buses[bid] = replace(bus, native_load=referred)
        for node, dg in feeder.dg_units.items():
            if dg.mode == "vvc":
                raise ModelError("volt-var DG cannot be flattened to a constant injection")
            bid = bus_for(node)
            buses[bid] = replace(buses[bid], p_inj=buses[bid].p_inj + rep * dg.p_rated)

    net = TransmissionNetwork(buses=tuple(buses.values()), branches=tuple(branches))
    return CoupledSystem(transmission=net, feeders=(), s_base=sys.s_base)


def no_cvr_cvr_pair(
    dg_mode: str = "none",
    penetration: float = 0.6,
    cvr_tap: float = 0.95,
    nocvr_vset: float = 1.05,
    cvr_vset: float = 1.00,
) -> tuple[CvrScenario, CvrScenario]:
    """Convenience constructor for one study pair at a given DG mode."""
    suffix = "no DG" if dg_mode == "none" else f"{int(round(100 * penetration))}% DG ({dg_mode})"
    pen = 0.0 if dg_mode == "none" else penetration
    return (
        CvrScenario(label=f"No CVR / {suffix}", tap_secondary=1.0, dg_mode=dg_mode,
                    dg_vset=nocvr_vset, dg_penetration=pen),
        CvrScenario(label=f"CVR / {suffix}", tap_secondary=cvr_tap, dg_mode=dg_mode,
                    dg_vset=cvr_vset, dg_penetration=pen),
    )


def _scenario_system(sys: CoupledSystem, sc: CvrScenario) -> CoupledSystem:
    return apply_cvr(with_dg(sys, sc.dg_mode, sc.dg_penetration, sc.dg_vset), sc)


def _run_scenario(sys: CoupledSystem, sc: CvrScenario, search_kwargs: dict) -> tuple[float, float, float, bool]:
    sys_s = _scenario_system(sys, sc)
    try:
        lam_max, curve = margin.nose_search_cosim(sys_s, **search_kwargs)
    except ModelError:
        return float("nan"), float("nan"), float("nan"), True
    vsm = margin.compute_vsm(curve)
    vsm_lam = (lam_max - curve.points[0].lam) * total_base_load(sys_s).real * sys_s.s_base
    return vsm, lam_max, vsm_lam, False


def compare_scenarios(
    sys: CoupledSystem,
    scenarios: list[CvrScenario],
    max_workers: int | None = None,
    **search_kwargs,
) -> ScenarioReport:
    """Run the nose search per scenario and tabulate margins and reductions.

    Scenarios must come in (No-CVR, CVR) pairs per DG mode; the reduction
    percentage lands on the CVR row of each pair. A scenario whose base case
    is infeasible is marked failed without stopping the rest. Worker count is
    capped by the TDMARGIN_THREADS environment variable.
    """
    if len(scenarios) % 2 != 0:
        raise ModelError("scenarios must come in (No-CVR, CVR) pairs")
    env_cap = os.environ.get("TDMARGIN_THREADS")
    workers = max_workers or min(len(scenarios), os.cpu_count() or 1)
    if env_cap:
        workers = max(1, min(workers, int(env_cap)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda sc: _run_scenario(sys, sc, search_kwargs), scenarios))
    else:
        results = [_run_scenario(sys, sc, search_kwargs) for sc in scenarios]

    rows: list[ScenarioRow] = []
    for i, (sc, (vsm, lam_max, vsm_lam, failed)) in enumerate(zip(scenarios, results)):
        pct = None
        if i % 2 == 1:
            base_vsm = results[i - 1][0]
            base_failed = results[i - 1][3]
            if not failed and not base_failed and base_vsm != 0.0:
                pct = 100.0 * (base_vsm - vsm) / base_vsm
        rows.append(ScenarioRow(label=sc.label, vsm_mw=vsm, lambda_max=lam_max,
                                vsm_lambda_mw=vsm_lam, pct_reduction=pct, failed=failed))
    return ScenarioReport(rows=tuple(rows))


__all__ = [
    "CvrScenario",
    "ImpedancePath",
    "ScenarioRow",
    "ScenarioReport",
    "effective_impedance",
    "build_extended_two_bus",
    "apply_cvr",
    "with_dg",
    "flatten_system",
    "no_cvr_cvr_pair",
    "compare_scenarios",
]
