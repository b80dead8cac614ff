"""Command-line driver: case loading, scenario runs, CSV artifacts.

Case files are JSON with top-level keys ``transmission``, ``feeders`` and
``s_base_mva``. Impedances are per unit; powers are MW/MVAr and are converted
to per unit on load. See the repository README for the schema and the bundled
cases under ``tdmargin/cases``.

Exit codes: 0 success, 2 non-convergence, 3 input error.
"""

from __future__ import annotations

import argparse
import json
import sys as _sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import cosim, cvr, dpf, margin, tpf
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
    validate_network,
)
from .zipload import ZipLoad


class CaseError(ValueError):
    """Raised for unparseable or structurally invalid case files."""


@dataclass
class RunConfig:
    command: str
    case_path: str | None = None
    lam: float = 1.0
    tap: float = 0.95
    dg_mode: str | None = None
    dg_vset: float = 1.00
    penetration: float = 0.6
    replication: int | None = None
    lambda_step: float = 0.05
    tol_cosim: float = 1e-6
    out: str | None = None
    z_t: complex = 0.01 + 0.06j
    z_d: complex = 0.03 + 0.06j
    load_mw: float = 60.0
    load_mvar: float = 20.0


# --- case file I/O -------------------------------------------------------------


def _zip_from_json(obj: dict, s_base: float, where: str) -> ZipLoad:
    try:
        return ZipLoad(
            p0=float(obj.get("p0", 0.0)) / s_base,
            q0=float(obj.get("q0", 0.0)) / s_base,
            pz=float(obj.get("pz", 0.0)),
            pi=float(obj.get("pi", 0.0)),
            pp=float(obj.get("pp", 1.0)),
            qz=obj.get("qz"),
            qi=obj.get("qi"),
            qp=obj.get("qp"),
            v0=float(obj.get("v0", 1.0)),
        )
    except ValueError as exc:
        raise CaseError(f"{where}: {exc}") from exc


def _dg_from_json(obj: dict, s_base: float, where: str) -> DgUnit:
    try:
        q_max = obj.get("q_max")
        return DgUnit(
            p_rated=float(obj["p_rated"]) / s_base,
            s_rated=float(obj["s_rated"]) / s_base,
            mode=obj.get("mode", "upf"),
            v_set=float(obj.get("v_set", 1.05)),
            q_max=None if q_max is None else float(q_max) / s_base,
            droop_band=float(obj.get("droop_band", 0.04)),
        )
    except (KeyError, ValueError) as exc:
        raise CaseError(f"{where}: {exc}") from exc


def load_case(path: str | Path) -> CoupledSystem:
    """Parse and validate a JSON case file into a CoupledSystem."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise CaseError(f"case file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return case_from_dict(doc, source=str(path))


def case_from_dict(doc: dict, source: str = "<dict>") -> CoupledSystem:
    s_base = float(doc.get("s_base_mva", 100.0))
    trans = doc.get("transmission")
    if trans is None:
        raise CaseError(f"{source}: missing 'transmission' section")

    buses = []
    for i, b in enumerate(trans.get("buses", [])):
        where = f"{source}: buses[{i}]"
        load = b.get("native_load")
        try:
            buses.append(
                TransmissionBus(
                    id=str(b["id"]),
                    kind=b.get("kind", "pq"),
                    v_set=b.get("v_set"),
                    p_inj=float(b.get("p_inj", 0.0)) / s_base,
                    q_inj=float(b.get("q_inj", 0.0)) / s_base,
                    native_load=_zip_from_json(load, s_base, where) if load else None,
                    q_min=None if b.get("q_min") is None else float(b["q_min"]) / s_base,
                    q_max=None if b.get("q_max") is None else float(b["q_max"]) / s_base,
                )
            )
        except (KeyError, ModelError) as exc:
            raise CaseError(f"{where}: {exc}") from exc

    branches = []
    for i, br in enumerate(trans.get("branches", [])):
        where = f"{source}: branches[{i}]"
        try:
            branches.append(
                TransmissionBranch(
                    from_bus=str(br["from"]),
                    to_bus=str(br["to"]),
                    r=float(br.get("r", 0.0)),
                    x=float(br.get("x", 0.0)),
                    b_shunt=float(br.get("b_shunt", 0.0)),
                    tap=float(br.get("tap", 1.0)),
                )
            )
        except (KeyError, ModelError) as exc:
            raise CaseError(f"{where}: {exc}") from exc

    feeders = []
    for i, f in enumerate(doc.get("feeders", [])):
        where = f"{source}: feeders[{i}]"
        xf = f.get("head_transformer", {})
        try:
            xfmr = SubstationTransformer(
                k_nominal=float(xf.get("k_nominal", 1.0)),
                tap_secondary=float(xf.get("tap_secondary", 1.0)),
                series_z=complex(float(xf.get("series_r", 0.0)), float(xf.get("series_x", 0.0))),
            )
            segments = tuple(
                FeederSegment(
                    from_node=str(s["from"]),
                    to_node=str(s["to"]),
                    r=float(s.get("r", 0.0)),
                    x=float(s.get("x", 0.0)),
                )
                for s in f.get("segments", [])
            )
            loads = {
                str(n): _zip_from_json(ld, s_base, f"{where}: loads[{n!r}]")
                for n, ld in f.get("loads", {}).items()
            }
            dg = {
                str(n): _dg_from_json(u, s_base, f"{where}: dg_units[{n!r}]")
                for n, u in f.get("dg_units", {}).items()
            }
            feeders.append(
                FeederModel(
                    head_transformer=xfmr,
                    segments=segments,
                    loads=loads,
                    dg_units=dg,
                    boundary_bus=str(f["boundary_bus"]),
                    replication=int(f.get("replication", 1)),
                )
            )
        except (KeyError, ModelError) as exc:
            raise CaseError(f"{where}: {exc}") from exc

    system = CoupledSystem(
        transmission=TransmissionNetwork(buses=tuple(buses), branches=tuple(branches)),
        feeders=tuple(feeders),
        s_base=s_base,
    )
    report = validate_network(system)
    if not report.ok:
        raise CaseError(f"{source}: " + "; ".join(report.violations))
    return system


def _zip_to_json(load: ZipLoad, s_base: float) -> dict:
    return {
        "p0": load.p0 * s_base,
        "q0": load.q0 * s_base,
        "pz": load.pz, "pi": load.pi, "pp": load.pp,
        "qz": load.qz, "qi": load.qi, "qp": load.qp,
        "v0": load.v0,
    }


def dump_case(sys_: CoupledSystem) -> dict:
    """Normalized dictionary form of a system; inverse of case_from_dict."""
    s = sys_.s_base
    doc: dict = {"s_base_mva": s, "transmission": {"buses": [], "branches": []}, "feeders": []}
    for b in sys_.transmission.buses:
        entry: dict = {"id": b.id, "kind": b.kind}
        if b.v_set is not None:
            entry["v_set"] = b.v_set
        if b.p_inj:
            entry["p_inj"] = b.p_inj * s
        if b.q_inj:
            entry["q_inj"] = b.q_inj * s
        if b.q_min is not None:
            entry["q_min"] = b.q_min * s
        if b.q_max is not None:
            entry["q_max"] = b.q_max * s
        if b.native_load is not None:
            entry["native_load"] = _zip_to_json(b.native_load, s)
        doc["transmission"]["buses"].append(entry)
    for br in sys_.transmission.branches:
        doc["transmission"]["branches"].append(
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
             "b_shunt": br.b_shunt, "tap": br.tap}
        )
    for f in sys_.feeders:
        xf = f.head_transformer
        doc["feeders"].append(
            {
                "boundary_bus": f.boundary_bus,
                "replication": f.replication,
                "head_transformer": {
                    "k_nominal": xf.k_nominal,
                    "tap_secondary": xf.tap_secondary,
                    "series_r": xf.series_z.real,
                    "series_x": xf.series_z.imag,
                },
                "segments": [
                    {"from": s_.from_node, "to": s_.to_node, "r": s_.r, "x": s_.x}
                    for s_ in f.segments
                ],
                "loads": {n: _zip_to_json(ld, s) for n, ld in f.loads.items()},
                "dg_units": {
                    n: {
                        "p_rated": u.p_rated * s, "s_rated": u.s_rated * s,
                        "mode": u.mode, "v_set": u.v_set,
                        "q_max": u.q_max * s, "droop_band": u.droop_band,
                    }
                    for n, u in f.dg_units.items()
                },
            }
        )
    return doc


def bundled_case_path(name: str) -> Path:
    """Path of a case shipped with the package, e.g. ``two_bus_extended``."""
    res = resources.files("tdmargin").joinpath("cases", f"{name}.json")
    return Path(str(res))


# --- artifacts -----------------------------------------------------------------


def export_pv_curve(curve: margin.PvCurve, path: str | Path) -> None:
    """CSV of the curve: one row per (point, monitored bus), deterministic order."""
    if not curve.points:
        raise ValueError("refusing to export an empty curve")
    lines = ["lambda,bus_id,v_pu,delivered_mw_total"]
    for pt in curve.points:
        mw = pt.delivered_p * curve.s_base
        for bus_id in sorted(pt.v_mag):
            lines.append(f"{pt.lam!r},{bus_id},{pt.v_mag[bus_id]!r},{mw!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_boundary_trace(sol: cosim.CoupledSolution, path: str | Path) -> None:
    """Exchange trace CSV; the bus column is added only with several boundaries."""
    buses = {rec.bus for rec in sol.boundary_trace}
    lines = []
    if len(buses) <= 1:
        lines.append("iter,v_boundary_pu,p_pu,q_pu")
        for rec in sol.boundary_trace:
            lines.append(f"{rec.iteration},{rec.v_pu!r},{rec.p_pu!r},{rec.q_pu!r}")
    else:
        lines.append("iter,bus_id,v_boundary_pu,p_pu,q_pu")
        for rec in sol.boundary_trace:
            lines.append(f"{rec.iteration},{rec.bus},{rec.v_pu!r},{rec.p_pu!r},{rec.q_pu!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- commands ------------------------------------------------------------------


def _load_with_overrides(cfg: RunConfig) -> CoupledSystem:
    if not cfg.case_path:
        raise CaseError("this command needs --case")
    system = load_case(cfg.case_path)
    if cfg.replication is not None:
        from dataclasses import replace
        feeders = tuple(replace(f, replication=cfg.replication) for f in system.feeders)
        system = replace(system, feeders=feeders)
    return system


def _cmd_solve(cfg: RunConfig) -> int:
    system = _load_with_overrides(cfg)
    sol = cosim.solve_coupled(system, cfg.lam, tol=cfg.tol_cosim)
    if not sol.converged:
        print(f"did not converge at lambda={cfg.lam}: {sol.cause}", file=_sys.stderr)
        return 2
    lines = [f"coupled solve at lambda={cfg.lam} converged in {sol.exchanges} exchange(s)"]
    ts = sol.transmission
    for i, bus in enumerate(ts.bus_ids):
        lines.append(f"  bus {bus:>6}: {ts.v_mag[i]:.5f} pu  {ts.v_ang[i]:+.5f} rad")
    for i, (feeder, fsol) in enumerate(zip(system.feeders, sol.feeders)):
        p, q = dpf.aggregate_head_power(fsol, feeder)
        lines.append(
            f"  feeder {i} at {feeder.boundary_bus}: head {p:.5f}+j{q:.5f} pu"
            f" ({feeder.replication}x), min V {min(abs(v) for v in fsol.v.values()):.5f} pu"
        )
    text = "\n".join(lines)
    if cfg.out:
        Path(cfg.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_cosim(cfg: RunConfig) -> int:
    system = _load_with_overrides(cfg)
    sol = cosim.solve_coupled(system, cfg.lam, tol=cfg.tol_cosim)
    if cfg.out:
        export_boundary_trace(sol, cfg.out)
        print(f"boundary trace written to {cfg.out}")
    if not sol.converged:
        print(f"did not converge at lambda={cfg.lam}: {sol.cause}", file=_sys.stderr)
        return 2
    print(f"converged in {sol.exchanges} exchange(s); final injections:")
    for feeder, s in zip(system.feeders, sol.feeder_pq):
        print(f"  {feeder.boundary_bus}: {s.real:.6f}+j{s.imag:.6f} pu")
    return 0


def _search_curve(system: CoupledSystem, cfg: RunConfig) -> margin.PvCurve:
    if system.feeders:
        _, curve = margin.nose_search_cosim(system, initial_step=cfg.lambda_step, tol=cfg.tol_cosim)
    else:
        curve = margin.trace_cpf(system)
    return curve


def _cmd_pv_curve(cfg: RunConfig) -> int:
    system = _load_with_overrides(cfg)
    curve = _search_curve(system, cfg)
    out = cfg.out or "pv_curve.csv"
    export_pv_curve(curve, out)
    print(f"{len(curve.points)} points, lambda_max={curve.lambda_max!r}; written to {out}")
    return 0


def _cmd_vsm(cfg: RunConfig) -> int:
    system = _load_with_overrides(cfg)
    curve = _search_curve(system, cfg)
    vsm = margin.compute_vsm(curve)
    print(f"VSM = {vsm:.4f} MW (lambda_max = {curve.lambda_max:.6f})")
    return 0


def _cmd_twobus(cfg: RunConfig) -> int:
    load = ZipLoad(p0=cfg.load_mw / 100.0, q0=cfg.load_mvar / 100.0, pz=0.4, pi=0.3, pp=0.3)
    taps = (1.0, cfg.tap)
    results = {}
    for tap in taps:
        path = cvr.effective_impedance(cfg.z_t, cfg.z_d, 1.0 / tap)
        system = cvr.build_extended_two_bus(cfg.z_t, cfg.z_d, load, tap=tap)
        flat_curve = margin.trace_cpf(cvr.flatten_system(system))
        lam_cosim, cosim_curve = margin.nose_search_cosim(system, initial_step=cfg.lambda_step,
                                                          tol=cfg.tol_cosim)
        results[tap] = (path, margin.compute_vsm(flat_curve), flat_curve.lambda_max,
                        margin.compute_vsm(cosim_curve), lam_cosim)
        print(f"tap {tap:.3f}: z_eq = {path.z_eq.real:.7f}{path.z_eq.imag:+.7f}j pu")
    for tap in taps:
        _, vsm_f, lam_f, vsm_c, lam_c = results[tap]
        name = "No CVR" if tap == 1.0 else "CVR   "
        print(f"{name} (tap {tap:.3f}): VSM {vsm_f:9.4f} MW, lambda_max {lam_f:.5f} [cpf] |"
              f" VSM {vsm_c:9.4f} MW, lambda_max {lam_c:.5f} [cosim]")
    vsm_nocvr = results[1.0][1]
    vsm_cvr = results[cfg.tap][1]
    if vsm_cvr < vsm_nocvr:
        print(f"CVR margin < No-CVR margin: reduction {100.0 * (vsm_nocvr - vsm_cvr) / vsm_nocvr:.2f}%")
    else:
        print(f"CVR margin > No-CVR margin: gain {100.0 * (vsm_cvr - vsm_nocvr) / vsm_nocvr:.2f}%")
    return 0


def _cmd_compare(cfg: RunConfig) -> int:
    system = _load_with_overrides(cfg)
    modes = [cfg.dg_mode] if cfg.dg_mode else ["none", "upf", "vvc"]
    scenarios: list[cvr.CvrScenario] = []
    for mode in modes:
        scenarios.extend(cvr.no_cvr_cvr_pair(mode, penetration=cfg.penetration,
                                             cvr_tap=cfg.tap, cvr_vset=cfg.dg_vset))
    report = cvr.compare_scenarios(system, scenarios, initial_step=cfg.lambda_step, tol=cfg.tol_cosim)
    print(report.to_text())
    if cfg.out:
        Path(cfg.out).write_text(report.to_csv())
        print(f"report written to {cfg.out}")
    if any(r.failed for r in report.rows):
        return 2
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "cosim": _cmd_cosim,
    "pv-curve": _cmd_pv_curve,
    "vsm": _cmd_vsm,
    "twobus": _cmd_twobus,
    "compare": _cmd_compare,
}


def run(cfg: RunConfig) -> int:
    """Dispatch a parsed configuration; returns the process exit code."""
    handler = _COMMANDS.get(cfg.command)
    if handler is None:
        print(f"unknown command {cfg.command!r}", file=_sys.stderr)
        return 3
    try:
        return handler(cfg)
    except (CaseError, ModelError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 3


def _complex_pair(text: str) -> complex:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected R,X")
    return complex(float(parts[0]), float(parts[1]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdmargin",
                                description="T&D co-simulation and voltage stability margins")
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--case", dest="case_path", help="JSON case file")
        sp.add_argument("--lambda", dest="lam", type=float, default=1.0,
                        help="load level for solve/cosim")
        sp.add_argument("--tap", type=float, default=0.95, help="CVR secondary tap")
        sp.add_argument("--dg", dest="dg_mode", choices=["none", "upf", "vvc"], default=None)
        sp.add_argument("--dg-vset", dest="dg_vset", type=float, default=1.00)
        sp.add_argument("--penetration", type=float, default=0.6)
        sp.add_argument("--replication", type=int, default=None)
        sp.add_argument("--lambda-step", dest="lambda_step", type=float, default=0.05)
        sp.add_argument("--tol-cosim", dest="tol_cosim", type=float, default=1e-6)
        sp.add_argument("--out", default=None)
        if name == "twobus":
            sp.add_argument("--zt", dest="z_t", type=_complex_pair, default=0.01 + 0.06j,
                            help="transmission impedance R,X (pu)")
            sp.add_argument("--zd", dest="z_d", type=_complex_pair, default=0.03 + 0.06j,
                            help="feeder impedance R,X (pu); 0,0 removes the feeder")
            sp.add_argument("--load-mw", dest="load_mw", type=float, default=60.0)
            sp.add_argument("--load-mvar", dest="load_mvar", type=float, default=20.0)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(**{k: v for k, v in vars(args).items()})
    code = run(cfg)
    if argv is None:  # invoked as a console script
        _sys.exit(code)
    return code


if __name__ == "__main__":
    main()
