"""Newton-Raphson AC power flow for the transmission network.

Polar-coordinate full Newton with the Jacobian rebuilt every iteration.
ZIP loads are re-evaluated at the iterate voltage, and their voltage
sensitivity enters the Jacobian, so the solved fixed point is exact for
voltage-dependent load.

Mismatch convention: ``F = scheduled - calculated`` with rows ordered as
active power at pv+pq buses followed by reactive power at pq buses, in bus
declaration order. The unknowns pair up the same way: angles at pv+pq buses,
then magnitudes at pq buses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import ModelError, TransmissionNetwork

DEFAULT_TOL = 1e-8
MAX_ITER = 50
_V_FLOOR = 0.01  # iterates below this magnitude are treated as collapse


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    bus_ids: tuple[str, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    cause: str | None = None

    def index(self, bus_id: str) -> int:
        return self.bus_ids.index(bus_id)

    def vm(self, bus_id: str) -> float:
        return float(self.v_mag[self.index(bus_id)])

    def voltage(self, bus_id: str) -> complex:
        i = self.index(bus_id)
        return self.v_mag[i] * np.exp(1j * self.v_ang[i])

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


class _Compiled:
    """Array view of a network, shared by the Newton and continuation engines."""

    def __init__(self, net: TransmissionNetwork):
        self.net = net
        self.bus_ids = net.bus_ids()
        self.index = {b: i for i, b in enumerate(self.bus_ids)}
        self.n = len(self.bus_ids)
        kinds = [b.kind for b in net.buses]
        slacks = [i for i, k in enumerate(kinds) if k == "slack"]
        if len(slacks) != 1:
            raise ModelError(f"expected exactly one slack bus, found {len(slacks)}")
        self.slack = slacks[0]
        self.pv = np.array([i for i, k in enumerate(kinds) if k == "pv"], dtype=int)
        self.pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
        self.pvpq = np.concatenate([self.pv, self.pq]).astype(int)
        self.pvpq.sort()
        self.Y = build_ybus(net)
        self.v_set = np.array([b.v_set if b.v_set is not None else 1.0 for b in net.buses])
        self.p_inj = np.array([b.p_inj for b in net.buses])
        self.q_inj = np.array([b.q_inj for b in net.buses])
        # ZIP load arrays; unloaded buses carry zeros so they drop out
        self.p0 = np.zeros(self.n)
        self.q0 = np.zeros(self.n)
        self.v0 = np.ones(self.n)
        self.pz = np.zeros(self.n)
        self.pi_ = np.zeros(self.n)
        self.pp = np.ones(self.n)
        self.qz = np.zeros(self.n)
        self.qi = np.zeros(self.n)
        self.qp = np.ones(self.n)
        for i, b in enumerate(net.buses):
            ld = b.native_load
            if ld is None:
                continue
            self.p0[i], self.q0[i], self.v0[i] = ld.p0, ld.q0, ld.v0
            self.pz[i], self.pi_[i], self.pp[i] = ld.pz, ld.pi, ld.pp
            self.qz[i], self.qi[i], self.qp[i] = ld.qz, ld.qi, ld.qp

    # --- voltage-dependent load -------------------------------------------------
    def load_pq(self, vm: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
        u = vm / self.v0
        p = lam * self.p0 * (self.pz * u * u + self.pi_ * u + self.pp)
        q = lam * self.q0 * (self.qz * u * u + self.qi * u + self.qp)
        return p, q

    def load_dv(self, vm: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
        u = vm / self.v0
        dp = lam * self.p0 * (2.0 * self.pz * u + self.pi_) / self.v0
        dq = lam * self.q0 * (2.0 * self.qz * u + self.qi) / self.v0
        return dp, dq

    def sched(self, vm: np.ndarray, lam: float, sx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lp, lq = self.load_pq(vm, lam)
        return self.p_inj + sx.real - lp, self.q_inj + sx.imag - lq

    def mismatch(self, vm, va, lam, sx) -> np.ndarray:
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(self.Y @ v)
        ps, qs = self.sched(vm, lam, sx)
        return np.concatenate([(ps - s_calc.real)[self.pvpq], (qs - s_calc.imag)[self.pq]])

    def jacobian(self, vm, va, lam) -> np.ndarray:
        v = vm * np.exp(1j * va)
        ds_dva, ds_dvm = _dsbus_dv(self.Y, v)
        pvpq, pq = self.pvpq, self.pq
        j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
        j12 = ds_dvm.real[np.ix_(pvpq, pq)]
        j21 = ds_dva.imag[np.ix_(pq, pvpq)]
        j22 = ds_dvm.imag[np.ix_(pq, pq)]
        jac = -np.block([[j11, j12], [j21, j22]])
        # scheduled power is voltage dependent through the ZIP loads
        dp, dq = self.load_dv(vm, lam)
        row_p = {b: r for r, b in enumerate(pvpq)}
        row_q = {b: len(pvpq) + r for r, b in enumerate(pq)}
        for c, b in enumerate(pq):
            col = len(pvpq) + c
            jac[row_p[b], col] -= dp[b]
            jac[row_q[b], col] -= dq[b]
        return jac

    def dmismatch_dlam(self, vm: np.ndarray) -> np.ndarray:
        """Derivative of the mismatch w.r.t. the load-growth parameter."""
        lp, lq = self.load_pq(vm, 1.0)
        return np.concatenate([-lp[self.pvpq], -lq[self.pq]])

    def injection_vector(self, injections: dict[str, complex] | None) -> np.ndarray:
        sx = np.zeros(self.n, dtype=complex)
        if injections:
            for bus_id, s in injections.items():
                sx[self.index[bus_id]] += s
        return sx


def _dsbus_dv(Y: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partials of the complex injection S(V) in polar coordinates (dense)."""
    i_bus = Y @ v
    diag_v = np.diag(v)
    diag_i = np.diag(i_bus)
    diag_vn = np.diag(v / np.abs(v))
    ds_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
    ds_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
    return ds_dva, ds_dvm


def build_ybus(net: TransmissionNetwork) -> np.ndarray:
    """Dense bus admittance matrix with the standard tap-branch model."""
    index = {b.id: i for i, b in enumerate(net.buses)}
    n = len(net.buses)
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        if br.r == 0.0 and br.x == 0.0:
            raise ModelError(f"branch {br.from_bus}-{br.to_bus}: zero series impedance")
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        f, t = index[br.from_bus], index[br.to_bus]
        Y[f, f] += (y + ysh) / br.tap**2
        Y[t, t] += y + ysh
        Y[f, t] -= y / br.tap
        Y[t, f] -= y / br.tap
    return Y


def unknown_layout(net: TransmissionNetwork) -> tuple[tuple[str, str], ...]:
    """State-vector layout as (coordinate, bus id) pairs: angles then magnitudes."""
    comp = _Compiled(net)
    out = [("ang", comp.bus_ids[i]) for i in comp.pvpq]
    out += [("mag", comp.bus_ids[i]) for i in comp.pq]
    return tuple(out)


def power_mismatch(
    net: TransmissionNetwork,
    state: PowerFlowSolution,
    lam: float = 1.0,
    injections: dict[str, complex] | None = None,
) -> np.ndarray:
    comp = _Compiled(net)
    sx = comp.injection_vector(injections)
    return comp.mismatch(np.asarray(state.v_mag, float), np.asarray(state.v_ang, float), lam, sx)


def jacobian(
    net: TransmissionNetwork,
    state: PowerFlowSolution,
    lam: float = 1.0,
    injections: dict[str, complex] | None = None,
) -> np.ndarray:
    del injections  # constant injections do not enter the Jacobian
    comp = _Compiled(net)
    return comp.jacobian(np.asarray(state.v_mag, float), np.asarray(state.v_ang, float), lam)


def make_state(net: TransmissionNetwork, v_mag, v_ang) -> PowerFlowSolution:
    """Assemble an arbitrary (not necessarily solved) state for inspection."""
    return PowerFlowSolution(
        bus_ids=net.bus_ids(),
        v_mag=np.asarray(v_mag, dtype=float),
        v_ang=np.asarray(v_ang, dtype=float),
        converged=False,
        iterations=0,
        max_mismatch=float("nan"),
    )


def _newton(comp: _Compiled, vm, va, lam, sx, tol, max_iter):
    """Core loop on arrays; returns (vm, va, converged, iters, max_f, cause)."""
    vm = vm.copy()
    va = va.copy()
    cause = None
    it = 0
    f = comp.mismatch(vm, va, lam, sx)
    max_f = float(np.max(np.abs(f))) if f.size else 0.0
    while max_f > tol and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(comp.jacobian(vm, va, lam), -f)
        except np.linalg.LinAlgError:
            return vm, va, False, it, max_f, "singular jacobian"
        if not np.all(np.isfinite(step)):
            return vm, va, False, it, max_f, "diverged"
        # modest clamping keeps wild early steps from leaving the basin
        np.clip(step, -0.5, 0.5, out=step)
        npvpq = len(comp.pvpq)
        va[comp.pvpq] += step[:npvpq]
        vm[comp.pq] += step[npvpq:]
        if np.any(vm[comp.pq] < _V_FLOOR):
            return vm, va, False, it, max_f, "voltage collapse"
        f = comp.mismatch(vm, va, lam, sx)
        max_f = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(max_f) or max_f > 1e8:
            return vm, va, False, it, max_f, "diverged"
    converged = max_f <= tol
    if not converged and cause is None:
        cause = "iteration limit"
    return vm, va, converged, it, max_f, cause


def solve_newton(
    net: TransmissionNetwork,
    injections: dict[str, complex] | None = None,
    lam: float = 1.0,
    start: PowerFlowSolution | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
    enforce_q_limits: bool = True,
) -> PowerFlowSolution:
    """Solve the network at load level ``lam`` with optional extra injections.

    ``injections`` maps bus id to complex power added to the schedule
    (positive into the bus); the co-simulation uses it for feeder demand.
    Starts flat unless ``start`` supplies a warm state. Generator reactive
    limits, where set, are enforced by pv-to-pq switching.
    """
    comp = _Compiled(net)
    sx = comp.injection_vector(injections)
    vm, va = _start_point(comp, start)
    vm, va, converged, it, max_f, cause = _newton(comp, vm, va, lam, sx, tol, max_iter)

    if converged and enforce_q_limits:
        for _ in range(4):
            switched = _q_limit_switch(comp, vm, va, lam, sx)
            if switched is None:
                break
            comp, note = switched
            sx = comp.injection_vector(injections)
            vm, va, converged, extra, max_f, cause = _newton(comp, vm, va, lam, sx, tol, max_iter)
            it += extra
            if not converged:
                cause = f"{cause} after {note}"
                break

    return PowerFlowSolution(
        bus_ids=comp.bus_ids,
        v_mag=vm,
        v_ang=va,
        converged=converged,
        iterations=it,
        max_mismatch=max_f,
        cause=None if converged else cause,
    )


def _start_point(comp: _Compiled, start: PowerFlowSolution | None):
    vm = np.ones(comp.n)
    va = np.zeros(comp.n)
    if start is not None:
        vm = np.asarray(start.v_mag, float).copy()
        va = np.asarray(start.v_ang, float).copy()
    # setpoints always win at slack and pv buses
    vm[comp.slack] = comp.v_set[comp.slack]
    va[comp.slack] = 0.0
    vm[comp.pv] = comp.v_set[comp.pv]
    return vm, va


def _q_limit_switch(comp: _Compiled, vm, va, lam, sx):
    """Turn the worst Q-limit violating pv bus into a pq bus pinned at its limit."""
    from dataclasses import replace

    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(comp.Y @ v)
    _, lq = comp.load_pq(vm, lam)
    worst = None
    for i in comp.pv:
        bus = comp.net.buses[i]
        q_gen = s_calc.imag[i] + lq[i] - sx.imag[i]
        if bus.q_max is not None and q_gen > bus.q_max + 1e-9:
            excess, pin = q_gen - bus.q_max, bus.q_max
        elif bus.q_min is not None and q_gen < bus.q_min - 1e-9:
            excess, pin = bus.q_min - q_gen, bus.q_min
        else:
            continue
        if worst is None or excess > worst[0]:
            worst = (excess, i, pin)
    if worst is None:
        return None
    _, i, pin = worst
    bus = comp.net.buses[i]
    new_bus = replace(bus, kind="pq", q_inj=pin, v_set=None)
    buses = list(comp.net.buses)
    buses[i] = new_bus
    new_net = replace(comp.net, buses=tuple(buses))
    return _Compiled(new_net), f"q-limit switch at bus {bus.id}"


def delivered_load_p(net: TransmissionNetwork, v_mag: np.ndarray, lam: float) -> float:
    """Total ZIP active power (pu) actually drawn at the given voltages."""
    comp = _Compiled(net)
    lp, _ = comp.load_pq(np.asarray(v_mag, float), lam)
    return float(np.sum(lp))


def check_power_balance(
    net: TransmissionNetwork,
    sol: PowerFlowSolution,
    lam: float = 1.0,
    injections: dict[str, complex] | None = None,
) -> float:
    """Recompute the mismatch from scratch; returns its max magnitude."""
    f = power_mismatch(net, sol, lam, injections)
    return float(np.max(np.abs(f))) if f.size else 0.0


__all__ = [
    "PowerFlowSolution",
    "build_ybus",
    "solve_newton",
    "power_mismatch",
    "jacobian",
    "make_state",
    "unknown_layout",
    "delivered_load_p",
    "check_power_balance",
]
