"""Voltage-stability margin engines.

Two engines, matching the two ways the problem is posed:

* :func:`trace_cpf` is a full predictor-corrector continuation power flow for
  monolithic networks (transmission-only, or a coupled system flattened into
  one network). A normalized tangent predictor and a locally parameterized
  corrector carry the trace through the nose onto the lower branch; the nose
  is then polished by parabolic refinement of the loading parameter over the
  fastest-moving voltage coordinate.

* :func:`nose_search_cosim` advances the load parameter on a coupled system
  with adaptive steps and bisects the first failure bracket. Two solvers
  plus an exchange loop do not expose a single Jacobian, so no tangent
  machinery applies; convergence failure is the feasibility signal.

The margin itself (:func:`compute_vsm`) is the difference in *delivered* ZIP
active power between the nose and the base point, converted to MW. Delivered
power deviates from the nominal schedule at depressed voltages, which is the
whole point of modeling voltage-dependent load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cosim, tpf
from .netmodel import CoupledSystem, ModelError, TransmissionNetwork
from .zipload import total_base_load

CPF_TOL = 1e-8


@dataclass(frozen=True)
class StepConfig:
    """Arc-length step control for the continuation trace."""

    initial: float = 0.05
    min_step: float = 1e-4
    max_step: float = 0.1
    grow_after: int = 2   # consecutive easy correctors before doubling
    easy_iters: int = 3   # corrector iteration count considered easy


@dataclass(eq=False)
class ContinuationState:
    """One accepted continuation point plus its predictor bookkeeping."""

    lam: float
    state: tpf.PowerFlowSolution
    tangent: np.ndarray | None
    continuation_index: int
    step: float


@dataclass(frozen=True, eq=False)
class CurvePoint:
    lam: float
    v_mag: dict[str, float]
    delivered_p: float
    solution: object | None = field(default=None, repr=False)

    def delivered_mw(self, s_base: float) -> float:
        return self.delivered_p * s_base


@dataclass(eq=False)
class PvCurve:
    points: list[CurvePoint]
    nose_index: int
    s_base: float
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("a P-V curve needs at least one point")
        if not 0 <= self.nose_index < len(self.points):
            raise ValueError("nose index out of range")
        if self.points[self.nose_index].lam < self.points[0].lam:
            raise ValueError("nose lambda below the first point")

    @property
    def nose(self) -> CurvePoint:
        return self.points[self.nose_index]

    @property
    def lambda_max(self) -> float:
        return self.nose.lam


class _CpfWork:
    """Pack/unpack between full (vm, va) arrays and the reduced unknown vector."""

    def __init__(self, comp: tpf._Compiled):
        self.comp = comp
        self.npvpq = len(comp.pvpq)
        self.npq = len(comp.pq)
        self.nx = self.npvpq + self.npq
        self.sx = np.zeros(comp.n, dtype=complex)

    def pack(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        return np.concatenate([va[self.comp.pvpq], vm[self.comp.pq]])

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        comp = self.comp
        vm = comp.v_set.copy()
        va = np.zeros(comp.n)
        va[comp.pvpq] = x[: self.npvpq]
        vm[comp.pq] = x[self.npvpq :]
        return vm, va

    def mismatch(self, x, lam):
        vm, va = self.unpack(x)
        return self.comp.mismatch(vm, va, lam, self.sx)

    def augmented(self, x, lam) -> np.ndarray:
        vm, va = self.unpack(x)
        jac = self.comp.jacobian(vm, va, lam)
        dlam = self.comp.dmismatch_dlam(vm)
        return np.hstack([jac, dlam[:, None]])

    def delivered_p(self, x, lam) -> float:
        vm, _ = self.unpack(x)
        return float(np.sum(self.comp.load_pq(vm, lam)[0]))

    def solution(self, x, lam, iterations, max_f) -> tpf.PowerFlowSolution:
        vm, va = self.unpack(x)
        return tpf.PowerFlowSolution(
            bus_ids=self.comp.bus_ids,
            v_mag=vm,
            v_ang=va,
            converged=True,
            iterations=iterations,
            max_mismatch=max_f,
        )


def _tangent(work: _CpfWork, x, lam, k: int, prev: np.ndarray | None) -> np.ndarray:
    """Unit tangent of the solution curve with component ``k`` pinned to +-1."""
    aug = work.augmented(x, lam)
    n = work.nx
    m = np.zeros((n + 1, n + 1))
    m[:n, :] = aug
    m[n, k] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    t = np.linalg.solve(m, rhs)
    if prev is not None:
        if float(np.dot(t, prev)) < 0.0:
            t = -t
    elif t[n] < 0.0:
        t = -t  # orient toward growing load on the upper branch
    return t / np.linalg.norm(t)


def _corrector(work: _CpfWork, x0, lam0, k: int, pin: float, tol=CPF_TOL, max_iter=25):
    """Newton on the augmented system with coordinate ``k`` held at ``pin``.

    Returns (x, lam, iterations, converged). Index ``work.nx`` pins lambda.
    """
    x = np.asarray(x0, float).copy()
    lam = float(lam0)
    n = work.nx
    for it in range(max_iter + 1):
        f = work.mismatch(x, lam)
        pin_res = (lam if k == n else x[k]) - pin
        max_f = max(float(np.max(np.abs(f))) if f.size else 0.0, abs(pin_res))
        if max_f <= tol:
            return x, lam, it, True
        if it == max_iter:
            break
        m = np.zeros((n + 1, n + 1))
        m[:n, :] = work.augmented(x, lam)
        m[n, k] = 1.0
        g = np.concatenate([f, [pin_res]])
        try:
            delta = np.linalg.solve(m, -g)
        except np.linalg.LinAlgError:
            return x, lam, it, False
        if not np.all(np.isfinite(delta)):
            return x, lam, it, False
        x += delta[:n]
        lam += delta[n]
        vm, _ = work.unpack(x)
        if np.any(vm[work.comp.pq] < 0.01) or lam < -1.0:
            return x, lam, it, False
    return x, lam, max_iter, False


# --- public wrappers over the array core --------------------------------------


def augmented_jacobian(net: TransmissionNetwork, state: tpf.PowerFlowSolution, lam: float) -> np.ndarray:
    """Mismatch Jacobian extended with the load-growth column, rows as in tpf."""
    work = _CpfWork(tpf._Compiled(net))
    x = work.pack(np.asarray(state.v_mag, float), np.asarray(state.v_ang, float))
    return work.augmented(x, lam)


def predictor_tangent(state: ContinuationState, aug_jacobian: np.ndarray) -> np.ndarray:
    """Normalized tangent with the continuation component pinned to +-1."""
    n = aug_jacobian.shape[1] - 1
    k = state.continuation_index
    m = np.zeros((n + 1, n + 1))
    m[:n, :] = aug_jacobian
    m[n, k] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    t = np.linalg.solve(m, rhs)
    prev = state.tangent
    if prev is not None:
        if float(np.dot(t, prev)) < 0.0:
            t = -t
    elif t[n] < 0.0:
        t = -t
    return t / np.linalg.norm(t)


def corrector_step(net: TransmissionNetwork | CoupledSystem, predicted: ContinuationState) -> ContinuationState:
    """Correct a predicted point back onto the solution curve.

    The continuation coordinate keeps its predicted value (local
    parameterization); everything else, including lambda when it is not the
    pinned coordinate, is free. Convergence is flagged on the returned
    power-flow state; the caller halves the step on failure.
    """
    net = _as_network(net)
    work = _CpfWork(tpf._Compiled(net))
    x0 = work.pack(np.asarray(predicted.state.v_mag, float), np.asarray(predicted.state.v_ang, float))
    k = predicted.continuation_index
    pin = predicted.lam if k == work.nx else x0[k]
    x, lam, it, ok = _corrector(work, x0, predicted.lam, k, pin)
    vm, va = work.unpack(x)
    f = work.mismatch(x, lam)
    sol = tpf.PowerFlowSolution(
        bus_ids=work.comp.bus_ids,
        v_mag=vm,
        v_ang=va,
        converged=ok,
        iterations=it,
        max_mismatch=float(np.max(np.abs(f))) if f.size else 0.0,
        cause=None if ok else "corrector failed",
    )
    return ContinuationState(lam=lam, state=sol, tangent=predicted.tangent,
                             continuation_index=k, step=predicted.step)


def _as_network(net: TransmissionNetwork | CoupledSystem) -> TransmissionNetwork:
    if isinstance(net, CoupledSystem):
        if net.feeders:
            raise ModelError("continuation trace needs a monolithic network; flatten the feeders first")
        return net.transmission
    return net


def _zero_load_guard(net: TransmissionNetwork) -> None:
    total = sum(b.native_load.p0 for b in net.buses if b.native_load is not None)
    if total <= 0.0:
        raise ModelError("zero load direction: nothing to scale along lambda")


def trace_cpf(
    net: TransmissionNetwork | CoupledSystem,
    max_points: int = 200,
    step_cfg: StepConfig | None = None,
    refine_nose: bool = True,
    monitor_v_floor: float = 0.15,
) -> PvCurve:
    """Trace the P-V curve from the base case through the nose.

    Stops a handful of points onto the lower branch (enough to bracket the
    nose), then refines the fold location. Corrector failures shrink the step;
    hitting the minimum step truncates the trace with a warning instead of
    raising.
    """
    s_base = net.s_base if isinstance(net, CoupledSystem) else 100.0
    network = _as_network(net)
    _zero_load_guard(network)
    cfg = step_cfg or StepConfig()

    base = tpf.solve_newton(network, lam=1.0)
    if not base.converged:
        raise ModelError(f"base case does not solve: {base.cause}")
    work = _CpfWork(tpf._Compiled(network))
    x = work.pack(np.asarray(base.v_mag, float), np.asarray(base.v_ang, float))
    lam = 1.0
    lam_index = work.nx

    warnings: list[str] = []
    points = [_cpf_point(work, x, lam, base)]
    xs = [x.copy()]
    lams = [lam]

    tangent: np.ndarray | None = None
    k = lam_index
    step = cfg.initial
    easy = 0
    post_nose = 0
    lam_best = lam

    while len(points) < max_points:
        try:
            t = _tangent(work, x, lam, k, tangent)
        except np.linalg.LinAlgError:
            if tangent is None:
                warnings.append("singular augmented system at the base point")
                break
            t = tangent
        k_next = int(np.argmax(np.abs(t)))
        x_pred = x + step * t[: work.nx]
        lam_pred = lam + step * t[work.nx]
        pin = lam_pred if k_next == lam_index else x_pred[k_next]
        x_new, lam_new, iters, ok = _corrector(work, x_pred, lam_pred, k_next, pin)
        if not ok:
            step *= 0.5
            easy = 0
            if step < cfg.min_step:
                warnings.append("corrector failed below the minimum step; curve truncated")
                break
            continue
        tangent, k = t, k_next
        x, lam = x_new, lam_new
        sol = work.solution(x, lam, iters, 0.0)
        points.append(_cpf_point(work, x, lam, sol))
        xs.append(x.copy())
        lams.append(lam)
        if iters < cfg.easy_iters:
            easy += 1
            if easy >= cfg.grow_after:
                step = min(2.0 * step, cfg.max_step)
                easy = 0
        else:
            easy = 0
        if lam < lams[-2]:
            post_nose += 1
        lam_best = max(lam_best, lam)
        vm, _ = work.unpack(x)
        if post_nose >= 6:
            break
        if lam <= lam_best - max(0.05, 0.1 * (lam_best - 1.0)):
            break
        if work.npq and float(np.min(vm[work.comp.pq])) < monitor_v_floor:
            break
        if lam < lams[0]:
            break

    nose_i = int(np.argmax(lams))
    if refine_nose and 0 < nose_i < len(lams) - 1:
        inserted = _refine_nose(work, xs, lams, nose_i, tangent)
        for pos, (x_r, lam_r, sol_r) in inserted:
            points.insert(pos, _cpf_point(work, x_r, lam_r, sol_r))
            lams.insert(pos, lam_r)
            xs.insert(pos, x_r)
        nose_i = int(np.argmax(lams))

    return PvCurve(points=points, nose_index=nose_i, s_base=s_base, warnings=tuple(warnings))


def _cpf_point(work: _CpfWork, x, lam, sol) -> CurvePoint:
    vm, _ = work.unpack(x)
    v_mag = {b: float(vm[i]) for i, b in enumerate(work.comp.bus_ids)}
    return CurvePoint(lam=float(lam), v_mag=v_mag, delivered_p=work.delivered_p(x, lam), solution=sol)


def _refine_nose(work: _CpfWork, xs, lams, nose_i, tangent):
    """Parabolic max of lambda over the fastest voltage coordinate near the fold."""
    if work.npq == 0:
        return []
    if tangent is not None:
        k = work.npvpq + int(np.argmax(np.abs(tangent[work.npvpq : work.nx])))
    else:
        k = work.npvpq
    tri = [(xs[i][k], lams[i], xs[i]) for i in (nose_i - 1, nose_i, nose_i + 1)]
    inserted = []
    best_lam = lams[nose_i]
    for _ in range(12):
        tri.sort(key=lambda p: p[1], reverse=True)
        (v2, l2, x2), (v1, l1, _), (v3, l3, _) = tri[0], tri[1], tri[2]
        d21, d23 = v2 - v1, v2 - v3
        num = d21 * d21 * (l2 - l3) - d23 * d23 * (l2 - l1)
        den = d21 * (l2 - l3) - d23 * (l2 - l1)
        if abs(den) < 1e-300 or not np.isfinite(num / den):
            break
        v_hat = v2 - 0.5 * num / den
        if abs(v_hat - v2) < 1e-12:
            break
        x_pred = x2.copy()
        x_pred[k] = v_hat
        x_new, lam_new, iters, ok = _corrector(work, x_pred, l2, k, v_hat)
        if not ok:
            break
        tri[2] = (v_hat, lam_new, x_new)
        if lam_new > best_lam:
            sol = work.solution(x_new, lam_new, iters, 0.0)
            inserted.append((nose_i + 1, (x_new, lam_new, sol)))
            if lam_new - best_lam < 1e-10:
                best_lam = lam_new
                break
            best_lam = lam_new
    return inserted


def nose_search_cosim(
    sys: CoupledSystem,
    initial_step: float = 0.05,
    resolution: float = 1e-4,
    lam_cap: float = 64.0,
    tol: float = cosim.DEFAULT_TOL,
    max_exchanges: int = cosim.MAX_EXCHANGES,
    accelerate: bool = True,
    retry_scales: tuple[float, ...] = (0.9, 0.8),
) -> tuple[float, PvCurve]:
    """Loadability limit of a coupled system by adaptive stepping and bisection.

    Warm-starts every coupled solve from the last converged point. A failed
    load level is retried from depressed-voltage warm starts before it is
    declared infeasible: past the boundary's own maximum-transfer point the
    coupled solution sits on the low transmission root, which a high warm
    start never reaches. Returns the largest converged lambda (within
    ``resolution`` of the feasibility boundary) and the curve of converged
    points only.
    """
    if total_base_load(sys).real <= 0.0:
        raise ModelError("zero load direction: nothing to scale along lambda")
    base = cosim.solve_coupled(sys, 1.0, tol=tol, max_exchanges=max_exchanges, accelerate=accelerate)
    if not base.converged:
        raise ModelError(f"base coupled case does not converge: {base.cause}")

    def attempt(lam_try: float, warm: cosim.CoupledSolution) -> cosim.CoupledSolution:
        sol = cosim.solve_coupled(sys, lam_try, warm=warm, tol=tol,
                                  max_exchanges=max_exchanges, accelerate=accelerate)
        if sol.converged or not accelerate:
            return sol
        for scale in retry_scales:
            retry = cosim.solve_coupled(sys, lam_try, warm=cosim.depressed_start(warm, scale),
                                        tol=tol, max_exchanges=max_exchanges, accelerate=accelerate)
            if retry.converged:
                return retry
        return sol

    warnings: list[str] = []
    points = [_cosim_point(sys, base, 1.0)]
    lam_ok, sol_ok = 1.0, base
    lam_bad: float | None = None
    step = initial_step
    streak = 0
    reopens = 4  # budget for probing past a failure bracket

    while True:
        if lam_bad is None:
            lam_try = lam_ok + step
            if lam_try > lam_cap:
                warnings.append(f"search stopped at the lambda cap {lam_cap}")
                break
        elif lam_bad - lam_ok > resolution:
            lam_try = 0.5 * (lam_ok + lam_bad)
        else:
            # resolution reached; make sure the bracket is the actual limit
            # and not an exchange dead zone by probing a little beyond it
            lam_try = None
            if reopens > 0:
                for k in (1, 2, 3):
                    probe = lam_bad + k * max(initial_step, 10 * resolution)
                    sol = attempt(probe, sol_ok)
                    if sol.converged:
                        lam_ok, sol_ok = probe, sol
                        points.append(_cosim_point(sys, sol, probe))
                        lam_bad = None
                        step = initial_step
                        streak = 0
                        reopens -= 1
                        lam_try = -1.0  # sentinel: continue the outer loop
                        break
            if lam_try is None:
                break
            continue
        sol = attempt(lam_try, sol_ok)
        if sol.converged:
            lam_ok, sol_ok = lam_try, sol
            points.append(_cosim_point(sys, sol, lam_try))
            if lam_bad is None:
                streak += 1
                if streak >= 2:
                    step = min(2.0 * step, 0.25)
                    streak = 0
        else:
            lam_bad = lam_try
            streak = 0

    curve = PvCurve(points=points, nose_index=len(points) - 1, s_base=sys.s_base, warnings=tuple(warnings))
    return lam_ok, curve


def _cosim_point(sys: CoupledSystem, sol: cosim.CoupledSolution, lam: float) -> CurvePoint:
    ts = sol.transmission
    v_mag = {b: float(ts.v_mag[i]) for i, b in enumerate(ts.bus_ids)}
    return CurvePoint(lam=lam, v_mag=v_mag, delivered_p=cosim.delivered_total_p(sys, sol, lam), solution=sol)


def compute_vsm(curve: PvCurve, base_point: int = 0, s_base: float | None = None) -> float:
    """Margin in MW: delivered ZIP power at the nose minus at the base point."""
    s = curve.s_base if s_base is None else s_base
    return (curve.nose.delivered_p - curve.points[base_point].delivered_p) * s


def vsm_lambda_based(curve: PvCurve, sys: CoupledSystem, base_point: int = 0) -> float:
    """Alternative margin: (lambda_max - lambda_base) times the nominal base load."""
    d_lam = curve.lambda_max - curve.points[base_point].lam
    return d_lam * total_base_load(sys).real * curve.s_base


__all__ = [
    "StepConfig",
    "ContinuationState",
    "CurvePoint",
    "PvCurve",
    "augmented_jacobian",
    "predictor_tangent",
    "corrector_step",
    "trace_cpf",
    "nose_search_cosim",
    "compute_vsm",
    "vsm_lambda_based",
]
