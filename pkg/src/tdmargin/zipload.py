"""Voltage-dependent ZIP load model with a scalable base power.

A ZIP load splits its base power into constant-impedance (Z), constant-current
(I) and constant-power (P) fractions. The drawn power at voltage ``v`` is

    p = lam * p0 * (pz*(v/v0)**2 + pi*(v/v0) + pp)

and analogously for the reactive part. ``lam`` is the load-growth parameter
used by the margin engines; it scales the base power, never the fractions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .netmodel import CoupledSystem

FRACTION_TOL = 1e-12


@dataclass(frozen=True)
class ZipLoad:
    """Composite voltage-dependent load, per unit on the system base.

    Reactive fractions default to the active ones when omitted, matching the
    common single-profile notation [pz pi pp]. Defaults describe a pure
    constant-power load.
    """

    p0: float
    q0: float = 0.0
    pz: float = 0.0
    pi: float = 0.0
    pp: float = 1.0
    qz: float | None = None
    qi: float | None = None
    qp: float | None = None
    v0: float = 1.0

    def __post_init__(self) -> None:
        qfr = (self.qz, self.qi, self.qp)
        if all(f is None for f in qfr):
            object.__setattr__(self, "qz", self.pz)
            object.__setattr__(self, "qi", self.pi)
            object.__setattr__(self, "qp", self.pp)
        elif any(f is None for f in qfr):
            raise ValueError("reactive ZIP fractions must be given all together or not at all")
        if self.v0 <= 0:
            raise ValueError(f"nominal voltage must be positive, got {self.v0}")
        p_sum = self.pz + self.pi + self.pp
        if abs(p_sum - 1.0) > FRACTION_TOL:
            raise ValueError(f"active ZIP fractions sum to {p_sum!r}, expected 1")
        q_sum = self.qz + self.qi + self.qp
        if abs(q_sum - 1.0) > FRACTION_TOL:
            raise ValueError(f"reactive ZIP fractions sum to {q_sum!r}, expected 1")

    @classmethod
    def constant_power(cls, p0: float, q0: float = 0.0) -> "ZipLoad":
        return cls(p0=p0, q0=q0, pz=0.0, pi=0.0, pp=1.0)


def eval_zip(load: ZipLoad, v: float, lam: float = 1.0) -> tuple[float, float]:
    """Active and reactive power drawn by ``load`` at voltage ``v``, scaled by ``lam``."""
    if v < 0:
        raise ValueError(f"voltage must be nonnegative, got {v}")
    if lam < 0:
        raise ValueError(f"load scale must be nonnegative, got {lam}")
    u = v / load.v0
    p = lam * load.p0 * (load.pz * u * u + load.pi * u + load.pp)
    q = lam * load.q0 * (load.qz * u * u + load.qi * u + load.qp)
    return p, q


def zip_dp_dv(load: ZipLoad, v: float, lam: float = 1.0) -> tuple[float, float]:
    """Voltage sensitivities (dp/dv, dq/dv) of the drawn power at voltage ``v``."""
    u = v / load.v0
    dp = lam * load.p0 * (2.0 * load.pz * u + load.pi) / load.v0
    dq = lam * load.q0 * (2.0 * load.qz * u + load.qi) / load.v0
    return dp, dq


def _scaled(load: ZipLoad, lam: float) -> ZipLoad:
    return replace(load, p0=lam * load.p0, q0=lam * load.q0)


def scale_loads(sys: "CoupledSystem", lam: float) -> "CoupledSystem":
    """Copy of ``sys`` with every ZIP base power multiplied by ``lam``.

    Fractions and nominal voltages are untouched, so the growth keeps each
    load's power factor and voltage shape.
    """
    if lam < 0:
        raise ValueError(f"load scale must be nonnegative, got {lam}")
    buses = tuple(
        replace(b, native_load=_scaled(b.native_load, lam)) if b.native_load is not None else b
        for b in sys.transmission.buses
    )
    feeders = tuple(
        replace(f, loads={n: _scaled(ld, lam) for n, ld in f.loads.items()})
        for f in sys.feeders
    )
    return replace(sys, transmission=replace(sys.transmission, buses=buses), feeders=feeders)


def total_base_load(sys: "CoupledSystem") -> complex:
    """Sum of all ZIP base powers (pu), feeder loads counted with replication."""
    total = 0j
    for b in sys.transmission.buses:
        if b.native_load is not None:
            total += complex(b.native_load.p0, b.native_load.q0)
    for f in sys.feeders:
        for ld in f.loads.values():
            total += f.replication * complex(ld.p0, ld.q0)
    return total
