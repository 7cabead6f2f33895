"""Rint electrical model, lumped thermal chain, and the accumulated-energy frame.

Sign convention: positive current / power is discharge. Capacities are given
in ampere-hours and converted to ampere-seconds internally; temperatures are
in kelvin and energies in joules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from rbess._validation import check_positive, check_soc, check_vector
from rbess.exceptions import DomainError, EnergyFrameError
from rbess.ocv import OcvCurve, OcvSegment, default_ocv_curve, ocv_eval

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class CellParams:
    """Static description of one cell module (cell, converter and switches)."""

    capacity_Q: float = 2.5
    r_int: float = 31.3e-3
    r_conv_dc: float = 10e-3
    r_switch: float = 5e-3
    q_min: float = 0.05
    q_max: float = 0.95
    i_min: float = -10.0
    i_max: float = 10.0
    t_max: float = 328.15
    c_th: float = 40.23
    ocv: OcvCurve = field(default_factory=default_ocv_curve, compare=True)

    def __post_init__(self):
        check_positive(self.capacity_Q, "capacity_Q")
        check_positive(self.c_th, "c_th")
        for name in ("r_int", "r_conv_dc", "r_switch"):
            check_positive(getattr(self, name), name, strict=False)
        if not (0.0 <= self.q_min < self.q_max <= 1.0):
            raise DomainError(f"need 0 <= q_min < q_max <= 1, got [{self.q_min}, {self.q_max}]")
        if not (self.i_min <= 0.0 <= self.i_max):
            raise DomainError(f"need i_min <= 0 <= i_max, got [{self.i_min}, {self.i_max}]")
        check_positive(self.t_max, "t_max")

    @property
    def r_total(self) -> float:
        return self.r_int + self.r_conv_dc + self.r_switch

    @property
    def capacity_As(self) -> float:
        return self.capacity_Q * SECONDS_PER_HOUR

    def with_(self, **changes) -> "CellParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class ThermalNetworkParams:
    r_conv: float = 41.05
    r_cnd: float = 26.6
    t_env: float = 298.0

    def __post_init__(self):
        check_positive(self.r_conv, "r_conv")
        check_positive(self.r_cnd, "r_cnd")
        check_positive(self.t_env, "t_env")


@dataclass(frozen=True)
class CellState:
    q: float
    temp: float
    in_service: bool = True

    def __post_init__(self):
        check_soc(self.q)
        check_positive(self.temp, "temp")


@dataclass(frozen=True)
class EnergyFrame:
    """Accumulated energy ``e`` relative to ``e0 = c_equiv * u(q0)**2 / 2``."""

    c_equiv: float
    e0: float
    e: float
    segment_index: int
    segment: OcvSegment

    def __post_init__(self):
        if not self.e + self.e0 > 0:
            raise EnergyFrameError(f"non-physical energy frame: e + e0 = {self.e + self.e0}")

    @property
    def squared_ocv(self) -> float:
        """``2 (e + e0) / c_equiv``, i.e. u(q)**2."""
        return 2.0 * (self.e + self.e0) / self.c_equiv


def soc_step(state: CellState, params: CellParams, i_L: float, dt: float) -> CellState:
    """Coulomb-count one step. The result is not clamped to ``[q_min, q_max]``."""
    check_positive(dt, "dt")
    q = state.q - i_L * dt / params.capacity_As
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"SoC left [0, 1] after step: {q}")
    return replace(state, q=q)


def soc_update(q, capacity_Q, i_L, dt):
    """Vectorised counterpart of :func:`soc_step` on raw arrays."""
    return np.asarray(q, float) - np.asarray(i_L, float) * dt / (np.asarray(capacity_Q, float) * SECONDS_PER_HOUR)


def terminal_voltage(params: CellParams, q: float, i_L: float) -> float:
    return ocv_eval(params.ocv, q) - params.r_int * i_L


def module_power(params: CellParams, q: float, i_L: float) -> tuple[float, float, float]:
    """Internal, output and lost power of one module.

    Returns
    -------
    (p_internal, p_out, p_loss) in watts, with ``p_loss = r_total * i_L**2``.
    """
    u = ocv_eval(params.ocv, q)
    p_internal = u * i_L
    p_loss = params.r_total * i_L * i_L
    return p_internal, p_internal - p_loss, p_loss


def _conduction(temps, neighbor_temps=None):
    """Net conductive outflow numerator ``sum_nbr (T_j - T_nbr)`` along the chain.

    Missing neighbours at the chain ends contribute nothing (adiabatic ends).
    """
    out = np.zeros_like(temps)
    out[:-1] += temps[:-1] - temps[1:]
    out[1:] += temps[1:] - temps[:-1]
    return out


def thermal_step(
    temps: Sequence[float],
    currents: Sequence[float],
    params: Sequence[CellParams],
    net: ThermalNetworkParams,
    dt: float,
) -> np.ndarray:
    """Forward-Euler update of the lumped thermal chain.

    Every cell is included whether or not it is in service; bypassed cells
    simply carry zero current. Heat generation is ``r_int * i**2`` only.
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    T = check_vector(temps, name="temps")
    i = check_vector(currents, n=T.shape[0], name="currents")
    if len(params) != T.shape[0]:
        raise DomainError("need one CellParams per cell")
    r = np.array([p.r_int for p in params])
    c_th = np.array([p.c_th for p in params])
    heat = r * i * i
    conv = (T - net.t_env) / net.r_conv
    cnd = _conduction(T) / net.r_cnd
    return T + dt / c_th * (heat - conv - cnd)


def equivalent_capacitance(params: CellParams, segment: OcvSegment) -> float:
    return params.capacity_As / segment.beta


def to_energy_frame(
    params: CellParams,
    q: float,
    q0: float | None = None,
    segment_index: int | None = None,
) -> EnergyFrame:
    """Map SoC ``q`` into the energy frame anchored at ``q0`` (default: ``q``).

    The linear segment is the one containing ``q0`` unless given explicitly.
    """
    q = check_soc(q)
    q0 = q if q0 is None else check_soc(q0)
    if segment_index is None:
        segment_index = params.ocv.segment_index(q0)
    seg = params.ocv.segments[segment_index]
    if not seg.contains(q):
        raise DomainError(f"q={q} lies outside segment [{seg.q_lo}, {seg.q_hi}]")
    c = equivalent_capacitance(params, seg)
    e0 = 0.5 * c * seg.voltage(q0) ** 2
    e = 0.5 * c * seg.voltage(q) ** 2 - e0
    return EnergyFrame(c_equiv=c, e0=e0, e=e, segment_index=segment_index, segment=seg)


def from_energy_frame(frame: EnergyFrame) -> float:
    total = frame.e + frame.e0
    if not total > 0:
        raise EnergyFrameError(f"non-physical energy frame: e + e0 = {total}")
    seg = frame.segment
    return (math.sqrt(2.0 * total / frame.c_equiv) - seg.alpha) / seg.beta
