"""Receding-horizon loss minimisation as a second-order cone programme.

Internally each cell's accumulated energy is carried in the scaled form
``w = 2 (E + E0) / C`` (volts squared, equal to ``u(q)**2`` in the linearised
model). With that scaling the energy dynamics read
``w[k+1] = w[k] - (2 dt / C) P_b[k]``, the relaxed loss epigraph is
``P_l * w >= R_tot * P_b**2`` and the current bounds become
``i_min * sqrt(w) <= P_b <= i_max * sqrt(w)``. The helper functions below
take a generic ``energy``/``c_equiv`` pair so the same code builds both the
joule form and the scaled form (``c_equiv = 2``).

Array layout: controls ``P_b, P_l`` have shape ``(m, H)`` for steps
``k = 0..H-1``; states ``E, T`` and the balancing slacks have shape
``(m, H + 1)`` for ``k = 0..H`` with ``k = 0`` pinned to the measurement.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import cvxpy as cp
import numpy as np

from rbess.cell import CellParams, CellState, ThermalNetworkParams, equivalent_capacitance
from rbess.exceptions import (
    ClippedBoundWarning,
    DomainError,
    LikelyInfeasibleWarning,
    SolverError,
)
from rbess.ocv import OcvSegment
from rbess.topology import PackTopology

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"
INACCURATE = "inaccurate"  # internal only, never returned

DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class BalancingConfig:
    delta_q: float = 0.01
    delta_t: float = 0.5
    lambda_e: float = 3.0
    lambda_t: float = 0.5
    horizon_h: int = 20
    dt: float = 1.0

    def __post_init__(self):
        if self.delta_q < 0 or self.delta_t < 0:
            raise DomainError("balancing tolerances must be non-negative")
        if not (self.lambda_e > 0 and self.lambda_t > 0):
            raise DomainError("penalty weights must be positive")
        if int(self.horizon_h) != self.horizon_h or self.horizon_h < 1:
            raise DomainError(f"horizon must be a positive integer, got {self.horizon_h}")
        if not self.dt > 0:
            raise DomainError("dt must be positive")


# --- constraint builders -------------------------------------------------

def _col(x):
    """Broadcast a per-cell vector against an (m, K) expression."""
    if isinstance(x, cp.Expression):
        return x if len(x.shape) == 2 else cp.reshape(x, (x.shape[0], 1), order="F")
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def loss_epigraph(p_l, p_b, energy, r_total=None, c_equiv=None, *, root_coef=None):
    """Rotated cone ``p_l * energy >= (r_total * c_equiv / 2) * p_b**2``.

    ``energy`` is ``E + E0``. Pass ``root_coef = sqrt(r_total * c_equiv / 2)``
    directly (e.g. as a parameter) instead of the two numbers if preferred.
    Returns a list of constraints, elementwise over the arguments' shape.
    """
    if root_coef is None:
        root_coef = np.sqrt(np.asarray(r_total, dtype=float) * np.asarray(c_equiv, dtype=float) / 2.0)
    p_l, p_b, energy = (cp.Expression.cast_to_const(a) if not isinstance(a, cp.Expression) else a
                        for a in (p_l, p_b, energy))
    scaled = 2 * cp.multiply(_col(root_coef), p_b) if p_b.ndim == 2 else 2 * cp.multiply(root_coef, p_b)
    x = cp.vstack([cp.vec(scaled, order="F"), cp.vec(p_l - energy, order="F")])
    return [cp.SOC(cp.vec(p_l + energy, order="F"), x, axis=0), p_l >= 0, energy >= 0]


def current_bounds_cone(p_b, energy, i_min, i_max, c_equiv):
    """Current limits in power form, ``i_min*s <= p_b <= i_max*s`` with ``s = sqrt(2 energy / c_equiv)``.

    Numeric ``i_min`` must be non-positive; a zero lower limit yields the
    linear bound ``p_b >= 0``.
    """
    if not isinstance(i_min, cp.Expression):
        i_min_arr = np.asarray(i_min, dtype=float)
        if np.any(i_min_arr > 0):
            raise DomainError("i_min > 0 gives a non-convex lower bound; use i_min <= 0")
    two_over_c = 2.0 / np.asarray(c_equiv, dtype=float) if not isinstance(c_equiv, cp.Expression) else None
    if two_over_c is None:
        raise DomainError("c_equiv must be numeric")
    root = cp.sqrt(cp.multiply(_col(two_over_c) if p_b.ndim == 2 else two_over_c, energy))
    upper = _scale(i_max, p_b)
    cons = [p_b <= cp.multiply(upper, root)]
    if isinstance(i_min, cp.Expression):
        cons.append(-p_b <= cp.multiply(_scale(i_min, p_b), root))
    elif np.all(np.asarray(i_min) == 0):
        cons.append(p_b >= 0)
    else:
        cons.append(-p_b <= cp.multiply(_scale(-np.asarray(i_min, dtype=float), p_b), root))
    return cons


def _scale(v, like):
    return _col(v) if like.ndim == 2 else v


def soc_bounds_energy(q_min: float, q_max: float, segment: OcvSegment, c_equiv: float,
                      clip: bool = True) -> tuple[float, float]:
    """Bounds on ``E + E0`` equivalent to ``q_min <= q <= q_max``.

    With ``clip`` the SoC limits are first clipped to the segment's range (a
    :class:`ClippedBoundWarning` is emitted when that changes them); without
    it the segment line is extrapolated.
    """
    lo, hi = q_min, q_max
    if clip:
        lo, hi = max(q_min, segment.q_lo), min(q_max, segment.q_hi)
        if (lo, hi) != (q_min, q_max):
            warnings.warn(
                f"SoC bounds [{q_min}, {q_max}] clipped to segment [{lo}, {hi}]",
                ClippedBoundWarning, stacklevel=2,
            )
        if lo > hi:
            lo = hi = min(max(q_min, segment.q_lo), segment.q_hi)
    return 0.5 * c_equiv * segment.voltage(lo) ** 2, 0.5 * c_equiv * segment.voltage(hi) ** 2


def energy_tolerance(segment: OcvSegment, delta_q: float) -> float:
    """Balancing band on the squared OCV: ``(alpha + beta dq)**2 - alpha**2``."""
    return (segment.alpha + segment.beta * delta_q) ** 2 - segment.alpha ** 2


def balancing_constraints(sq_ocv, temps, delta_e, delta_t, xi_e, xi_t):
    """Slack-relaxed SoC and temperature balancing over the in-service rows.

    ``sq_ocv`` is ``2 (E + E0) / C`` per cell and step (rows are cells).
    Averages run over the rows, so only pass in-service cells.
    """
    m = sq_ocv.shape[0]
    avg_w = cp.sum(sq_ocv, axis=0, keepdims=True) / m
    avg_t = cp.sum(temps, axis=0, keepdims=True) / m
    dev_w = sq_ocv - avg_w
    dev_t = temps - avg_t
    band = cp.multiply(_col(delta_e), np.ones((1, sq_ocv.shape[1]))) + xi_e
    return [
        dev_w <= band, -dev_w <= band,
        dev_t <= delta_t + xi_t, -dev_t <= delta_t + xi_t,
        xi_e >= 0, xi_t >= 0,
    ]


# --- problem assembly ----------------------------------------------------

@dataclass
class _Template:
    problem: cp.Problem
    var: dict
    par: dict
    formulation: str


_TEMPLATES: "OrderedDict[tuple, _Template]" = OrderedDict()
_TEMPLATE_CACHE_SIZE = 32


def _neighbours(n, cells):
    """Chain Laplacian among ``cells`` plus the index lists of outside neighbours."""
    pos = {c: k for k, c in enumerate(cells)}
    m = len(cells)
    lap = np.zeros((m, m))
    outside = []
    for k, c in enumerate(cells):
        out = []
        for nb in (c - 1, c + 1):
            if 1 <= nb <= n:
                lap[k, k] += 1
                if nb in pos:
                    lap[k, pos[nb]] -= 1
                else:
                    out.append(nb)
        outside.append(out)
    return lap, outside


def _build_template(n, cells, H, zero_imin, formulation):
    m = len(cells)
    lap, _ = _neighbours(n, cells)
    P = {
        "w0": cp.Parameter(m, name="w0"),
        "t0": cp.Parameter(m, name="t0"),
        "gain_e": cp.Parameter(m, nonneg=True, name="gain_e"),   # 2 dt / C
        "gain_t": cp.Parameter(m, nonneg=True, name="gain_t"),   # dt / C_th
        "a_conv": cp.Parameter(m, nonneg=True, name="a_conv"),   # dt / (C_th R_conv)
        "a_cnd": cp.Parameter(m, nonneg=True, name="a_cnd"),     # dt / (C_th R_cnd)
        "drive": cp.Parameter(m, name="drive"),                  # constant heat inflow * dt / C_th
        "i_max": cp.Parameter(m, nonneg=True, name="i_max"),
        "neg_i_min": cp.Parameter(m, nonneg=True, name="neg_i_min"),
        "w_min": cp.Parameter(m, name="w_min"),
        "w_max": cp.Parameter(m, name="w_max"),
        "t_max": cp.Parameter(m, name="t_max"),
        "delta_e": cp.Parameter(m, nonneg=True, name="delta_e"),
        "delta_t": cp.Parameter(nonneg=True, name="delta_t"),
        "lam_e": cp.Parameter(nonneg=True, name="lam_e"),
        "lam_t": cp.Parameter(nonneg=True, name="lam_t"),
        "demand": cp.Parameter(H, name="demand"),
    }
    V = {
        "p_b": cp.Variable((m, H), name="p_b"),
        "w": cp.Variable((m, H + 1), name="w"),
        "temp": cp.Variable((m, H + 1), name="temp"),
        "xi_e": cp.Variable((m, H + 1), name="xi_e"),
        "xi_t": cp.Variable((m, H + 1), name="xi_t"),
    }
    p_b, w, T = V["p_b"], V["w"], V["temp"]
    w_now = w[:, :H]
    cons = [w[:, 0] == P["w0"], T[:, 0] == P["t0"]]
    cons.append(w[:, 1:] == w_now - cp.multiply(_col(P["gain_e"]), p_b))

    if formulation == "cone":
        P["root_r"] = cp.Parameter(m, nonneg=True, name="root_r")
        # (k p_l)(w / k) = p_l w: k balances the cone legs, which are otherwise
        # milliwatts against volts squared
        P["leg_k"] = cp.Parameter(m, pos=True, name="leg_k")
        P["leg_k_inv"] = cp.Parameter(m, pos=True, name="leg_k_inv")
        p_l = V["p_l"] = cp.Variable((m, H), name="p_l")
        cons += loss_epigraph(cp.multiply(_col(P["leg_k"]), p_l), p_b,
                              cp.multiply(_col(P["leg_k_inv"]), w_now), root_coef=P["root_r"])
        root = cp.sqrt(w_now)
        cons.append(p_b <= cp.multiply(_col(P["i_max"]), root))
        if all(zero_imin):
            cons.append(p_b >= 0)
        else:
            cons.append(-p_b <= cp.multiply(_col(P["neg_i_min"]), root))
        loss_obj = cp.sum(p_l)
    else:
        # frozen denominators: quadratic objective, affine constraints
        P["loss_coef"] = cp.Parameter((m, H), nonneg=True, name="loss_coef")  # r / w_hat
        P["cap_hi"] = cp.Parameter((m, H), nonneg=True, name="cap_hi")  # i_max sqrt(w_hat)
        P["cap_lo"] = cp.Parameter((m, H), nonneg=True, name="cap_lo")  # -i_min sqrt(w_hat)
        P["p_l_hat"] = cp.Parameter((m, H), nonneg=True, name="p_l_hat")
        P["heat_rise"] = cp.Parameter((m, H), nonneg=True, name="heat_rise")  # gain_t * p_l_hat
        cons.append(p_b <= P["cap_hi"])
        cons.append(-p_b <= P["cap_lo"])
        cons.append(w_now >= 0)
        p_l = P["p_l_hat"]
        loss_obj = cp.sum(cp.multiply(P["loss_coef"], cp.square(p_b)))

    T_now = T[:, :H]
    rise = cp.multiply(_col(P["gain_t"]), p_l) if formulation == "cone" else P["heat_rise"]
    cons.append(
        T[:, 1:] == T_now
        + rise
        - cp.multiply(_col(P["a_conv"]), T_now)
        - cp.multiply(_col(P["a_cnd"]), lap @ T_now)
        + _col(P["drive"])
    )
    cons += [w[:, 1:] >= _col(P["w_min"]), w[:, 1:] <= _col(P["w_max"])]
    cons.append(T[:, 1:] <= _col(P["t_max"]))
    if m >= 2:
        cons += balancing_constraints(w, T, P["delta_e"], P["delta_t"], V["xi_e"], V["xi_t"])
    else:
        cons += [V["xi_e"] == 0, V["xi_t"] == 0]
    cons.append(cp.sum(p_b, axis=0) - cp.sum(p_l, axis=0) == P["demand"])

    objective = loss_obj + P["lam_e"] * cp.sum(V["xi_e"]) + P["lam_t"] * cp.sum(V["xi_t"])
    problem = cp.Problem(cp.Minimize(objective), cons)
    return _Template(problem, V, P, formulation)


def _template(n, cells, H, zero_imin, formulation):
    key = (n, tuple(cells), H, tuple(zero_imin), formulation)
    tpl = _TEMPLATES.get(key)
    if tpl is None:
        tpl = _build_template(n, cells, H, zero_imin, formulation)
        _TEMPLATES[key] = tpl
        if len(_TEMPLATES) > _TEMPLATE_CACHE_SIZE:
            _TEMPLATES.popitem(last=False)
    else:
        _TEMPLATES.move_to_end(key)
    return tpl


@dataclass
class HorizonProblem:
    """Numeric data of one horizon problem over the in-service cells ``cells``.

    Per-cell arrays are ordered like ``cells`` (1-based physical ids).
    """

    n_total: int
    cells: tuple[int, ...]
    config: BalancingConfig
    net: ThermalNetworkParams
    demand: np.ndarray
    segments: tuple[OcvSegment, ...]
    c_equiv: np.ndarray
    e0: np.ndarray
    w0: np.ndarray
    r_total: np.ndarray
    i_min: np.ndarray
    i_max: np.ndarray
    w_min: np.ndarray
    w_max: np.ndarray
    delta_e: np.ndarray
    c_th: np.ndarray
    t0: np.ndarray
    t_max: np.ndarray
    t_outside: np.ndarray
    formulation: str = "cone"

    @property
    def horizon(self) -> int:
        return int(self.config.horizon_h)

    @property
    def size(self) -> int:
        return len(self.cells)

    @property
    def u0(self) -> np.ndarray:
        return np.sqrt(self.w0)
    def template(self) -> _Template:
        zero = tuple(bool(v == 0) for v in self.i_min)
        return _template(self.n_total, self.cells, self.horizon, zero, self.formulation)

    def power_caps(self) -> tuple[np.ndarray, np.ndarray]:
        """Largest deliverable output power per cell in discharge and charge, at k = 0."""
        u, r = self.u0, self.r_total
        with np.errstate(divide="ignore"):
            i_peak = np.where(r > 0, u / (2 * np.maximum(r, 1e-300)), np.inf)
        i_dis = np.minimum(self.i_max, i_peak)
        i_chg = self.i_min
        return u * i_dis - r * i_dis ** 2, u * i_chg - r * i_chg ** 2


def build_problem(
    states: Sequence[CellState],
    params: Sequence[CellParams],
    topology,
    demand_window: Sequence[float],
    config: BalancingConfig,
    net: ThermalNetworkParams | None = None,
    formulation: str = "cone",
) -> HorizonProblem:
    """Assemble the horizon problem for the in-service cells.

    ``topology`` is either a :class:`PackTopology` or an iterable of 1-based
    cell ids forming the in-service set. Each cell's OCV segment is the one
    containing its current SoC and stays fixed over the horizon.
    """
    net = net or ThermalNetworkParams()
    n = len(states)
    if len(params) != n:
        raise DomainError("need one CellParams per CellState")
    cells = tuple(sorted(topology.in_service if isinstance(topology, PackTopology) else topology))
    if not cells:
        raise DomainError("the in-service set is empty")
    if cells[0] < 1 or cells[-1] > n:
        raise DomainError(f"in-service ids must lie in 1..{n}")
    H = int(config.horizon_h)
    demand = np.asarray(demand_window, dtype=float).reshape(-1)
    if demand.shape[0] != H:
        raise DomainError(f"demand window needs {H} entries, got {demand.shape[0]}")
    if formulation not in ("cone", "qp"):
        raise DomainError(f"unknown formulation {formulation!r}")

    segs, c_eq, e0, w0, r, imin, imax, wmin, wmax, de, cth, t0, tmax = ([] for _ in range(13))
    for c in cells:
        p, s = params[c - 1], states[c - 1]
        if p.i_min > 0:
            raise DomainError("i_min > 0 gives a non-convex lower bound; use i_min <= 0")
        seg = p.ocv.segment_at(s.q)
        ce = equivalent_capacitance(p, seg)
        u0 = seg.voltage(s.q)
        lo, hi = soc_bounds_energy(p.q_min, p.q_max, seg, 2.0, clip=False)
        segs.append(seg)
        c_eq.append(ce)
        e0.append(0.5 * ce * u0 ** 2)
        w0.append(u0 ** 2)
        r.append(p.r_total)
        imin.append(p.i_min)
        imax.append(p.i_max)
        wmin.append(lo)
        wmax.append(hi)
        de.append(energy_tolerance(seg, config.delta_q))
        cth.append(p.c_th)
        t0.append(s.temp)
        tmax.append(p.t_max)
    _, outside = _neighbours(n, cells)
    t_out = [sum(states[nb - 1].temp for nb in out) for out in outside]
    prob = HorizonProblem(
        n_total=n, cells=cells, config=config, net=net, demand=demand,
        segments=tuple(segs), c_equiv=np.array(c_eq), e0=np.array(e0), w0=np.array(w0),
        r_total=np.array(r), i_min=np.array(imin), i_max=np.array(imax),
        w_min=np.array(wmin), w_max=np.array(wmax), delta_e=np.array(de),
        c_th=np.array(cth), t0=np.array(t0), t_max=np.array(tmax),
        t_outside=np.array(t_out, dtype=float), formulation=formulation,
    )
    dis, chg = prob.power_caps()
    if demand[0] > dis.sum() or demand[0] < chg.sum():
        warnings.warn(
            f"demand {demand[0]:.3f} W lies outside the pack capability "
            f"[{chg.sum():.3f}, {dis.sum():.3f}] W; solve is likely infeasible",
            LikelyInfeasibleWarning, stacklevel=2,
        )
    return prob


# --- solving ---------------------------------------------------------------

@dataclass
class HorizonPlan:
    """Optimal trajectories for one horizon, rows ordered like ``cells``."""

    cells: tuple[int, ...]
    status: str
    objective: float = float("nan")
    p_b: np.ndarray | None = None
    p_l: np.ndarray | None = None
    e: np.ndarray | None = None
    temp: np.ndarray | None = None
    xi_e: np.ndarray | None = None
    xi_t: np.ndarray | None = None
    sq_ocv: np.ndarray | None = None
    tightness: np.ndarray | None = None
    demand_residual: np.ndarray | None = None
    u0: np.ndarray | None = None
    solve_seconds: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def to_csv(self, path_or_buf=None, dt: float = 1.0) -> str | None:
        """Write the trajectories as ``k,t_s,cell,p_b_w,p_l_w,e_j,temp_k,xi_e,xi_t`` rows."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["k", "t_s", "cell", "p_b_w", "p_l_w", "e_j", "temp_k", "xi_e", "xi_t"])
        H = self.p_b.shape[1]
        for k in range(H + 1):
            for row, c in enumerate(self.cells):
                pb = self.p_b[row, k] if k < H else ""
                pl = self.p_l[row, k] if k < H else ""
                wr.writerow([k, k * dt, c, pb, pl, self.e[row, k], self.temp[row, k],
                             self.xi_e[row, k], self.xi_t[row, k]])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
        return None


def _set_params(tpl: _Template, prob: HorizonProblem, w_hat=None, p_l_hat=None, scale_legs=True):
    P = tpl.par
    cfg, net = prob.config, prob.net
    P["w0"].value = prob.w0
    P["t0"].value = prob.t0
    P["gain_e"].value = 2.0 * cfg.dt / prob.c_equiv
    P["i_max"].value = prob.i_max
    P["neg_i_min"].value = -prob.i_min
    P["w_min"].value = prob.w_min
    P["w_max"].value = prob.w_max
    P["t_max"].value = prob.t_max
    P["delta_e"].value = prob.delta_e
    P["delta_t"].value = cfg.delta_t
    P["lam_e"].value = cfg.lambda_e
    P["lam_t"].value = cfg.lambda_t
    gain_t = cfg.dt / prob.c_th
    P["gain_t"].value = gain_t
    P["a_conv"].value = gain_t / net.r_conv
    P["a_cnd"].value = gain_t / net.r_cnd
    P["drive"].value = gain_t * (net.t_env / net.r_conv + prob.t_outside / net.r_cnd)
    P["demand"].value = prob.demand
    if tpl.formulation == "cone":
        P["root_r"].value = np.sqrt(prob.r_total)
        share = max(float(np.max(np.abs(prob.demand))), 1.0) / prob.size
        p_l_typ = np.maximum(prob.r_total * share ** 2 / prob.w0, 1e-9)
        k = np.sqrt(prob.w0 / p_l_typ) if scale_legs else np.ones(prob.size)
        P["leg_k"].value = k
        P["leg_k_inv"].value = 1.0 / k
    else:
        P["loss_coef"].value = prob.r_total[:, None] / w_hat
        P["cap_hi"].value = prob.i_max[:, None] * np.sqrt(w_hat)
        P["cap_lo"].value = -prob.i_min[:, None] * np.sqrt(w_hat)
        P["p_l_hat"].value = p_l_hat
        P["heat_rise"].value = gain_t[:, None] * p_l_hat


_STATUS = {
    cp.OPTIMAL: OPTIMAL,
    cp.OPTIMAL_INACCURATE: INACCURATE,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
}


def _run(tpl: _Template, tol: float):
    # tight settings first, one looser retry if the solver stalls short of them
    status, diag = NUMERICAL_FAILURE, {}
    for gap, feas in ((1e-3, 1e-2), (1e-1, 1e-2)):
        opts = dict(tol_gap_abs=tol * gap, tol_gap_rel=tol * gap, tol_feas=tol * feas,
                    tol_ktratio=tol * 1e-2, max_iter=200)
        try:
            with warnings.catch_warnings():
                # inaccurate results are verified against the constraints in solve()
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                tpl.problem.solve(solver=cp.CLARABEL, warm_start=False, **opts)
        except cp.error.SolverError as exc:
            diag = {"error": str(exc)}
            continue
        stats = tpl.problem.solver_stats
        diag = {
            "solver": stats.solver_name if stats else None,
            "iterations": getattr(stats, "num_iters", None),
            "cvxpy_status": tpl.problem.status,
        }
        status = _STATUS.get(tpl.problem.status, NUMERICAL_FAILURE)
        if status in (OPTIMAL, INFEASIBLE):
            break
    return status, diag


def _max_violation(tpl: _Template) -> float:
    return max((float(np.max(c.violation())) for c in tpl.problem.constraints), default=0.0)


def solve(problem: HorizonProblem, tol: float = DEFAULT_TOL) -> HorizonPlan:
    """Solve ``problem`` and verify the result.

    Returns a plan whose status is ``optimal`` only when the solver converged
    and the demand equality holds to ``tol`` relative; otherwise the status
    is ``infeasible`` or ``numerical-failure`` and ``diagnostics`` says why.
    A solve that stalls just short of the solver's own gap target is accepted
    when every constraint is satisfied to ``tol`` on re-evaluation.
    """
    start = time.perf_counter()
    tpl = problem.template()
    H = problem.horizon
    if problem.formulation == "cone":
        # Clarabel occasionally stalls on one scaling of the cone and not the
        # other; the unscaled legs are the fallback
        for scale_legs in (True, False):
            _set_params(tpl, problem, scale_legs=scale_legs)
            status, diag = _run(tpl, tol)
            if not scale_legs:
                diag["unscaled_legs"] = True
            if status == INACCURATE and _max_violation(tpl) > tol:
                status = NUMERICAL_FAILURE
                diag["max_violation"] = _max_violation(tpl)
                diag["reason"] = "inaccurate solution violates constraints"
            if status in (OPTIMAL, INACCURATE, INFEASIBLE):
                break
    else:
        w_hat = np.repeat(problem.w0[:, None], H, axis=1)
        share = np.repeat(problem.demand[None, :], problem.size, axis=0) / problem.size
        p_l_hat = problem.r_total[:, None] * share ** 2 / w_hat
        status, diag = NUMERICAL_FAILURE, {}
        for _ in range(2):  # initial freeze + one refinement pass
            _set_params(tpl, problem, w_hat, p_l_hat)
            status, diag = _run(tpl, tol)
            if status not in (OPTIMAL, INACCURATE):
                break
            w_hat = np.maximum(tpl.var["w"].value[:, :H], 1e-9)
            p_l_hat = problem.r_total[:, None] * tpl.var["p_b"].value ** 2 / w_hat
    elapsed = time.perf_counter() - start
    plan = HorizonPlan(cells=problem.cells, status=status, solve_seconds=elapsed,
                       diagnostics=diag, u0=problem.u0)
    if status == INACCURATE:
        worst = _max_violation(tpl)
        plan.diagnostics["max_violation"] = worst
        if worst <= tol:
            status = plan.status = OPTIMAL
            plan.diagnostics["verified"] = True
        else:
            plan.status = NUMERICAL_FAILURE
            plan.diagnostics["reason"] = "inaccurate solution violates constraints"
    if status != OPTIMAL:
        return plan
    V = tpl.var
    p_b = V["p_b"].value
    w = V["w"].value
    if problem.formulation == "cone":
        p_l = V["p_l"].value
    else:
        p_l = problem.r_total[:, None] * p_b ** 2 / w[:, :H]
    exact = problem.r_total[:, None] * p_b ** 2 / w[:, :H]
    plan.p_b, plan.p_l, plan.sq_ocv = p_b, p_l, w
    plan.e = 0.5 * problem.c_equiv[:, None] * (w - problem.w0[:, None])
    plan.temp = V["temp"].value
    plan.xi_e, plan.xi_t = V["xi_e"].value, V["xi_t"].value
    plan.tightness = p_l - exact
    plan.demand_residual = p_b.sum(axis=0) - p_l.sum(axis=0) - problem.demand
    cfg = problem.config
    plan.objective = float(p_l.sum() + cfg.lambda_e * plan.xi_e.sum() + cfg.lambda_t * plan.xi_t.sum())
    scale = max(1.0, float(np.max(np.abs(problem.demand))))
    if problem.formulation == "cone" and np.max(np.abs(plan.demand_residual)) > tol * scale:
        plan.status = NUMERICAL_FAILURE
        plan.diagnostics["reason"] = "demand equality residual above tolerance"
    return plan


def extract_controls(plan: HorizonPlan) -> dict[int, tuple[float, float]]:
    """First-step ``(P_b, i_L)`` per in-service cell, with ``i_L = P_b / u(q)``."""
    if not plan.optimal:
        raise SolverError(f"cannot extract controls from a {plan.status} plan",
                          status=plan.status, diagnostics=plan.diagnostics)
    out = {}
    for row, c in enumerate(plan.cells):
        pb = float(plan.p_b[row, 0])
        out[c] = (pb, pb / float(plan.u0[row]))
    return out


def dump_conic_form(problem: HorizonProblem, path_or_buf=None) -> str | None:
    """Plain-text standard conic form ``min c'x  s.t.  b - A x in K``.

    Sections: ``objective`` (c and offset), ``rows`` (sparse A triplets and
    b), ``cones`` (zero/nonneg/soc block sizes in row order).
    """
    tpl = problem.template()
    if problem.formulation != "cone":
        raise DomainError("conic dump is only defined for the cone formulation")
    _set_params(tpl, problem)
    data, _, _ = tpl.problem.get_problem_data(cp.CLARABEL)
    A = data["A"].tocoo()
    dims = data["dims"]
    lines = ["# rbess conic standard form v1: minimize c'x subject to b - A x in K",
             f"variables {data['c'].shape[0]}", f"rows {A.shape[0]}",
             f"cones zero={dims.zero} nonneg={dims.nonneg} soc={','.join(map(str, dims.soc))}",
             "objective"]
    lines += [f"c {i} {v:.17g}" for i, v in enumerate(data["c"]) if v != 0]
    lines.append(f"offset {float(data.get('offset', 0.0) or 0.0):.17g}")
    lines.append("A")
    lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(A.row, A.col, A.data)]
    lines.append("b")
    lines += [f"{i} {v:.17g}" for i, v in enumerate(data["b"]) if v != 0]
    text = "\n".join(lines) + "\n"
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)
    return None


class PowerAllocator:
    """Stateless receding-horizon allocator with scikit-learn style parameters.

    ``plan`` solves one horizon; ``predict`` returns the first-step cell
    powers as a dict keyed by cell id.
    """

    def __init__(self, config: BalancingConfig | None = None, net: ThermalNetworkParams | None = None,
                 formulation: str = "cone", tol: float = DEFAULT_TOL):
        self.config = config
        self.net = net
        self.formulation = formulation
        self.tol = tol

    def get_params(self, deep=True):
        return {"config": self.config, "net": self.net, "formulation": self.formulation, "tol": self.tol}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def plan(self, states, params, in_service, demand_window) -> HorizonPlan:
        problem = build_problem(states, params, in_service, demand_window,
                                self.config or BalancingConfig(), self.net, self.formulation)
        return solve(problem, self.tol)

    def predict(self, states, params, in_service, demand_window) -> dict[int, float]:
        plan = self.plan(states, params, in_service, demand_window)
        return {c: pb for c, (pb, _) in extract_controls(plan).items()}


def pad_window(profile: Sequence[float], start: int, horizon: int) -> np.ndarray:
    """``profile[start:start + horizon]``, holding the last value past the end."""
    prof = np.asarray(profile, dtype=float)
    idx = np.minimum(np.arange(start, start + horizon), prof.shape[0] - 1)
    return prof[idx]
