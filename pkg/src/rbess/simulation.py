"""Closed-loop executor: optimise, apply first-step powers, step the plant.

Faults bypass a cell and trigger a reconfiguration before the next solve.
Cells whose optimal power stays below a small threshold are switched out of
the topology for that control period and re-admitted as soon as the optimiser
assigns them power again. A hardwired series string of the same cells runs
alongside as the loss baseline.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from rbess.cell import CellParams, CellState, ThermalNetworkParams, soc_update, thermal_step
from rbess.exceptions import DomainError, ScenarioError, SimulationAborted
from rbess.ocv import ocv_eval
from rbess.optimizer import (
    BalancingConfig,
    build_problem,
    dump_conic_form,
    pad_window,
    solve,
)
from rbess.profiles import LoadProfile
from rbess.topology import (
    PackTopology,
    ReconfigSpec,
    apply_reconfiguration,
    bypass,
    plan_reconfiguration,
)

SCHEMA_VERSION = "rbess.summary/1"
TRAJECTORY_HEADER = ["t_s", "cell", "q", "temp_k", "p_b_w", "p_l_w", "i_a", "in_service", "xi_e", "xi_t"]
BAND_EPS = 1e-9


@dataclass(frozen=True)
class FaultEvent:
    time: float
    cell: int


@dataclass(frozen=True)
class ReconfigInputs:
    v_target: float
    v_conv_max: float
    i_conv_max: float


@dataclass(frozen=True)
class InitialSpread:
    """Normal initial-condition distribution; ``*_std`` are standard deviations.

    Draws are truncated at ``truncate`` standard deviations; resistances are
    floored at ``r_floor``.
    """

    soc_mean: float = 0.90
    soc_std: float = math.sqrt(3.0) / 100
    temp_mean: float = 308.0
    temp_std: float = math.sqrt(3.0)
    r_std: float = 2e-3
    r_floor: float = 1e-3
    truncate: float = 3.0


def _truncated_normal(rng, mean, std, size, k):
    out = np.empty(size)
    for j in range(size):
        while True:
            z = rng.standard_normal()
            if abs(z) <= k:
                break
        out[j] = mean + std * z
    return out


def sample_initial(n: int, spread: InitialSpread, base: CellParams, seed: int):
    """Per-cell parameters and states drawn from ``spread`` with ``seed``."""
    rng = np.random.default_rng(seed)
    q = _truncated_normal(rng, spread.soc_mean, spread.soc_std, n, spread.truncate)
    t = _truncated_normal(rng, spread.temp_mean, spread.temp_std, n, spread.truncate)
    dr = _truncated_normal(rng, 0.0, spread.r_std, n, spread.truncate)
    r = np.maximum(base.r_int + dr, spread.r_floor)
    q = np.clip(q, 0.0, 1.0)
    params = tuple(base.with_(r_int=float(rj)) for rj in r)
    states = tuple(CellState(q=float(qj), temp=float(tj)) for qj, tj in zip(q, t))
    return params, states


@dataclass(frozen=True)
class Scenario:
    name: str
    cells: tuple[CellParams, ...]
    initial: tuple[CellState, ...]
    profile: LoadProfile
    config: BalancingConfig = field(default_factory=BalancingConfig)
    net: ThermalNetworkParams = field(default_factory=ThermalNetworkParams)
    faults: tuple[FaultEvent, ...] = ()
    reconfig: ReconfigInputs | None = None
    seed: int | None = None
    spread: InitialSpread | None = None
    solve_every: int = 1
    hold: str = "plan"
    bypass_threshold_w: float = 0.01
    formulation: str = "cone"
    tol: float = 1e-6
    baseline: bool = True
    profile_source: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "initial", tuple(self.initial))
        object.__setattr__(self, "faults", tuple(sorted(self.faults, key=lambda f: (f.time, f.cell))))
        n = len(self.cells)
        if n == 0:
            raise ScenarioError("a scenario needs at least one cell", field="cells")
        if len(self.initial) != n:
            raise ScenarioError(f"{len(self.initial)} initial states for {n} cells", field="initial")
        if abs(self.profile.dt - self.config.dt) > 1e-12 * max(1.0, self.config.dt):
            raise ScenarioError(
                f"profile step {self.profile.dt} s differs from dt={self.config.dt} s; resample explicitly",
                field="profile",
            )
        for ev in self.faults:
            if not 0 <= ev.time < self.profile.duration:
                raise ScenarioError(
                    f"fault on cell {ev.cell} at {ev.time} s lies outside the profile span "
                    f"[0, {self.profile.duration}) s", field="faults")
            if not 1 <= ev.cell <= n:
                raise ScenarioError(f"fault names cell {ev.cell}, pack has cells 1..{n}", field="faults")
        if int(self.solve_every) != self.solve_every or self.solve_every < 1:
            raise ScenarioError("solve_every must be a positive integer", field="solve_every")
        if self.hold not in ("plan", "zoh"):
            raise ScenarioError(f"hold must be 'plan' or 'zoh', got {self.hold!r}", field="hold")
        if self.bypass_threshold_w < 0:
            raise ScenarioError("bypass threshold must be non-negative", field="bypass_threshold_w")

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def steps(self) -> int:
        return len(self.profile)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass
class SimResult:
    """Per-step trajectories (rows = steps, columns = cells) and summary metrics.

    Row ``k`` holds the state at the start of step ``k`` and the controls
    applied over it. ``member`` marks cells in the optimiser's set, while
    ``in_service`` marks cells connected in the switch topology.
    """

    scenario: Scenario
    t: np.ndarray
    q: np.ndarray
    temp: np.ndarray
    p_b: np.ndarray
    p_l: np.ndarray
    i_l: np.ndarray
    in_service: np.ndarray
    member: np.ndarray
    xi_e: np.ndarray
    xi_t: np.ndarray
    objective: np.ndarray
    demand: np.ndarray
    delivered: np.ndarray
    baseline_loss: np.ndarray
    topology: list[str]
    topology_log: list[tuple[float, str, str]]
    final_q: np.ndarray
    final_temp: np.ndarray
    solves: int = 0
    solve_seconds: float = 0.0
    warnings: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def step_loss(self) -> np.ndarray:
        return np.nansum(self.p_l, axis=1)

    def trajectory_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRAJECTORY_HEADER)
        for k in range(self.t.shape[0]):
            for j in range(self.q.shape[1]):
                wr.writerow([
                    _num(self.t[k]), j + 1, _num(self.q[k, j]), _num(self.temp[k, j]),
                    _num(self.p_b[k, j]), _num(self.p_l[k, j]), _num(self.i_l[k, j]),
                    int(self.in_service[k, j]), _num(self.xi_e[k, j]), _num(self.xi_t[k, j]),
                ])
        return _emit(buf.getvalue(), path_or_buf)

    def topology_log_text(self, path_or_buf=None) -> str | None:
        lines = "".join(f"{_num(t)},{topo},{reason}\n" for t, topo, reason in self.topology_log)
        return _emit(lines, path_or_buf)

    def summary(self) -> dict:
        sc = self.scenario
        return {
            "schema": SCHEMA_VERSION,
            "scenario": sc.name,
            "seed": sc.seed,
            "cells": sc.n,
            "steps": int(self.t.shape[0]),
            "dt_s": sc.config.dt,
            "config": {
                "delta_q": sc.config.delta_q, "delta_t": sc.config.delta_t,
                "lambda_e": sc.config.lambda_e, "lambda_t": sc.config.lambda_t,
                "horizon_h": sc.config.horizon_h, "solve_every": sc.solve_every,
                "hold": sc.hold, "bypass_threshold_w": sc.bypass_threshold_w,
                "formulation": sc.formulation, "tol": sc.tol,
            },
            "metrics": _jsonable(self.metrics),
            "topology_changes": [
                {"t_s": float(t), "topology": topo, "reason": reason}
                for t, topo, reason in self.topology_log
            ],
            "solves": self.solves,
        }

    def write_outputs(self, outdir, stem: str = "run") -> dict[str, str]:
        from pathlib import Path

        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trajectory": out / f"{stem}_trajectory.csv",
            "topology": out / f"{stem}_topology.log",
            "summary": out / f"{stem}_summary.json",
        }
        self.trajectory_csv(paths["trajectory"])
        self.topology_log_text(paths["topology"])
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return {k: str(v) for k, v in paths.items()}


def _num(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _emit(text, path_or_buf):
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)
    return None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --- baseline --------------------------------------------------------------

def series_current(ocv, r, p_out: float) -> float:
    """Common current of a series string delivering ``p_out``.

    Root of ``R i**2 - U i + p_out = 0`` nearest zero (the smaller positive
    root when discharging).
    """
    U, R = float(np.sum(ocv)), float(np.sum(r))
    if R == 0:
        return p_out / U
    disc = U * U - 4.0 * R * p_out
    if disc < 0:
        raise DomainError(f"series string cannot deliver {p_out} W (peak {U * U / (4 * R):.3f} W)")
    return 2.0 * p_out / (U + math.sqrt(disc))


def step_hardwired_baseline(
    states: Sequence[CellState],
    params: Sequence[CellParams],
    p_out: float,
    dt: float,
    net: ThermalNetworkParams | None = None,
) -> tuple[list[CellState], float]:
    """One step of a series string without converters or switches.

    Returns the new states and the string loss ``sum R_j i**2``. The string
    is treated as its own adjacent thermal chain when ``net`` is given.
    """
    if len(states) != len(params):
        raise DomainError("need one CellParams per CellState")
    u = np.array([ocv_eval(p.ocv, s.q) for s, p in zip(states, params)])
    r = np.array([p.r_int for p in params])
    i = series_current(u, r, p_out)
    loss = float(np.sum(r) * i * i)
    q = soc_update([s.q for s in states], [p.capacity_Q for p in params], i, dt)
    temps = np.array([s.temp for s in states])
    if net is not None:
        temps = thermal_step(temps, np.full(len(states), i), params, net, dt)
    new = []
    for s, qj, tj in zip(states, q, temps):
        if not 0.0 <= qj <= 1.0:
            raise DomainError(f"series string drove SoC out of [0, 1]: {qj}")
        new.append(CellState(q=float(qj), temp=float(tj), in_service=s.in_service))
    return new, loss


# --- run -----------------------------------------------------------------

@dataclass
class RunState:
    """Mutable bookkeeping of a run between plant steps."""

    n: int
    healthy: set
    members: tuple
    base_topology: PackTopology
    topology: PackTopology
    spec: ReconfigSpec | None = None
    log: list = field(default_factory=list)
    messages: list = field(default_factory=list)


def _reconfigure(n, healthy, reconfig, p_peak):
    cells = sorted(healthy)
    if reconfig is None:
        return PackTopology.from_groups(n, [(c,) for c in cells]), None
    spec = plan_reconfiguration(reconfig.v_target, reconfig.v_conv_max, max(p_peak, 1e-9),
                                reconfig.i_conv_max, len(cells))
    return apply_reconfiguration(PackTopology.series(n), spec, available=cells), spec


def initial_run_state(scenario: Scenario) -> RunState:
    n = scenario.n
    healthy = {j + 1 for j, s in enumerate(scenario.initial) if s.in_service}
    if not healthy:
        raise ScenarioError("no cell is in service at the start", field="initial")
    topo, spec = _reconfigure(n, healthy, scenario.reconfig, scenario.profile.peak())
    rs = RunState(n, healthy, topo.in_service, topo, topo, spec)
    reason = f"initial {spec.label()}" if spec else "initial series"
    rs.log.append((0.0, topo.encode(), reason))
    return rs


def inject_fault(rs: RunState, event: FaultEvent, scenario: Scenario, t: float) -> RunState:
    """Bypass the faulted cell and reconfigure the remaining healthy cells."""
    c = event.cell
    if c not in rs.healthy:
        msg = f"fault on cell {c} at {t} s ignored: cell already isolated"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        rs.messages.append(msg)
        return rs
    if len(rs.healthy) == 1:
        raise SimulationAborted(f"fault on cell {c} at {t} s would isolate the last in-service cell")
    rs.healthy.discard(c)
    if c in rs.topology.in_service:
        rs.topology = bypass(rs.topology, c)
    rs.log.append((t, rs.topology.encode(), f"fault bypass cell {c}"))
    topo, spec = _reconfigure(rs.n, rs.healthy, scenario.reconfig, scenario.profile.peak())
    rs.base_topology, rs.topology, rs.spec = topo, topo, spec
    rs.members = topo.in_service
    rs.log.append((t, topo.encode(), f"reconfigure {spec.label()}" if spec else "reconfigure series"))
    return rs


def _cover_dropped(p_b, u, r, connected, dropped):
    """Shift the output of bypassed idle cells onto the connected ones.

    The (sub-threshold) output of the dropped cells is spread evenly over the
    connected cells' output, and each new output is converted back to ``P_b``.
    """
    idx_c = np.array(connected) - 1
    idx_d = np.array(dropped) - 1
    out = p_b - r * p_b ** 2 / u ** 2
    extra = float(np.sum(out[idx_d])) / idx_c.size
    p_b = p_b.copy()
    p_b[idx_d] = 0.0
    for j in idx_c:
        target = out[j] + extra
        if r[j] == 0:
            i = target / u[j]
        else:
            disc = u[j] ** 2 - 4 * r[j] * target
            i = 2 * target / (u[j] + math.sqrt(max(disc, 0.0)))
        p_b[j] = u[j] * i
    return p_b


def _idle_topology(base: PackTopology, idle: set) -> PackTopology:
    topo = base
    for c in sorted(idle):
        if len(topo.in_service) == 1:
            break
        topo = bypass(topo, c)
    return topo


def run(scenario: Scenario) -> SimResult:
    """Simulate the whole profile; raises :class:`SimulationAborted` on solver failure."""
    sc = scenario
    n, N, dt, H = sc.n, sc.steps, sc.config.dt, int(sc.config.horizon_h)
    params = sc.cells
    cap = np.array([p.capacity_Q for p in params])
    r_tot = np.array([p.r_total for p in params])
    q = np.array([s.q for s in sc.initial], dtype=float)
    T = np.array([s.temp for s in sc.initial], dtype=float)
    prof = sc.profile.p_out

    shape = (N, n)
    rec = {k: np.full(shape, np.nan) for k in ("q", "temp", "p_b", "p_l", "i_l", "xi_e", "xi_t")}
    in_srv = np.zeros(shape, dtype=bool)
    member = np.zeros(shape, dtype=bool)
    objective = np.full(N, np.nan)
    delivered = np.zeros(N)
    base_loss = np.full(N, np.nan)
    topo_str: list[str] = []

    rs = initial_run_state(sc)
    q_base = q.copy()
    pending = list(sc.faults)
    plan, k_plan, idx = None, -1, {}
    solves, solve_s = 0, 0.0
    idle_prev: set = set()

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for k in range(N):
            t = k * dt
            replan = plan is None or k - k_plan >= sc.solve_every
            while pending and pending[0].time <= t + 1e-9:
                ev = pending.pop(0)
                before = rs.members
                rs = inject_fault(rs, ev, sc, t)
                replan = replan or rs.members != before

            if replan:
                states = [CellState(q=float(np.clip(q[j], 0, 1)), temp=float(T[j])) for j in range(n)]
                window = pad_window(prof, k, H)
                problem = build_problem(states, params, rs.members, window, sc.config, sc.net,
                                        sc.formulation)
                plan = solve(problem, sc.tol)
                solves += 1
                solve_s += plan.solve_seconds
                if not plan.optimal:
                    dump = dump_conic_form(problem) if sc.formulation == "cone" else None
                    raise SimulationAborted(
                        f"optimizer returned {plan.status} at step {k} (t={t} s): {plan.diagnostics}",
                        step=k, dump=dump,
                    )
                k_plan = k
                idx = {c: row for row, c in enumerate(plan.cells)}

            col = 0 if sc.hold == "zoh" else min(k - k_plan, plan.p_b.shape[1] - 1)
            p_b = np.zeros(n)
            for c, row in idx.items():
                p_b[c - 1] = plan.p_b[row, col]
                rec["xi_e"][k, c - 1] = plan.xi_e[row, col]
                rec["xi_t"][k, c - 1] = plan.xi_t[row, col]
                member[k, c - 1] = True

            idle = {c for c in rs.members if abs(p_b[c - 1]) < sc.bypass_threshold_w}
            if idle != idle_prev:
                topo = _idle_topology(rs.base_topology, idle)
                if topo != rs.topology:
                    was = set(rs.topology.in_service)
                    now = set(topo.in_service)
                    parts = []
                    if was - now:
                        parts.append("idle bypass cells " + " ".join(map(str, sorted(was - now))))
                    if now - was:
                        parts.append("re-admit cells " + " ".join(map(str, sorted(now - was))))
                    rs.topology = topo
                    rs.log.append((t, topo.encode(), "; ".join(parts)))
                idle_prev = idle
            connected = set(rs.topology.in_service)

            u = np.array([ocv_eval(params[j].ocv, float(np.clip(q[j], 0, 1))) for j in range(n)])
            dropped = [c for c in rs.members if c not in connected]
            if dropped:
                p_b = _cover_dropped(p_b, u, r_tot, sorted(connected), dropped)
            i_l = np.zeros(n)
            for c in connected:
                i_l[c - 1] = p_b[c - 1] / u[c - 1]
            p_b_applied = u * i_l
            loss = r_tot * i_l * i_l
            delivered[k] = float(np.sum(p_b_applied - loss))

            rec["q"][k], rec["temp"][k] = q, T
            rec["p_b"][k], rec["p_l"][k], rec["i_l"][k] = p_b_applied, loss, i_l
            in_srv[k] = [j + 1 in connected for j in range(n)]
            objective[k] = plan.objective
            topo_str.append(rs.topology.encode())

            if sc.baseline:
                cells_b = [c - 1 for c in rs.members]
                try:
                    u_b = np.array([ocv_eval(params[j].ocv, float(np.clip(q_base[j], 0, 1))) for j in cells_b])
                    r_b = np.array([params[j].r_int for j in cells_b])
                    i_b = series_current(u_b, r_b, float(prof[k]))
                    base_loss[k] = float(np.sum(r_b) * i_b * i_b)
                    q_base[cells_b] = soc_update(q_base[cells_b], cap[cells_b], i_b, dt)
                except DomainError:
                    base_loss[k] = np.nan

            q = soc_update(q, cap, i_l, dt)
            T = thermal_step(T, i_l, params, sc.net, dt)

    msgs = rs.messages + [str(w.message) for w in caught]
    result = SimResult(
        scenario=sc, t=np.arange(N) * dt, q=rec["q"], temp=rec["temp"], p_b=rec["p_b"],
        p_l=rec["p_l"], i_l=rec["i_l"], in_service=in_srv, member=member, xi_e=rec["xi_e"],
        xi_t=rec["xi_t"], objective=objective, demand=prof.copy(), delivered=delivered,
        baseline_loss=base_loss, topology=topo_str, topology_log=rs.log, final_q=q, final_temp=T,
        solves=solves, solve_seconds=solve_s, warnings=list(dict.fromkeys(msgs)),
    )
    result.metrics = compute_metrics(result, sc.config)
    return result


# --- metrics -------------------------------------------------------------

def time_to_band(dev: np.ndarray, band: float, dt: float) -> float | None:
    """First time after which every entry of ``dev`` (steps x cells, NaN ignored) stays in band."""
    inside = np.all(np.nan_to_num(np.abs(dev), nan=0.0) <= band + BAND_EPS, axis=1)
    if inside.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    return 0.0 if outside.size == 0 else float((outside[-1] + 1) * dt)


def deviations(values: np.ndarray, member: np.ndarray) -> np.ndarray:
    """Deviation from the per-step mean over member cells; NaN elsewhere."""
    v = np.where(member, values, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(v, axis=1, keepdims=True)
    return v - mean


def _violation_after(dev, band, t_entry, dt):
    if t_entry is None:
        return None
    k0 = int(round(t_entry / dt))
    tail = np.abs(dev[k0:])
    if tail.size == 0:
        return 0.0
    return float(np.nanmax(np.maximum(np.nan_to_num(tail, nan=0.0) - band, 0.0)))


def compute_metrics(result: SimResult, config: BalancingConfig) -> dict:
    dt = config.dt
    params = result.scenario.cells
    member = result.member
    dq = deviations(result.q, member)
    dT = deviations(result.temp, member)
    t_soc = time_to_band(dq, config.delta_q, dt)
    t_temp = time_to_band(dT, config.delta_t, dt)
    p_out = np.where(member, result.p_b - result.p_l, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rms = np.sqrt(np.nanmean(p_out ** 2, axis=0))
    rms = np.nan_to_num(rms, nan=0.0)
    r_int = np.array([p.r_int for p in params])
    total = float(np.sum(result.step_loss) * dt)
    metrics = {
        "total_loss_j": total,
        "time_to_soc_band_s": t_soc,
        "time_to_temp_band_s": t_temp,
        "max_soc_violation_after_entry": _violation_after(dq, config.delta_q, t_soc, dt),
        "max_temp_violation_after_entry": _violation_after(dT, config.delta_t, t_temp, dt),
        "rms_power_w": rms.tolist(),
        "normalized_rms_power": (rms / rms.max()).tolist() if rms.max() > 0 else rms.tolist(),
        "normalized_r_int": (r_int / r_int.max()).tolist(),
        "max_power_residual_w": float(np.max(np.abs(result.delivered - result.demand))) if len(result.t) else 0.0,
        "max_slack_soc": float(np.nanmax(np.nan_to_num(result.xi_e, nan=0.0))) if len(result.t) else 0.0,
        "max_slack_temp": float(np.nanmax(np.nan_to_num(result.xi_t, nan=0.0))) if len(result.t) else 0.0,
    }
    if result.scenario.n >= 3 and np.ptp(r_int) > 0 and np.ptp(rms) > 0:
        metrics["spearman_r_vs_rms"] = float(spearmanr(r_int, rms).statistic)
    else:
        metrics["spearman_r_vs_rms"] = None
    if np.any(np.isfinite(result.baseline_loss)):
        ok = np.isfinite(result.baseline_loss)
        base_total = float(np.sum(result.baseline_loss[ok]) * dt)
        metrics["baseline_loss_j"] = base_total
        metrics["loss_delta_j"] = base_total - float(np.sum(result.step_loss[ok]) * dt)
        metrics["steps_rbess_le_baseline"] = float(
            np.mean(result.step_loss[ok] <= result.baseline_loss[ok] + 1e-12))
    else:
        metrics["baseline_loss_j"] = None
        metrics["loss_delta_j"] = None
        metrics["steps_rbess_le_baseline"] = None
    # the predictor heats cells with the whole path loss, the plant with r_int i**2 only
    plant_heat = r_int[None, :] * np.nan_to_num(result.i_l, nan=0.0) ** 2
    gap = np.where(result.in_service, np.nan_to_num(result.p_l, nan=0.0) - plant_heat, 0.0)
    metrics["heat_model_mismatch_j"] = float(np.sum(gap) * dt)
    metrics["max_heat_model_mismatch_w"] = float(np.max(np.abs(gap))) if gap.size else 0.0
    metrics["safety_soc_violations"] = int(np.sum(_soc_out(result)))
    return metrics


def _soc_out(result: SimResult) -> np.ndarray:
    qmin = np.array([p.q_min for p in result.scenario.cells])
    qmax = np.array([p.q_max for p in result.scenario.cells])
    q = np.vstack([result.q[1:], result.final_q[None, :]]) if len(result.t) else result.q
    return result.in_service & ((q < qmin - 1e-9) | (q > qmax + 1e-9))
