"""YAML scenario files: schema validation with line-precise errors, and writing.

Top-level sections (all keys other than those listed are rejected)::

    name, seed, baseline
    cells:          count, params, spread | initial
    thermal:        r_conv, r_cnd, t_env
    balancing:      delta_q, delta_t, lambda_e, lambda_t, horizon_h, dt
    reconfiguration: v_target, v_conv_max, i_conv_max   (or null)
    profile:        kind = udds | constant | file | inline, plus its fields
    faults:         list of {time_s, cell}
    solver:         solve_every, hold, bypass_threshold_w, formulation, tol

``cells.initial`` lists per-cell ``q``, ``temp`` and optional overrides of
any ``params`` field (e.g. ``r_int``); otherwise ``cells.spread`` draws them
with ``seed``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml
from yaml.constructor import SafeConstructor

from rbess.cell import CellParams, CellState, ThermalNetworkParams
from rbess.exceptions import RbessError, ScenarioError
from rbess.ocv import OcvCurve, default_ocv_curve, fit_piecewise_linear, load_ocv_table
from rbess.optimizer import BalancingConfig
from rbess.profiles import LoadProfile, constant_profile, load_profile, resample, scaled_udds
from rbess.simulation import FaultEvent, InitialSpread, ReconfigInputs, Scenario, sample_initial

SCENARIO_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"

_TOP = {"version", "name", "seed", "baseline", "cells", "thermal", "balancing",
        "reconfiguration", "profile", "faults", "solver"}
_PARAM_KEYS = {f.name for f in dataclasses.fields(CellParams)}
_SPREAD_KEYS = {f.name for f in dataclasses.fields(InitialSpread)}
_SOLVER_KEYS = {"solve_every", "hold", "bypass_threshold_w", "formulation", "tol"}
_PROFILE_KEYS = {
    "udds": {"kind", "peak_w", "duration_s"},
    "constant": {"kind", "p_out_w", "duration_s"},
    "file": {"kind", "path"},
    "inline": {"kind", "p_out_w"},
}


class _Node:
    """Plain Python value plus the source line of every mapping key and item."""

    def __init__(self, node):
        self.line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            self.value = {}
            self.key_lines = {}
            for k, v in node.value:
                key = k.value
                if key in self.value:
                    raise ScenarioError("duplicate key", line=k.start_mark.line + 1, field=key)
                self.value[key] = _Node(v)
                self.key_lines[key] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            self.value = [_Node(v) for v in node.value]
        else:
            self.value = SafeConstructor().construct_object(node)
            if isinstance(self.value, str) and node.style is None:
                # YAML 1.1 reads plain 1e-6 as a string
                try:
                    self.value = float(self.value)
                except ValueError:
                    pass

    def plain(self):
        if isinstance(self.value, dict):
            return {k: v.plain() for k, v in self.value.items()}
        if isinstance(self.value, list):
            return [v.plain() for v in self.value]
        return self.value


class _Reader:
    def __init__(self, base_dir: Path):
        self.base_dir = base_dir

    def mapping(self, node: _Node, path: str, allowed: set, required: set = frozenset()):
        if node is None or node.value is None:
            node_val = {}
        elif not isinstance(node.value, dict):
            raise ScenarioError("expected a mapping", line=node.line, field=path)
        else:
            node_val = node.value
        for key in node_val:
            if key not in allowed:
                raise ScenarioError(f"unknown key (allowed: {', '.join(sorted(allowed))})",
                                    line=node.key_lines[key], field=f"{path}.{key}".lstrip("."))
        for key in required:
            if key not in node_val:
                raise ScenarioError("missing required key", line=node.line if node else None,
                                    field=f"{path}.{key}".lstrip("."))
        return node_val

    def number(self, node: _Node, path: str, integer=False):
        v = node.value
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok:
            kind = "an integer" if integer else "a number"
            raise ScenarioError(f"expected {kind}, got {v!r}", line=node.line, field=path)
        return int(v) if integer else float(v)

    def numbers(self, mapping: dict, path: str, skip=()):
        return {k: self.number(v, f"{path}.{k}") for k, v in mapping.items() if k not in skip}

    def build(self, fields: dict, factory, node: _Node, path: str):
        try:
            return factory(**fields)
        except RbessError as exc:
            raise ScenarioError(str(exc), line=node.line if node else None, field=path) from None


def load_scenario(path, resample_profile: bool = False) -> Scenario:
    """Parse and fully validate a scenario file.

    A file profile whose spacing differs from ``balancing.dt`` is an error
    unless ``resample_profile`` is set, in which case it is interpolated.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    return loads_scenario(text, base_dir=path.parent, resample_profile=resample_profile)


def loads_scenario(text: str, base_dir=".", resample_profile: bool = False) -> Scenario:
    try:
        root_node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                            line=mark.line + 1 if mark else None) from None
    if root_node is None:
        raise ScenarioError("scenario file is empty")
    root = _Node(root_node)
    rd = _Reader(Path(base_dir))
    top = rd.mapping(root, "", _TOP, required={"cells", "profile"})

    if "version" in top and rd.number(top["version"], "version", integer=True) != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version (expected {SCENARIO_VERSION})",
                            line=top["version"].line, field="version")
    name = str(top["name"].value) if "name" in top else "scenario"
    seed = rd.number(top["seed"], "seed", integer=True) if "seed" in top and top["seed"].value is not None else None
    baseline = True
    if "baseline" in top:
        if not isinstance(top["baseline"].value, bool):
            raise ScenarioError("expected true or false", line=top["baseline"].line, field="baseline")
        baseline = top["baseline"].value

    net = rd.build(rd.numbers(rd.mapping(top.get("thermal"), "thermal", {"r_conv", "r_cnd", "t_env"}), "thermal"),
                   ThermalNetworkParams, top.get("thermal"), "thermal")

    bal_map = rd.mapping(top.get("balancing"), "balancing",
                         {"delta_q", "delta_t", "lambda_e", "lambda_t", "horizon_h", "dt"})
    bal = rd.numbers(bal_map, "balancing", skip=("horizon_h",))
    if "horizon_h" in bal_map:
        bal["horizon_h"] = rd.number(bal_map["horizon_h"], "balancing.horizon_h", integer=True)
    config = rd.build(bal, BalancingConfig, top.get("balancing"), "balancing")

    reconfig = None
    if "reconfiguration" in top and top["reconfiguration"].value is not None:
        rc = rd.mapping(top["reconfiguration"], "reconfiguration",
                        {"v_target", "v_conv_max", "i_conv_max"},
                        required={"v_target", "v_conv_max", "i_conv_max"})
        reconfig = ReconfigInputs(**rd.numbers(rc, "reconfiguration"))

    profile, profile_source = _read_profile(rd, top["profile"], config.dt, resample_profile)
    cells, initial, spread = _read_cells(rd, top["cells"], seed)
    faults = _read_faults(rd, top.get("faults"), profile, len(cells))

    solver = rd.mapping(top.get("solver"), "solver", _SOLVER_KEYS)
    opts = {}
    for key, node in solver.items():
        if key in ("hold", "formulation"):
            opts[key] = str(node.value)
        elif key == "solve_every":
            opts[key] = rd.number(node, "solver.solve_every", integer=True)
        else:
            opts[key] = rd.number(node, f"solver.{key}")
    if opts.get("formulation", "cone") not in ("cone", "qp"):
        raise ScenarioError("formulation must be 'cone' or 'qp'", line=solver["formulation"].line,
                            field="solver.formulation")

    try:
        return Scenario(name=name, cells=cells, initial=initial, profile=profile, config=config,
                        net=net, faults=faults, reconfig=reconfig, seed=seed, spread=spread,
                        baseline=baseline, profile_source=profile_source, **opts)
    except ScenarioError as exc:
        where = solver.get(exc.field) or top.get(exc.field)
        field = f"solver.{exc.field}" if exc.field in solver else exc.field
        raise ScenarioError(str(exc).split(" (field")[0], line=where.line if where else None,
                            field=field) from None


def _read_profile(rd: _Reader, node: _Node, dt: float, resample_profile: bool = False):
    if not isinstance(node.value, dict) or "kind" not in node.value:
        raise ScenarioError("profile needs a 'kind' (udds, constant, file or inline)",
                            line=node.line, field="profile")
    kind = node.value["kind"].value
    if kind not in _PROFILE_KEYS:
        raise ScenarioError(f"unknown profile kind {kind!r}", line=node.value["kind"].line, field="profile.kind")
    m = rd.mapping(node, "profile", _PROFILE_KEYS[kind], required=_PROFILE_KEYS[kind])
    if kind == "udds":
        peak = rd.number(m["peak_w"], "profile.peak_w")
        dur = rd.number(m["duration_s"], "profile.duration_s")
        prof = _wrap(lambda: scaled_udds(peak, dur, dt), node)
        return prof, {"kind": kind, "peak_w": peak, "duration_s": dur}
    if kind == "constant":
        p = rd.number(m["p_out_w"], "profile.p_out_w")
        dur = rd.number(m["duration_s"], "profile.duration_s")
        return _wrap(lambda: constant_profile(p, dur, dt), node), {"kind": kind, "p_out_w": p, "duration_s": dur}
    if kind == "file":
        rel = str(m["path"].value)
        full = Path(rel) if Path(rel).is_absolute() else rd.base_dir / rel
        if resample_profile:
            prof = _wrap(lambda: load_profile(full), m["path"])
            if abs(prof.dt - dt) > 1e-12 * max(dt, 1.0):
                # written back inline so the scenario reloads without the flag
                return resample(prof, dt), {"kind": "inline"}
        return _wrap(lambda: load_profile(full, dt), m["path"]), {"kind": kind, "path": rel}
    values = m["p_out_w"]
    if not isinstance(values.value, list):
        raise ScenarioError("expected a list of powers", line=values.line, field="profile.p_out_w")
    p = [rd.number(v, "profile.p_out_w") for v in values.value]
    return _wrap(lambda: LoadProfile(dt, p), values), {"kind": kind}


def _wrap(fn, node):
    try:
        return fn()
    except ScenarioError as exc:
        if exc.line is None:
            raise ScenarioError(str(exc), line=node.line, field=exc.field) from None
        raise


def _read_ocv(rd: _Reader, node: _Node):
    v = node.value
    if v is None or v == "default":
        return default_ocv_curve()
    if isinstance(v, str):
        full = Path(v) if Path(v).is_absolute() else rd.base_dir / v
        try:
            return fit_piecewise_linear(*load_ocv_table(full))
        except (OSError, RbessError) as exc:
            raise ScenarioError(f"cannot load OCV table: {exc}", line=node.line, field="cells.params.ocv") from None
    if isinstance(v, list):
        recs = []
        for item in v:
            seg = rd.mapping(item, "cells.params.ocv", {"q_lo", "q_hi", "alpha", "beta"},
                             required={"q_lo", "q_hi", "alpha", "beta"})
            recs.append(rd.numbers(seg, "cells.params.ocv"))
        try:
            return OcvCurve.from_records(recs)
        except RbessError as exc:
            raise ScenarioError(str(exc), line=node.line, field="cells.params.ocv") from None
    raise ScenarioError("ocv must be 'default', a table path or a segment list",
                        line=node.line, field="cells.params.ocv")


def _cell_fields(rd, mapping, path):
    out = {}
    for key, node in mapping.items():
        if key == "ocv":
            out[key] = _read_ocv(rd, node)
        else:
            out[key] = rd.number(node, f"{path}.{key}")
    return out


def _read_cells(rd: _Reader, node: _Node, seed):
    m = rd.mapping(node, "cells", {"count", "params", "spread", "initial"})
    base_fields = _cell_fields(rd, rd.mapping(m.get("params"), "cells.params", _PARAM_KEYS), "cells.params")
    base = rd.build(base_fields, CellParams, m.get("params"), "cells.params")
    spread = None
    if "spread" in m and m["spread"].value is not None:
        spread = rd.build(rd.numbers(rd.mapping(m["spread"], "cells.spread", _SPREAD_KEYS), "cells.spread"),
                          InitialSpread, m["spread"], "cells.spread")
    count = rd.number(m["count"], "cells.count", integer=True) if "count" in m else None

    if "initial" in m:
        items = m["initial"].value
        if not isinstance(items, list) or not items:
            raise ScenarioError("cells.initial must be a non-empty list", line=m["initial"].line,
                                field="cells.initial")
        if count is not None and count != len(items):
            raise ScenarioError(f"count={count} but {len(items)} initial entries",
                                line=m["count"].line, field="cells.count")
        cells, states = [], []
        for j, item in enumerate(items, start=1):
            path = f"cells.initial[{j}]"
            entry = rd.mapping(item, path, _PARAM_KEYS | {"q", "temp", "in_service"}, required={"q", "temp"})
            over = {k: v for k, v in entry.items() if k in _PARAM_KEYS}
            fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(CellParams)}
            fields.update(_cell_fields(rd, over, path))
            cells.append(rd.build(fields, CellParams, item, path))
            in_service = True
            if "in_service" in entry:
                in_service = entry["in_service"].value
                if not isinstance(in_service, bool):
                    raise ScenarioError("expected true or false", line=entry["in_service"].line,
                                        field=f"{path}.in_service")
            states.append(rd.build(
                {"q": rd.number(entry["q"], f"{path}.q"), "temp": rd.number(entry["temp"], f"{path}.temp"),
                 "in_service": in_service}, CellState, item, path))
        return tuple(cells), tuple(states), spread

    if count is None:
        raise ScenarioError("cells section needs 'count' with 'spread', or an 'initial' list",
                            line=node.line, field="cells")
    if count < 1:
        raise ScenarioError("a scenario needs at least one cell", line=m["count"].line, field="cells.count")
    if spread is None:
        raise ScenarioError("cells.spread is required when no initial list is given",
                            line=node.line, field="cells.spread")
    if seed is None:
        raise ScenarioError("sampling initial conditions needs a seed", line=node.line, field="seed")
    cells, states = sample_initial(count, spread, base, seed)
    return cells, states, spread


def _read_faults(rd: _Reader, node: _Node | None, profile: LoadProfile, n: int):
    if node is None or node.value is None:
        return ()
    if not isinstance(node.value, list):
        raise ScenarioError("faults must be a list", line=node.line, field="faults")
    out = []
    for j, item in enumerate(node.value, start=1):
        path = f"faults[{j}]"
        m = rd.mapping(item, path, {"time_s", "cell"}, required={"time_s", "cell"})
        t = rd.number(m["time_s"], f"{path}.time_s")
        c = rd.number(m["cell"], f"{path}.cell", integer=True)
        if not 0 <= t < profile.duration:
            raise ScenarioError(
                f"fault event {j} (cell {c} at {t} s) lies outside the profile span [0, {profile.duration}) s",
                line=item.line, field=path)
        if not 1 <= c <= n:
            raise ScenarioError(f"fault event {j} names cell {c}; pack has cells 1..{n}",
                                line=item.line, field=path)
        out.append(FaultEvent(t, c))
    return tuple(out)


# --- writing ---------------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    """Explicit, fully resolved form of ``sc`` (every default written out)."""
    base = sc.cells[0]
    params = {}
    for f in dataclasses.fields(CellParams):
        v = getattr(base, f.name)
        params[f.name] = v.to_records() if f.name == "ocv" else float(v)
    initial = []
    for p, s in zip(sc.cells, sc.initial):
        entry = {"q": float(s.q), "temp": float(s.temp)}
        if not s.in_service:
            entry["in_service"] = False
        for f in dataclasses.fields(CellParams):
            v, b = getattr(p, f.name), getattr(base, f.name)
            if v != b:
                entry[f.name] = v.to_records() if f.name == "ocv" else float(v)
        initial.append(entry)
    cells = {"count": sc.n, "params": params, "initial": initial}
    if sc.spread is not None:
        cells["spread"] = dataclasses.asdict(sc.spread)
    src = sc.profile_source
    if src is None or src.get("kind") == "inline":
        profile = {"kind": "inline", "p_out_w": [float(x) for x in sc.profile.p_out]}
    else:
        profile = dict(src)
    cfg = sc.config
    return {
        "version": SCENARIO_VERSION,
        "name": sc.name,
        "seed": sc.seed,
        "baseline": sc.baseline,
        "cells": cells,
        "thermal": dataclasses.asdict(sc.net),
        "balancing": {"delta_q": cfg.delta_q, "delta_t": cfg.delta_t, "lambda_e": cfg.lambda_e,
                      "lambda_t": cfg.lambda_t, "horizon_h": int(cfg.horizon_h), "dt": cfg.dt},
        "reconfiguration": dataclasses.asdict(sc.reconfig) if sc.reconfig else None,
        "profile": profile,
        "faults": [{"time_s": float(f.time), "cell": int(f.cell)} for f in sc.faults],
        "solver": {"solve_every": int(sc.solve_every), "hold": sc.hold,
                   "bypass_threshold_w": sc.bypass_threshold_w, "formulation": sc.formulation,
                   "tol": sc.tol},
    }


def dumps_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None, width=100)


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(sc))


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``table2`` or ``experiment``)."""
    path = DATA_DIR / f"{name}_scenario.yaml"
    if not path.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return path
