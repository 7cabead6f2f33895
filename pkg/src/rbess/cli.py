"""Command-line entry point (``rbess``)."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from rbess.cell import CellState
from rbess.exceptions import RbessError, SimulationAborted
from rbess.ocv import PiecewiseLinearOcv, load_ocv_table
from rbess.optimizer import build_problem, dump_conic_form, pad_window, solve
from rbess.scenario import bundled_scenario, load_scenario
from rbess.simulation import run
from rbess.topology import parse_topology, plan_reconfiguration, validate

CLI_SCHEMA = "rbess.cli/1"

RESAMPLE = click.option("--resample", is_flag=True,
                        help="Interpolate a file profile onto the scenario's dt instead of rejecting it.")


def _resolve(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = name_or_path.removesuffix("_scenario")
    return bundled_scenario(stem)


def _fail(ctx, exc: Exception, code: int = 1):
    obj = ctx.find_root().obj or {}
    if obj.get("json_errors"):
        payload = {"schema": CLI_SCHEMA, "error": type(exc).__name__, "message": str(exc)}
        for attr in ("line", "field", "step", "status"):
            if getattr(exc, attr, None) is not None:
                payload[attr] = getattr(exc, attr)
        click.echo(json.dumps(payload), err=True)
    else:
        click.echo(f"error: {exc}", err=True)
    ctx.exit(code)


@click.group()
@click.option("--json-errors", is_flag=True, help="Report errors as one JSON object on stderr.")
@click.pass_context
def main(ctx, json_errors):
    """Reconfigurable battery pack simulator and power allocator."""
    ctx.obj = {"json_errors": json_errors}


@main.command()
@click.argument("scenario")
@click.option("--out", "outdir", default=".", show_default=True, type=click.Path(file_okay=False))
@click.option("--stem", default=None, help="Output file prefix (default: scenario name).")
@click.option("--solve-every", type=int, default=None, help="Override the solve cadence in steps.")
@RESAMPLE
@click.pass_context
def simulate(ctx, scenario, outdir, stem, solve_every, resample):
    """Run a closed-loop simulation and write trajectory CSV, topology log and summary JSON."""
    try:
        sc = load_scenario(_resolve(scenario), resample_profile=resample)
        if solve_every is not None:
            sc = sc.with_(solve_every=solve_every)
        result = run(sc)
        paths = result.write_outputs(outdir, stem or sc.name)
    except SimulationAborted as exc:
        if exc.dump:
            dump_path = Path(outdir) / f"{stem or 'run'}_abort_step{exc.step}.conic.txt"
            dump_path.parent.mkdir(parents=True, exist_ok=True)
            dump_path.write_text(exc.dump)
        _fail(ctx, exc)
        return
    except RbessError as exc:
        _fail(ctx, exc)
        return
    m = result.metrics
    click.echo(f"steps {len(result.t)}  solves {result.solves}")
    click.echo(f"rbess_loss_j {m['total_loss_j']:.6f}")
    if m.get("baseline_loss_j") is not None:
        click.echo(f"baseline_loss_j {m['baseline_loss_j']:.6f}")
    for key, path in paths.items():
        click.echo(f"{key} {path}")


def _snapshot_states(path, n):
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] < 3:
        raise RbessError(f"{path}: expected columns cell,q,temp_k")
    states = {}
    for row in data:
        states[int(row[0])] = CellState(q=float(row[1]), temp=float(row[2]))
    if sorted(states) != list(range(1, n + 1)):
        raise RbessError(f"{path}: snapshot must list cells 1..{n} exactly once")
    return [states[c] for c in range(1, n + 1)]


@main.command("optimize-step")
@click.argument("scenario")
@click.option("--snapshot", type=click.Path(exists=True, dir_okay=False),
              help="CSV of cell,q,temp_k replacing the scenario's initial states.")
@click.option("--step", default=0, show_default=True, help="Profile index the demand window starts at.")
@click.option("--cells", "cell_ids", default=None, help="Comma-separated in-service cell ids (default: all).")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the plan CSV here instead of stdout.")
@click.option("--dump-conic", type=click.Path(dir_okay=False), help="Also write the standard conic form.")
@click.pass_context
def optimize_step(ctx, scenario, snapshot, step, cell_ids, out, dump_conic):
    """Solve one horizon from a state snapshot and print the plan."""
    try:
        sc = load_scenario(_resolve(scenario))
        states = _snapshot_states(snapshot, sc.n) if snapshot else list(sc.initial)
        ids = [int(c) for c in cell_ids.split(",")] if cell_ids else \
            [j + 1 for j, s in enumerate(states) if s.in_service]
        window = pad_window(sc.profile.p_out, step, int(sc.config.horizon_h))
        problem = build_problem(states, sc.cells, ids, window, sc.config, sc.net, sc.formulation)
        if dump_conic:
            dump_conic_form(problem, dump_conic)
        plan = solve(problem, sc.tol)
    except (RbessError, OSError, ValueError) as exc:
        _fail(ctx, exc)
        return
    click.echo(f"# status {plan.status} objective {plan.objective!r}", err=True)
    if not plan.optimal:
        _fail(ctx, RbessError(f"solver status {plan.status}: {plan.diagnostics}"))
        return
    text = plan.to_csv(dt=sc.config.dt)
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def describe_topology(topo) -> str:
    groups = topo.groups
    sizes = {len(g) for g in groups}
    if len(groups) == 1 and len(groups[0]) == 1:
        shape = "single cell"
    elif all(len(g) == 1 for g in groups):
        shape = "series"
    elif len(groups) == 1:
        shape = "parallel"
    elif len(sizes) == 1:
        shape = f"{len(groups[0])}P{len(groups)}S"
    else:
        shape = "mixed " + "-".join(str(len(g)) for g in groups)
    if topo.bypassed:
        shape += ", bypassed " + " ".join(map(str, sorted(topo.bypassed)))
    return shape


@main.command("validate-topology")
@click.argument("topology")
@click.pass_context
def validate_topology(ctx, topology):
    """Check a switch-matrix string such as ``n=3;001,001``."""
    try:
        topo = parse_topology(topology)
    except RbessError as exc:
        _fail(ctx, exc)
        return
    problems = validate(topo)
    if problems:
        _fail(ctx, RbessError("invalid topology: " + "; ".join(problems)))
        return
    click.echo(f"ok, {describe_topology(topo)}")


@main.command("plan-reconfig")
@click.option("--vt", type=float, required=True, help="Target pack terminal voltage (V).")
@click.option("--vcmax", type=float, required=True, help="Converter maximum output voltage (V).")
@click.option("--pout", type=float, required=True, help="Pack output power (W).")
@click.option("--icmax", type=float, required=True, help="Converter maximum output current (A).")
@click.option("--cells", type=int, required=True, help="Number of in-service cells.")
@click.pass_context
def plan_reconfig(ctx, vt, vcmax, pout, icmax, cells):
    """Series and parallel counts for the given converter limits."""
    try:
        spec = plan_reconfiguration(vt, vcmax, pout, icmax, cells)
    except RbessError as exc:
        _fail(ctx, exc)
        return
    click.echo(f"n_s={spec.n_s} n_p={spec.n_p} ({spec.label()}, {spec.cells_used} of {cells} cells, "
               f"I_out={spec.i_out:.6g} A)")


@main.command("compare-baseline")
@click.argument("scenario")
@click.option("--solve-every", type=int, default=None, help="Override the solve cadence in steps.")
@RESAMPLE
@click.pass_context
def compare_baseline(ctx, scenario, solve_every, resample):
    """Run the scenario and print RBESS and hardwired-series losses."""
    try:
        sc = load_scenario(_resolve(scenario), resample_profile=resample).with_(baseline=True)
        if solve_every is not None:
            sc = sc.with_(solve_every=solve_every)
        m = run(sc).metrics
    except RbessError as exc:
        _fail(ctx, exc)
        return
    click.echo(f"rbess_loss_j {m['total_loss_j']:.6f}")
    click.echo(f"baseline_loss_j {m['baseline_loss_j']:.6f}")
    click.echo(f"delta_j {m['loss_delta_j']:.6f}")
    click.echo(f"steps_rbess_le_baseline {m['steps_rbess_le_baseline']:.4f}")


@main.command("fit-ocv")
@click.argument("table", type=click.Path(exists=True, dir_okay=False))
@click.option("-k", "--segments", default=3, show_default=True, help="Number of linear segments.")
@click.option("--json", "as_json", is_flag=True, help="Print the segments as JSON.")
@click.pass_context
def fit_ocv(ctx, table, segments, as_json):
    """Fit a continuous piecewise-linear OCV curve to a soc,volts table."""
    try:
        soc, volts = load_ocv_table(table)
        model = PiecewiseLinearOcv(n_segments=segments).fit(soc, volts)
    except RbessError as exc:
        _fail(ctx, exc)
        return
    err = float(np.max(np.abs(model.predict(soc) - volts)))
    recs = model.curve_.to_records()
    if as_json:
        click.echo(json.dumps({"schema": CLI_SCHEMA, "segments": recs, "max_abs_error_v": err}))
        return
    click.echo("q_lo,q_hi,alpha,beta")
    for r in recs:
        click.echo(f"{r['q_lo']!r},{r['q_hi']!r},{r['alpha']!r},{r['beta']!r}")
    click.echo(f"# max abs error {err:.6f} V", err=True)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
