"""Load profiles: uniform-step output-power tables and a scaled drive cycle."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rbess.exceptions import ScenarioError

DATA_DIR = Path(__file__).parent / "data"
SPACING_RTOL = 1e-9


@dataclass(frozen=True)
class LoadProfile:
    """Pack output power ``p_out[k]`` held over ``[k dt, (k+1) dt)``."""

    dt: float
    p_out: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.p_out, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise ScenarioError(f"profile step must be positive, got {self.dt}", field="dt")
        if arr.size == 0:
            raise ScenarioError("profile is empty", field="p_out")
        if not np.all(np.isfinite(arr)):
            raise ScenarioError("profile contains non-finite power values", field="p_out")
        arr.setflags(write=False)
        object.__setattr__(self, "p_out", arr)

    def __len__(self):
        return self.p_out.shape[0]

    def __eq__(self, other):
        return (isinstance(other, LoadProfile) and self.dt == other.dt
                and np.array_equal(self.p_out, other.p_out))

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def peak(self) -> float:
        return float(np.max(np.abs(self.p_out)))


def constant_profile(p_out: float, duration: float, dt: float) -> LoadProfile:
    steps = int(round(duration / dt))
    if steps < 1:
        raise ScenarioError(f"duration {duration} s is shorter than one step of {dt} s", field="duration")
    return LoadProfile(dt, np.full(steps, float(p_out)))


def load_profile(path, dt: float | None = None) -> LoadProfile:
    """Read a ``time_s, p_out_w`` table; spacing must be uniform (and equal ``dt`` if given)."""
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"cannot read profile {path}: {exc}") from None
    if data.shape[1] != 2:
        raise ScenarioError(f"{path}: expected columns time_s,p_out_w, found {data.shape[1]}")
    t, p = data[:, 0], data[:, 1]
    if t.shape[0] < 2:
        raise ScenarioError(f"{path}: a profile needs at least two rows")
    steps = np.diff(t)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise ScenarioError(f"{path}: time is not strictly increasing", line=_data_line(path, bad))
    step = float(steps[0])
    off = np.abs(steps - step) > SPACING_RTOL * max(step, 1.0)
    if np.any(off):
        bad = int(np.argmax(off)) + 1
        raise ScenarioError(
            f"{path}: non-uniform time spacing ({steps[bad - 1]} s vs {step} s); resample explicitly",
            line=_data_line(path, bad),
        )
    if dt is not None and abs(step - dt) > SPACING_RTOL * max(dt, 1.0):
        raise ScenarioError(f"{path}: profile spacing {step} s differs from dt={dt} s; resample explicitly")
    return LoadProfile(step, p)


def _data_line(path, index):
    # 1-based file line of the index-th numeric row
    seen = -1
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            seen += 1
            if seen == index:
                return lineno
    return None


def write_profile(profile: LoadProfile, path) -> None:
    with open(path, "w") as fh:
        fh.write("# time_s,p_out_w\n")
        for t, p in zip(profile.times, profile.p_out):
            fh.write(f"{t:.10g},{float(p)!r}\n")


def resample(profile: LoadProfile, dt: float) -> LoadProfile:
    """Linear interpolation onto a new uniform step. Never called implicitly."""
    if not dt > 0:
        raise ScenarioError(f"resample step must be positive, got {dt}", field="dt")
    t_old = profile.times
    steps = int(np.floor(profile.duration / dt + 1e-9))
    t_new = np.arange(steps) * dt
    return LoadProfile(dt, np.interp(t_new, t_old, profile.p_out))


def udds_speed() -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(DATA_DIR / "udds_speed.csv", delimiter=",", comments="#")
    return data[:, 0], data[:, 1]


def road_load_power(speed, dt: float = 1.0, mass: float = 1500.0, c_rr: float = 0.01,
                    cd_a: float = 0.7, rho: float = 1.2, g: float = 9.81) -> np.ndarray:
    """Traction power of a simple vehicle; negative while braking (regeneration)."""
    v = np.asarray(speed, dtype=float)
    accel = np.gradient(v, dt)
    force = mass * accel + 0.5 * rho * cd_a * v ** 2 + np.where(v > 0, c_rr * mass * g, 0.0)
    return force * v


def scaled_udds(peak_w: float, duration: float, dt: float = 1.0) -> LoadProfile:
    """Repeated drive cycle, scaled so ``max |p_out|`` equals ``peak_w``."""
    t, v = udds_speed()
    raw = road_load_power(v, dt=float(t[1] - t[0]))
    one = LoadProfile(float(t[1] - t[0]), raw / np.max(np.abs(raw)) * peak_w)
    if dt != one.dt:
        one = resample(one, dt)
    steps = int(round(duration / dt))
    reps = int(np.ceil(steps / len(one)))
    return LoadProfile(dt, np.tile(one.p_out, reps)[:steps])
