"""Piecewise-linear SoC/OCV curves and a least-squares segment fitter."""

from __future__ import annotations

from bisect import bisect_left
from functools import lru_cache
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import lsq_linear
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from rbess._validation import check_soc, check_table
from rbess.exceptions import DomainError

CONTINUITY_TOL_V = 1e-3


@dataclass(frozen=True)
class OcvSegment:
    """Line ``u = alpha + beta * q`` valid on ``[q_lo, q_hi]``."""

    q_lo: float
    q_hi: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.q_lo < self.q_hi:
            raise DomainError(f"segment needs q_lo < q_hi, got [{self.q_lo}, {self.q_hi}]")
        if not self.beta > 0:
            raise DomainError(f"OCV slope must be positive, got beta={self.beta}")

    def voltage(self, q):
        return self.alpha + self.beta * q

    def contains(self, q: float) -> bool:
        return self.q_lo <= q <= self.q_hi


class OcvCurve:
    """Ordered OCV segments tiling the SoC range ``[0, 1]``.

    At a breakpoint the segment on the left (lower SoC) is used.
    """

    def __init__(self, segments: Iterable[OcvSegment]):
        segs = tuple(segments)
        if not segs:
            raise DomainError("an OCV curve needs at least one segment")
        if abs(segs[0].q_lo) > 1e-12 or abs(segs[-1].q_hi - 1.0) > 1e-12:
            raise DomainError("OCV segments must span SoC 0 to 1")
        for left, right in zip(segs, segs[1:]):
            if abs(left.q_hi - right.q_lo) > 1e-12:
                raise DomainError(f"OCV segments leave a gap or overlap at q={left.q_hi}")
            jump = abs(left.voltage(left.q_hi) - right.voltage(right.q_lo))
            if jump > CONTINUITY_TOL_V:
                raise DomainError(
                    f"OCV discontinuity of {jump * 1e3:.3f} mV at q={left.q_hi}"
                )
        self.segments = segs
        self._upper = [s.q_hi for s in segs]

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __eq__(self, other):
        return isinstance(other, OcvCurve) and self.segments == other.segments

    def __repr__(self):
        return f"OcvCurve({list(self.segments)!r})"

    @property
    def breakpoints(self) -> list[float]:
        return [self.segments[0].q_lo] + self._upper

    def segment_index(self, q: float) -> int:
        q = check_soc(q)
        return min(bisect_left(self._upper, q), len(self.segments) - 1)

    def segment_at(self, q: float) -> OcvSegment:
        return self.segments[self.segment_index(q)]

    def __call__(self, q: float) -> float:
        return ocv_eval(self, q)

    def to_records(self) -> list[dict]:
        return [
            {"q_lo": s.q_lo, "q_hi": s.q_hi, "alpha": s.alpha, "beta": s.beta}
            for s in self.segments
        ]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "OcvCurve":
        return cls(OcvSegment(**{k: float(v) for k, v in r.items()}) for r in records)

    @classmethod
    def linear(cls, alpha: float, beta: float) -> "OcvCurve":
        return cls([OcvSegment(0.0, 1.0, alpha, beta)])


def ocv_eval(curve: OcvCurve, q: float) -> float:
    """Open-circuit voltage of ``curve`` at state of charge ``q``."""
    return float(curve.segment_at(q).voltage(q))


def _line_sse(x, y):
    """SSE of the best straight line through every contiguous run ``x[a:b+1]``."""
    n = len(x)
    sse = np.full((n, n), np.inf)
    for a in range(n):
        for b in range(a + 1, n):
            xs, ys = x[a:b + 1], y[a:b + 1]
            A = np.column_stack([np.ones_like(xs), xs])
            coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
            sse[a, b] = float(np.sum((A @ coef - ys) ** 2))
    return sse


def _segment_breaks(x, y, k):
    # dynamic programme over shared-endpoint segmentations of the table
    n = len(x)
    sse = _line_sse(x, y)
    cost = np.full((k + 1, n), np.inf)
    prev = np.zeros((k + 1, n), dtype=int)
    cost[0, 0] = 0.0
    for m in range(1, k + 1):
        for b in range(1, n):
            cand = cost[m - 1, :b] + sse[:b, b]
            a = int(np.argmin(cand))
            cost[m, b], prev[m, b] = cand[a], a
    idx = [n - 1]
    for m in range(k, 0, -1):
        idx.append(prev[m, idx[-1]])
    return [x[i] for i in reversed(idx)]


def fit_piecewise_linear(soc, volts, n_segments: int = 3, min_slope: float = 1e-4) -> OcvCurve:
    """Fit a continuous, increasing ``n_segments``-piece line to an OCV table.

    Breakpoints come from an optimal (discontinuous) segmentation; the final
    coefficients are a continuous least-squares fit with slopes bounded below
    by ``min_slope``. End segments are stretched to cover SoC 0 and 1.
    """
    x, y = check_table(soc, volts)
    if n_segments < 1:
        raise DomainError("need at least one segment")
    if len(x) < n_segments + 1:
        raise DomainError(f"{len(x)} table rows cannot support {n_segments} segments")
    knots = _segment_breaks(x, y, n_segments)
    knots[0], knots[-1] = 0.0, 1.0
    # u(q) = a + sum_m s_m * clip(q - knot_m, 0, width_m)
    widths = np.diff(knots)
    basis = [np.ones_like(x)]
    for lo, w in zip(knots[:-1], widths):
        basis.append(np.clip(x - lo, 0.0, w))
    A = np.column_stack(basis)
    lower = np.r_[-np.inf, np.full(n_segments, min_slope)]
    sol = lsq_linear(A, y, bounds=(lower, np.inf), method="bvls")
    a, slopes = sol.x[0], sol.x[1:]
    segments = []
    u_lo = a
    for lo, hi, s in zip(knots[:-1], knots[1:], slopes):
        segments.append(OcvSegment(float(lo), float(hi), float(u_lo - s * lo), float(s)))
        u_lo = u_lo + s * (hi - lo)
    return OcvCurve(segments)


class PiecewiseLinearOcv(BaseEstimator, RegressorMixin):
    """Estimator wrapper around :func:`fit_piecewise_linear`.

    Parameters
    ----------
    n_segments : int, default=3
        Number of linear pieces.
    min_slope : float, default=1e-4
        Lower bound on every segment slope (V per unit SoC).
    """

    def __init__(self, n_segments=3, min_slope=1e-4):
        self.n_segments = n_segments
        self.min_slope = min_slope

    def fit(self, X, y):
        soc = np.asarray(X, dtype=float).reshape(-1)
        self.curve_ = fit_piecewise_linear(soc, y, self.n_segments, self.min_slope)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "curve_")
        soc = np.asarray(X, dtype=float).reshape(-1)
        return np.array([ocv_eval(self.curve_, q) for q in soc])


def load_ocv_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column ``soc, volts`` text table (comma or whitespace separated)."""
    text = Path(path).read_text()
    delim = "," if "," in text else None
    try:
        data = np.loadtxt(path, delimiter=delim, comments="#", ndmin=2)
    except ValueError as exc:
        raise DomainError(f"{path}: {exc}") from None
    if data.shape[1] != 2:
        raise DomainError(f"{path}: expected two columns, found {data.shape[1]}")
    return check_table(data[:, 0], data[:, 1])


def default_ocv_table() -> tuple[np.ndarray, np.ndarray]:
    """Bundled generic NMC 18650 OCV table (illustrative, not measured data)."""
    return load_ocv_table(Path(__file__).parent / "data" / "ocv_generic_nmc.csv")


@lru_cache(maxsize=8)
def default_ocv_curve(n_segments: int = 3) -> OcvCurve:
    return fit_piecewise_linear(*default_ocv_table(), n_segments=n_segments)
