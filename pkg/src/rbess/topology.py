"""Switch-matrix encoding of the reconfigurable pack.

Three switches sit between each pair of adjacent modules ``i`` and ``i + 1``
(cells are numbered from 1). Permitted triplets ``(s1, s2, s3)``:

* ``(0, 0, 1)`` series: ``i`` and the next in-service cell are in series
* ``(1, 1, 0)`` parallel: ``i`` and the next in-service cell share a group
* ``(1, 0, 0)`` cell ``i`` bypassed
* ``(0, 1, 0)`` the cell after ``i`` bypassed through the positive rail.
  Normally only the last triplet; a trailing run of these bypasses a block
  of cells at the top end of the string.

The triplet of the last in-service cell carries no relation; it is either
``(0, 1, 0)`` (when trailing cells are bypassed) or absent (cell ``n``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

from rbess.exceptions import ReconfigurationError, TopologyError

SERIES = (0, 0, 1)
PARALLEL = (1, 1, 0)
BYPASS = (1, 0, 0)
BYPASS_LAST = (0, 1, 0)
PERMITTED = {SERIES, PARALLEL, BYPASS, BYPASS_LAST}


@dataclass(frozen=True)
class ReconfigSpec:
    n_s: int
    n_p: int
    v_target: float
    v_conv_max: float
    i_conv_max: float
    i_out: float

    @property
    def cells_used(self) -> int:
        return self.n_s * self.n_p

    def label(self) -> str:
        return f"{self.n_p}P{self.n_s}S"


@dataclass(frozen=True)
class PackTopology:
    """Immutable switch matrix for ``n`` cells (``n - 1`` triplets)."""

    n: int
    triplets: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(tuple(int(s) for s in t) for t in self.triplets))
        if self.n < 1:
            raise TopologyError("a pack needs at least one cell")
        if len(self.triplets) != self.n - 1:
            raise TopologyError(f"n={self.n} needs {self.n - 1} triplets, got {len(self.triplets)}")

    @property
    def switch_count(self) -> int:
        return 3 * (self.n - 1)

    @cached_property
    def _connectivity(self):
        problems = validate(self)
        if problems:
            raise TopologyError("invalid topology: " + "; ".join(problems))
        return derive_connectivity(self.n, self.triplets)

    @property
    def bypassed(self) -> frozenset[int]:
        return self._connectivity[0]

    @property
    def groups(self) -> tuple[tuple[int, ...], ...]:
        """Series groups in string order, each a tuple of parallel cells."""
        return self._connectivity[1]

    @property
    def in_service(self) -> tuple[int, ...]:
        return tuple(c for g in self.groups for c in g)

    def encode(self) -> str:
        return format_topology(self)

    def __str__(self):
        return self.encode()

    @classmethod
    def series(cls, n: int) -> "PackTopology":
        return cls(n, (SERIES,) * (n - 1))

    @classmethod
    def from_groups(cls, n: int, groups: Sequence[Sequence[int]]) -> "PackTopology":
        return cls(n, encode_groups(n, groups))

    @classmethod
    def parse(cls, text: str) -> "PackTopology":
        return parse_topology(text)


def validate(topology: PackTopology) -> list[str]:
    """Every rule violation in the matrix; an empty list means valid."""
    n, trip = topology.n, topology.triplets
    problems = []
    for idx, t in enumerate(trip, start=1):
        if t not in PERMITTED:
            problems.append(f"triplet {idx} {_fmt(t)} is not a permitted pattern")
    # a (0,1,0) run must extend to the last triplet
    for idx, t in enumerate(trip, start=1):
        if t == BYPASS_LAST and any(u != BYPASS_LAST for u in trip[idx:]):
            problems.append(
                f"triplet {idx} uses the last-cell bypass pattern at an interior position"
            )
    if not problems:
        bypassed, groups = derive_connectivity(n, trip)
        if not groups:
            problems.append("every cell is bypassed")
    return problems


def derive_connectivity(n: int, triplets: Sequence[tuple[int, int, int]]):
    """Bypassed set and ordered series groups. Assumes the patterns are permitted."""
    trailing = n + 1
    for idx in range(n - 1, 0, -1):
        if tuple(triplets[idx - 1]) == BYPASS_LAST:
            trailing = idx + 1
        else:
            break
    bypassed = {i for i in range(1, min(n, trailing)) if tuple(triplets[i - 1]) == BYPASS}
    bypassed.update(range(trailing, n + 1))
    active = [c for c in range(1, n + 1) if c not in bypassed]
    groups: list[list[int]] = []
    for k, cell in enumerate(active):
        if k == 0 or tuple(triplets[active[k - 1] - 1]) != PARALLEL:
            groups.append([cell])
        else:
            groups[-1].append(cell)
    return frozenset(bypassed), tuple(tuple(g) for g in groups)


def encode_groups(n: int, groups: Sequence[Sequence[int]]) -> tuple[tuple[int, int, int], ...]:
    """Canonical triplets for ordered parallel groups; unlisted cells are bypassed."""
    active = [c for g in groups for c in g]
    if not active:
        raise TopologyError("cannot encode a pack with no in-service cell")
    if active != sorted(active) or len(set(active)) != len(active):
        raise TopologyError("groups must list distinct cells in increasing index order")
    if active[0] < 1 or active[-1] > n:
        raise TopologyError(f"cell ids must lie in 1..{n}")
    group_of = {c: gi for gi, g in enumerate(groups) for c in g}
    last = active[-1]
    trip = []
    for i in range(1, n):
        if i > last:
            trip.append(BYPASS_LAST)
        elif i == last:
            trip.append(BYPASS_LAST)
        elif i not in group_of:
            trip.append(BYPASS)
        else:
            nxt = next(c for c in active if c > i)
            trip.append(PARALLEL if group_of[nxt] == group_of[i] else SERIES)
    return tuple(trip)


def bypass(topology: PackTopology, cell_id: int) -> PackTopology:
    """Isolate ``cell_id``; idempotent for an already bypassed cell."""
    if not 1 <= cell_id <= topology.n:
        raise TopologyError(f"cell {cell_id} does not exist in a {topology.n}-cell pack")
    if cell_id in topology.bypassed:
        return topology
    groups = [tuple(c for c in g if c != cell_id) for g in topology.groups]
    groups = [g for g in groups if g]
    if not groups:
        raise TopologyError(f"refusing to bypass cell {cell_id}: it is the last in-service cell")
    return PackTopology.from_groups(topology.n, groups)


def plan_reconfiguration(
    v_target: float,
    v_conv_max: float,
    p_out: float,
    i_conv_max: float,
    in_service_count: int,
) -> ReconfigSpec:
    """Series/parallel counts from the converter voltage and current limits.

    Both ratios are rounded up; if the product exceeds the available cells the
    parallel count is reduced first.
    """
    for name, val in (("v_target", v_target), ("v_conv_max", v_conv_max),
                      ("p_out", p_out), ("i_conv_max", i_conv_max)):
        if not val > 0:
            raise ReconfigurationError(f"{name} must be positive, got {val}")
    if in_service_count < 1:
        raise ReconfigurationError("no in-service cells left")
    i_out = p_out / v_target
    n_s = _ceil(v_target / v_conv_max)
    n_p = _ceil(i_out / i_conv_max)
    if n_s > in_service_count:
        raise ReconfigurationError(
            f"target voltage {v_target} V needs {n_s} series groups but only "
            f"{in_service_count} cells are in service"
        )
    if n_s * n_p > in_service_count:
        n_p = in_service_count // n_s
    return ReconfigSpec(n_s, n_p, v_target, v_conv_max, i_conv_max, i_out)


def _ceil(x: float) -> int:
    # guard against 3.0000000000000004 style round-up
    return max(1, math.ceil(round(x, 9)))


def apply_reconfiguration(topology: PackTopology, spec: ReconfigSpec,
                          available: Iterable[int] | None = None) -> PackTopology:
    """``n_p P n_s S`` arrangement of the in-service cells in index order.

    Surplus cells beyond ``n_s * n_p`` are bypassed, highest index first.
    ``available`` overrides the candidate set (defaults to the in-service cells).
    """
    cells = sorted(topology.in_service if available is None else available)
    need = spec.n_s * spec.n_p
    if spec.n_s < 1 or spec.n_p < 1:
        raise ReconfigurationError("n_s and n_p must be at least 1")
    if need > len(cells):
        raise ReconfigurationError(
            f"{spec.label()} needs {need} cells but only {len(cells)} are available"
        )
    used = cells[:need]
    groups = [used[g * spec.n_p:(g + 1) * spec.n_p] for g in range(spec.n_s)]
    return PackTopology.from_groups(topology.n, groups)


def aggregate_switch_resistance(topology: PackTopology, per_switch_r: float) -> dict[int, float]:
    """Series switch resistance attributed to each in-service module.

    Closed switches on a series or bypass link are charged to the next
    in-service module down the string (the last one if none follows); the two
    closed switches of a parallel link are split one per branch.
    """
    active = topology.in_service
    r = {c: 0.0 for c in active}
    for idx, t in enumerate(topology.triplets, start=1):
        closed = sum(t)
        if t == PARALLEL:
            nxt = next(c for c in active if c > idx)
            r[idx] += per_switch_r
            r[nxt] += per_switch_r
            continue
        downstream = [c for c in active if c > idx]
        owner = downstream[0] if downstream else active[-1]
        r[owner] += closed * per_switch_r
    return r


def _fmt(t) -> str:
    return "".join(str(s) for s in t)


def format_topology(topology: PackTopology) -> str:
    return f"n={topology.n};" + ",".join(_fmt(t) for t in topology.triplets)


def parse_topology(text: str) -> PackTopology:
    """Parse ``n=5;110,001,110,001``. Raises :class:`TopologyError` on bad syntax."""
    text = text.strip()
    try:
        head, _, body = text.partition(";")
        key, _, value = head.partition("=")
        if key.strip() != "n":
            raise ValueError
        n = int(value)
        parts = [p.strip() for p in body.split(",")] if body.strip() else []
        triplets = []
        for p in parts:
            if len(p) != 3 or set(p) - {"0", "1"}:
                raise ValueError
            triplets.append(tuple(int(ch) for ch in p))
    except ValueError:
        raise TopologyError(f"cannot parse topology string {text!r}") from None
    return PackTopology(n, tuple(triplets))
