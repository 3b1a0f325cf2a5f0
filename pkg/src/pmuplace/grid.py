"""Network model and topology-derived matrices.

Buses and lines are indexed contiguously from zero. All electrical
quantities are per-unit; lines are modelled by their series impedance only
(no shunt branches), which keeps every row of the nodal matrices summing to
zero.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FIXTURES = ("chain3", "chain5", "chain10", "star6", "ieee37")


class GridError(ValueError):
    """Raised when a network document violates the schema or a model invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    zero_injection: bool = False
    name: str = ""


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)

    def far_end(self, bus: int) -> int:
        return self.to_bus if bus == self.from_bus else self.from_bus


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_bus: int = 0
    base_voltage: float = 1.0

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @cached_property
    def incident_lines(self) -> tuple[tuple[int, ...], ...]:
        """Line ids incident to each bus, in ascending id order."""
        out: list[list[int]] = [[] for _ in self.buses]
        for line in self.lines:
            out[line.from_bus].append(line.id)
            out[line.to_bus].append(line.id)
        return tuple(tuple(ids) for ids in out)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.array([len(ids) for ids in self.incident_lines], dtype=int)

    @cached_property
    def zin(self) -> np.ndarray:
        """Zero-injection indicator vector u."""
        return np.array([int(b.zero_injection) for b in self.buses], dtype=np.int8)

    @cached_property
    def admittances(self) -> np.ndarray:
        return np.array([line.admittance for line in self.lines], dtype=complex)

    def to_document(self) -> dict[str, Any]:
        return {
            "buses": [
                {"id": b.id, "zero_injection": b.zero_injection, "name": b.name}
                for b in self.buses
            ],
            "lines": [
                {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x}
                for ln in self.lines
            ],
            "slack": self.slack_bus,
            "base_voltage": self.base_voltage,
        }

    def fingerprint(self) -> dict[str, Any]:
        blob = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return {
            "n_buses": self.n_buses,
            "n_lines": self.n_lines,
            "n_zero_injection": int(self.zin.sum()),
            "sha256": hashlib.sha256(blob.encode()).hexdigest(),
        }

    def without_line(self, line_id: int) -> GridModel:
        """Copy with one line deleted; skips validation since the result may be disconnected."""
        kept = tuple(ln for ln in self.lines if ln.id != line_id)
        return GridModel(self.buses, kept, self.slack_bus, self.base_voltage)


@dataclass(frozen=True)
class ContingencySet:
    """Stacked single-failure connectivity matrices.

    ``pmu_loss[b]`` is the connectivity matrix with column ``b`` zeroed and
    ``line_outage[l]`` is the connectivity of the grid with line ``l`` removed.
    """

    pmu_loss: np.ndarray  # (N, N, N)
    line_outage: np.ndarray  # (L, N, N)


@dataclass(frozen=True)
class NodalAdmittance:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


def _require(doc: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in doc:
        raise GridError(f"{where}: missing key '{key}'")
    return doc[key]


def _as_int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GridError(f"{where}: expected integer, got {value!r}")
    return value


def _as_float(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GridError(f"{where}: expected number, got {value!r}")
    return float(value)


def load_grid(source: str | Path | Mapping[str, Any]) -> GridModel:
    """Load and validate a network document.

    Args:
        source: path to a JSON network file, or an already parsed mapping
            with keys ``buses``, ``lines``, ``slack`` and optionally
            ``base_voltage``.

    Raises:
        GridError: on any schema or topology violation. The message names the
            offending bus or line id.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise GridError(f"{path}: file not found") from None
        except json.JSONDecodeError as exc:
            raise GridError(f"{path}: invalid JSON ({exc})") from None
    else:
        doc = source
    if not isinstance(doc, Mapping):
        raise GridError("network document must be an object")

    raw_buses = _require(doc, "buses", "network")
    raw_lines = _require(doc, "lines", "network")
    if not isinstance(raw_buses, list) or not isinstance(raw_lines, list):
        raise GridError("network: 'buses' and 'lines' must be arrays")

    buses: dict[int, Bus] = {}
    for k, rb in enumerate(raw_buses):
        if not isinstance(rb, Mapping):
            raise GridError(f"buses[{k}]: expected object")
        bid = _as_int(_require(rb, "id", f"buses[{k}]"), f"buses[{k}].id")
        zi = rb.get("zero_injection", False)
        if not isinstance(zi, bool):
            raise GridError(f"bus {bid}: zero_injection must be boolean")
        if bid in buses:
            raise GridError(f"duplicate bus id {bid}")
        buses[bid] = Bus(bid, zi, str(rb.get("name", bid)))
    n = len(buses)
    if n < 2:
        raise GridError("network needs at least 2 buses")
    if set(buses) != set(range(n)):
        raise GridError(f"bus ids must be contiguous 0..{n - 1}")

    lines: dict[int, Line] = {}
    pairs: dict[frozenset[int], int] = {}
    for k, rl in enumerate(raw_lines):
        if not isinstance(rl, Mapping):
            raise GridError(f"lines[{k}]: expected object")
        lid = _as_int(_require(rl, "id", f"lines[{k}]"), f"lines[{k}].id")
        if lid in lines:
            raise GridError(f"duplicate line id {lid}")
        f = _as_int(_require(rl, "from", f"line {lid}"), f"line {lid}.from")
        t = _as_int(_require(rl, "to", f"line {lid}"), f"line {lid}.to")
        r = _as_float(_require(rl, "r", f"line {lid}"), f"line {lid}.r")
        x = _as_float(_require(rl, "x", f"line {lid}"), f"line {lid}.x")
        for end in (f, t):
            if end not in buses:
                raise GridError(f"line {lid}: unknown bus {end}")
        if f == t:
            raise GridError(f"self-loop on line {lid}")
        if r < 0:
            raise GridError(f"line {lid}: negative resistance")
        if r == 0 and x == 0:
            raise GridError(f"zero-impedance line {lid}")
        key = frozenset((f, t))
        if key in pairs:
            raise GridError(f"duplicate line {lid}: buses {f}-{t} already joined by line {pairs[key]}")
        pairs[key] = lid
        lines[lid] = Line(lid, f, t, r, x)
    if not lines:
        raise GridError("network needs at least 1 line")
    if set(lines) != set(range(len(lines))):
        raise GridError(f"line ids must be contiguous 0..{len(lines) - 1}")

    slack = _as_int(_require(doc, "slack", "network"), "network.slack")
    if slack not in buses:
        raise GridError(f"slack bus {slack} does not exist")
    if buses[slack].zero_injection:
        raise GridError(f"slack bus {slack} cannot be zero-injection")
    base = _as_float(doc.get("base_voltage", 1.0), "network.base_voltage")
    if base <= 0:
        raise GridError("base_voltage must be positive")

    grid = GridModel(
        tuple(buses[i] for i in range(n)),
        tuple(lines[i] for i in range(len(lines))),
        slack,
        base,
    )
    unreached = _unreached(grid, slack)
    if unreached:
        raise GridError(f"disconnected graph: buses {unreached} unreachable from bus {slack}")
    return grid


def _unreached(grid: GridModel, start: int) -> list[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        b = queue.popleft()
        for lid in grid.incident_lines[b]:
            nxt = grid.lines[lid].far_end(b)
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return sorted(set(range(grid.n_buses)) - seen)


def fixture_path(name: str) -> Path:
    if name not in FIXTURES:
        raise GridError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    return Path(str(resources.files("pmuplace") / "data" / f"{name}.json"))


def load_fixture(name: str) -> GridModel:
    """Load one of the bundled networks (see ``FIXTURES``)."""
    return load_grid(fixture_path(name))


def build_connectivity(grid: GridModel) -> np.ndarray:
    """Binary N x N connectivity matrix with unit diagonal."""
    n = grid.n_buses
    a = np.eye(n, dtype=np.int8)
    for line in grid.lines:
        a[line.from_bus, line.to_bus] = 1
        a[line.to_bus, line.from_bus] = 1
    return a


def build_contingencies(grid: GridModel, A: np.ndarray) -> ContingencySet:
    n = grid.n_buses
    pmu_loss = np.repeat(A[None, :, :], n, axis=0)
    idx = np.arange(n)
    pmu_loss[idx, :, idx] = 0
    line_outage = np.repeat(A[None, :, :], grid.n_lines, axis=0)
    for line in grid.lines:
        line_outage[line.id, line.from_bus, line.to_bus] = 0
        line_outage[line.id, line.to_bus, line.from_bus] = 0
    return ContingencySet(pmu_loss, line_outage)


def build_admittance(grid: GridModel) -> NodalAdmittance:
    n = grid.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for line in grid.lines:
        y = line.admittance
        i, j = line.from_bus, line.to_bus
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y
        Y[j, j] += y
    return NodalAdmittance(Y.real.copy(), Y.imag.copy())
