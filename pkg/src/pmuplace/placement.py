"""Channel assignment, observability constraints and the channel-cost objective.

A placement is a binary vector ``x`` over buses. Each instrumented bus gets
one voltage channel plus current channels on a subset of its incident lines:

* Case A: two channels per device, so one current channel. The monitored line
  is fixed a priori by grid topology: the line whose far end has the smallest
  degree, ties broken by the smallest far-end bus index.
* Case B: every incident line is monitored (``1 + degree`` channels).

Observability is checked on the *effective* reach of each device (itself plus
the far ends of its monitored lines). Zero-injection buses keep the full
connectivity row. With ``literal_observability`` the device reach is the full
connectivity row regardless of channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .grid import ContingencySet, GridModel, build_connectivity


class Case(str, Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True, eq=False)
class ChannelConfig:
    mode: Case
    gamma: np.ndarray
    n_c: np.ndarray
    contingency_aware: bool = False
    literal_observability: bool = False


def channel_config(
    grid: GridModel,
    case: Case | str,
    contingency_aware: bool = False,
    literal_observability: bool = False,
) -> ChannelConfig:
    mode = Case(case)
    if mode is Case.A:
        gamma = np.eye(grid.n_buses, dtype=np.int8)
        n_c = np.full(grid.n_buses, 2, dtype=int)
    else:
        gamma = build_connectivity(grid)
        # stored as given; never binding because Case B uses 1 + degree channels
        n_c = grid.degree + 2
    return ChannelConfig(mode, gamma, n_c, contingency_aware, literal_observability)


@dataclass(frozen=True)
class BusChannels:
    bus: int
    monitored_lines: tuple[int, ...]
    voltage_channel: bool = True

    @property
    def channels_used(self) -> int:
        return 1 + len(self.monitored_lines)


@dataclass(frozen=True)
class ChannelAssignment:
    n_buses: int
    per_bus: tuple[BusChannels, ...]  # instrumented buses, ascending

    @property
    def instrumented(self) -> tuple[int, ...]:
        return tuple(bc.bus for bc in self.per_bus)

    def channels_vector(self) -> np.ndarray:
        c = np.zeros(self.n_buses, dtype=int)
        for bc in self.per_bus:
            c[bc.bus] = bc.channels_used
        return c


@dataclass(frozen=True)
class ConstraintReport:
    observable_normal: bool
    violations_normal: int
    observable_contingency: bool
    violations_contingency: int
    channel_ok: bool

    @property
    def violations(self) -> int:
        return self.violations_normal + self.violations_contingency


def as_placement(x, n_buses: int) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape != (n_buses,):
        raise ValueError(f"placement must have length {n_buses}, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("placement entries must be 0 or 1")
    return arr.astype(np.int8)


def monitored_lines(grid: GridModel, bus: int, cfg: ChannelConfig) -> tuple[int, ...]:
    """Incident lines a device at ``bus`` would monitor (independent of x)."""
    incident = grid.incident_lines[bus]
    if cfg.mode is Case.B:
        return incident
    slots = int(cfg.n_c[bus]) - 1
    ranked = sorted(
        incident,
        key=lambda lid: (grid.degree[grid.lines[lid].far_end(bus)], grid.lines[lid].far_end(bus)),
    )
    return tuple(sorted(ranked[:slots]))


def assign_channels(grid: GridModel, x, cfg: ChannelConfig) -> ChannelAssignment:
    x = as_placement(x, grid.n_buses)
    per_bus = tuple(
        BusChannels(int(i), monitored_lines(grid, int(i), cfg)) for i in np.flatnonzero(x)
    )
    return ChannelAssignment(grid.n_buses, per_bus)


def reach_matrix(grid: GridModel, cfg: ChannelConfig) -> np.ndarray:
    """R[i, j] = 1 when a device at j (if installed) observes bus i."""
    if cfg.literal_observability:
        return build_connectivity(grid)
    n = grid.n_buses
    reach = np.eye(n, dtype=np.int8)
    for j in range(n):
        for lid in monitored_lines(grid, j, cfg):
            reach[grid.lines[lid].far_end(j), j] = 1
    return reach


def _assignment_reach(grid: GridModel, asg: ChannelAssignment) -> np.ndarray:
    reach = np.zeros((grid.n_buses, grid.n_buses), dtype=np.int8)
    for bc in asg.per_bus:
        reach[bc.bus, bc.bus] = 1
        for lid in bc.monitored_lines:
            reach[grid.lines[lid].far_end(bc.bus), bc.bus] = 1
    return reach


def effective_observation(grid: GridModel, x, u, asg: ChannelAssignment) -> np.ndarray:
    """Per-bus count of observing sources: device reach plus zero-injection rows."""
    x = as_placement(x, grid.n_buses)
    u = np.asarray(u, dtype=np.int64)
    A = build_connectivity(grid).astype(np.int64)
    return _assignment_reach(grid, asg).astype(np.int64) @ x.astype(np.int64) + A @ u


class ConstraintChecker:
    """Precomputed matrices for repeated constraint checks on one grid."""

    def __init__(self, grid: GridModel, cfg: ChannelConfig, contingencies: ContingencySet | None = None):
        self.grid = grid
        self.cfg = cfg
        self.A = build_connectivity(grid).astype(np.int64)
        self.reach = reach_matrix(grid, cfg).astype(np.int64)
        self.contingencies = contingencies
        if cfg.contingency_aware and contingencies is None:
            raise ValueError("contingency-aware config needs a ContingencySet")
        if contingencies is not None:
            self._pmu_loss_reach = contingencies.pmu_loss.astype(np.int64) * self.reach
            self._outage_reach = contingencies.line_outage.astype(np.int64) * self.reach
            self._outage_zin = contingencies.line_outage.astype(np.int64)

    def zin_part(self, u) -> np.ndarray:
        return self.A @ np.asarray(u, dtype=np.int64)

    def normal_counts(self, x, u) -> np.ndarray:
        return self.reach @ np.asarray(x, dtype=np.int64) + self.zin_part(u)

    def contingency_violations(self, x, u) -> int:
        x = np.asarray(x, dtype=np.int64)
        u = np.asarray(u, dtype=np.int64)
        # zero-injection buses do not fail: PMU-loss stacks keep the full A for u
        loss = self._pmu_loss_reach @ x + (self.A @ u)[None, :]
        outage = self._outage_reach @ x + self._outage_zin @ u
        return int((loss == 0).sum() + (outage == 0).sum())

    def check(self, x, u, asg: ChannelAssignment | None = None) -> ConstraintReport:
        x = as_placement(x, self.grid.n_buses)
        v_normal = int((self.normal_counts(x, u) == 0).sum())
        if self.cfg.contingency_aware:
            v_cont = self.contingency_violations(x, u)
        else:
            v_cont = 0
        if asg is None:
            asg = assign_channels(self.grid, x, self.cfg)
        channel_ok = all(bc.channels_used <= self.cfg.n_c[bc.bus] for bc in asg.per_bus)
        return ConstraintReport(v_normal == 0, v_normal, v_cont == 0, v_cont, channel_ok)


def check_constraints(
    grid: GridModel,
    x,
    u,
    cfg: ChannelConfig,
    contingencies: ContingencySet | None = None,
) -> ConstraintReport:
    """Evaluate normal (and, when configured, single-contingency) observability.

    ``violations_normal`` counts buses with no observing source.
    ``violations_contingency`` counts unsatisfied rows over all N PMU-loss and
    L line-outage matrices, and is only computed for contingency-aware
    configs. Without contingency awareness ``observable_contingency`` reports
    the trivially satisfied constraint.
    """
    return ConstraintChecker(grid, cfg, contingencies).check(x, u)


def channel_cost(x, asg: ChannelAssignment) -> int:
    x = np.asarray(x, dtype=np.int64)
    return int(x @ asg.channels_vector())
