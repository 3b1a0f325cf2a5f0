"""Constrained NSGA-II for the tri-objective placement problem.

Objectives, all minimised: channel count C, maximum estimation uncertainty U
(percent of nominal voltage) and maximum sensitivity S. Infeasible
placements (unobservable topologically or numerically) compare only by their
violation count and never enter the Pareto archive.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import (
    CovarianceNotPSDError,
    SingularGainError,
    UncertaintyParams,
    build_measurement_model,
    error_covariance,
    factorize,
    max_uncertainty,
)
from .grid import GridModel, build_contingencies, build_connectivity
from .hypervolume import hypervolume
from .placement import ChannelConfig, ConstraintChecker, assign_channels, as_placement, channel_cost
from .sensitivity import ToleranceSpec, max_sensitivity

log = logging.getLogger(__name__)

INF = float("inf")


class NoFeasibleError(RuntimeError):
    """No feasible placement was found during the run."""


@dataclass(eq=False)
class Individual:
    x: np.ndarray
    objectives: tuple[float, float, float]
    violations: int
    channels: tuple[int, ...]
    rank: int = -1
    crowding: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.violations == 0

    @property
    def cost(self) -> int:
        return int(sum(self.channels))

    @property
    def key(self) -> bytes:
        return self.x.tobytes()

    @property
    def buses(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.x)]


@dataclass
class GAConfig:
    population_size: int = 100
    generations: int = 300
    crossover_prob: float = 1.0
    mutation_prob: float = 0.1
    rng_seed: int = 0
    reference_point: tuple[float, float, float] | None = None
    greedy_fraction: float = 0.25

    def __post_init__(self):
        if self.population_size < 4 or self.population_size % 2:
            raise ValueError("population_size must be even and >= 4")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        for name in ("crossover_prob", "mutation_prob", "greedy_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def defaults_for(cls, grid: GridModel, **kw) -> GAConfig:
        kw.setdefault("population_size", 100 if grid.n_buses <= 50 else 200)
        return cls(**kw)


class PlacementProblem:
    """Objective and constraint evaluation for one grid and configuration.

    Evaluations are memoised by placement; the cache never affects results
    because evaluation is a pure function of ``x``.
    """

    def __init__(
        self,
        grid: GridModel,
        cfg: ChannelConfig,
        params: UncertaintyParams | None = None,
        tol: ToleranceSpec | None = None,
    ):
        self.grid = grid
        self.cfg = cfg
        self.params = params or UncertaintyParams()
        self.tol = tol or ToleranceSpec()
        self.u = grid.zin
        self.A = build_connectivity(grid)
        self.contingencies = build_contingencies(grid, self.A) if cfg.contingency_aware else None
        self.checker = ConstraintChecker(grid, cfg, self.contingencies)
        self._cache: dict[bytes, Individual] = {}

    @property
    def n_evaluations(self) -> int:
        return len(self._cache)

    def evaluate(self, x) -> Individual:
        x = as_placement(x, self.grid.n_buses)
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = self._evaluate(x)
            self._cache[key] = hit
        return Individual(hit.x, hit.objectives, hit.violations, hit.channels)

    def _evaluate(self, x: np.ndarray) -> Individual:
        asg = assign_channels(self.grid, x, self.cfg)
        channels = tuple(int(c) for c in asg.channels_vector())
        cost = float(channel_cost(x, asg))
        report = self.checker.check(x, self.u, asg)
        if report.violations:
            return Individual(x, (cost, INF, INF), report.violations, channels)
        model = build_measurement_model(self.grid, asg, self.u, self.params)
        try:
            fact = factorize(model)
            u_val = max_uncertainty(error_covariance(model, fact), self.grid.base_voltage)
        except SingularGainError:
            return Individual(x, (cost, INF, INF), _rank_deficit(model.H), channels)
        except CovarianceNotPSDError:
            return Individual(x, (cost, INF, INF), 1, channels)
        s_val = max_sensitivity(model, self.grid, self.tol, fact=fact).s_value
        return Individual(x, (cost, u_val, s_val), 0, channels)

    def violation_counts(self, x) -> int:
        x = np.asarray(x)
        v = int((self.checker.normal_counts(x, self.u) == 0).sum())
        if self.cfg.contingency_aware:
            v += self.checker.contingency_violations(x, self.u)
        return v


def _rank_deficit(H: np.ndarray) -> int:
    n_state = H.shape[1]
    if H.shape[0] == 0:
        return max(1, n_state // 2)
    norms = np.linalg.norm(H, axis=1)
    Hn = H[norms > 0] / norms[norms > 0, None]
    rank = np.linalg.matrix_rank(Hn, tol=None) if len(Hn) else 0
    return max(1, math.ceil((n_state - rank) / 2))


def evaluate(
    x,
    grid: GridModel,
    cfg: ChannelConfig,
    params: UncertaintyParams | None = None,
    tol: ToleranceSpec | None = None,
) -> Individual:
    """One-off evaluation; use PlacementProblem for repeated calls."""
    return PlacementProblem(grid, cfg, params, tol).evaluate(x)


def constrained_dominates(a: Individual, b: Individual) -> bool:
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violations < b.violations
    fa, fb = a.objectives, b.objectives
    return all(p <= q for p, q in zip(fa, fb)) and any(p < q for p, q in zip(fa, fb))


def dominance_matrix(objectives: np.ndarray, violations: np.ndarray) -> np.ndarray:
    """D[i, j] is True when individual i constraint-dominates individual j."""
    feas = violations == 0
    with np.errstate(invalid="ignore"):
        le = (objectives[:, None, :] <= objectives[None, :, :]).all(axis=2)
        lt = (objectives[:, None, :] < objectives[None, :, :]).any(axis=2)
    both = feas[:, None] & feas[None, :]
    out = both & le & lt
    out |= feas[:, None] & ~feas[None, :]
    out |= ~feas[:, None] & ~feas[None, :] & (violations[:, None] < violations[None, :])
    return out


def _arrays(pop: list[Individual]) -> tuple[np.ndarray, np.ndarray]:
    objs = np.array([ind.objectives for ind in pop], dtype=float).reshape(-1, 3)
    viol = np.array([ind.violations for ind in pop], dtype=int)
    return objs, viol


def nondominated_sort(population: list[Individual]) -> list[list[Individual]]:
    """Partition into fronts under constrained domination; sets ``rank``."""
    if not population:
        return []
    objs, viol = _arrays(population)
    dom = dominance_matrix(objs, viol)
    counts = dom.sum(axis=0)
    remaining = np.ones(len(population), dtype=bool)
    fronts: list[list[Individual]] = []
    while remaining.any():
        current = np.flatnonzero(remaining & (counts == 0))
        for i in current:
            population[i].rank = len(fronts)
        fronts.append([population[i] for i in current])
        remaining[current] = False
        counts = counts - dom[current].sum(axis=0)
    return fronts


def crowding_distance(front: list[Individual]) -> np.ndarray:
    """Crowding distance per member (also stored on each individual)."""
    n = len(front)
    dist = np.zeros(n)
    if n == 0:
        return dist
    if not all(ind.feasible for ind in front):
        for ind in front:
            ind.crowding = 0.0
        return dist
    if n <= 2:
        dist[:] = INF
    else:
        objs, _ = _arrays(front)
        for m in range(objs.shape[1]):
            col = objs[:, m]
            order = np.argsort(col, kind="stable")
            dist[order[0]] = INF
            dist[order[-1]] = INF
            lo, hi = col[order[0]], col[order[-1]]
            span = hi - lo
            if not np.isfinite(span) or span <= 0:
                continue
            gaps = (col[order[2:]] - col[order[:-2]]) / span
            dist[order[1:-1]] += gaps
    for ind, d in zip(front, dist):
        ind.crowding = float(d)
    return dist


def greedy_cover(problem: PlacementProblem, rng: np.random.Generator) -> np.ndarray:
    """Instrument the bus that clears the most unsatisfied observability rows until none remain."""
    chk = problem.checker
    n = problem.grid.n_buses
    u = problem.u.astype(np.int64)
    x = np.zeros(n, dtype=np.int64)
    zin_normal = chk.A @ u
    stacks = []
    if problem.cfg.contingency_aware:
        stacks = [
            (chk._pmu_loss_reach, np.broadcast_to(zin_normal, (n, n))),
            (chk._outage_reach, chk._outage_zin @ u),
        ]
    while True:
        unsat = (chk.reach @ x + zin_normal) == 0
        gain = unsat.astype(np.int64) @ chk.reach
        total = int(unsat.sum())
        for reach, zin in stacks:
            unsat_s = (reach @ x + zin) == 0
            gain = gain + np.einsum("si,sib->b", unsat_s.astype(np.int64), reach)
            total += int(unsat_s.sum())
        if total == 0:
            return x.astype(np.int8)
        gain[x == 1] = -1
        best = gain.max()
        if best <= 0:
            return x.astype(np.int8)
        x[rng.choice(np.flatnonzero(gain == best))] = 1


def seed_population(problem: PlacementProblem, cfg: GAConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Greedy covers, the all-ones placement, then uniform random fill; deduplicated."""
    n = problem.grid.n_buses
    seen: set[bytes] = set()
    out: list[np.ndarray] = []

    def add(x: np.ndarray) -> None:
        x = x.astype(np.int8)
        if x.tobytes() not in seen and len(out) < cfg.population_size:
            seen.add(x.tobytes())
            out.append(x)

    for _ in range(max(1, int(cfg.greedy_fraction * cfg.population_size))):
        add(greedy_cover(problem, rng))
    add(np.ones(n, dtype=np.int8))
    attempts = 0
    while len(out) < cfg.population_size:
        x = (rng.random(n) < 0.5).astype(np.int8)
        attempts += 1
        if attempts > 100 * cfg.population_size:
            out.append(x)  # tiny search spaces cannot supply enough distinct placements
        else:
            add(x)
    return out


def _better(a: Individual, b: Individual) -> bool:
    if a.rank != b.rank:
        return a.rank < b.rank
    return a.crowding > b.crowding


def tournament(population: list[Individual], k: int, rng: np.random.Generator) -> list[Individual]:
    picks = rng.integers(0, len(population), size=(k, 2))
    return [
        population[i] if not _better(population[j], population[i]) else population[j]
        for i, j in picks
    ]


def vary(parents: list[np.ndarray], cfg: GAConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform crossover on consecutive pairs, then single-bit mutation per child."""
    offspring: list[np.ndarray] = []
    for p1, p2 in zip(parents[0::2], parents[1::2]):
        if rng.random() < cfg.crossover_prob:
            mask = rng.random(p1.shape[0]) < 0.5
            c1, c2 = np.where(mask, p1, p2), np.where(mask, p2, p1)
        else:
            c1, c2 = p1.copy(), p2.copy()
        for child in (c1, c2):
            if rng.random() < cfg.mutation_prob:
                bit = rng.integers(child.shape[0])
                child[bit] ^= 1
            offspring.append(child.astype(np.int8))
    return offspring


def environmental_selection(combined: list[Individual], size: int) -> list[Individual]:
    seen: set[bytes] = set()
    unique, dupes = [], []
    for ind in combined:
        (dupes if ind.key in seen else unique).append(ind)
        seen.add(ind.key)
    chosen: list[Individual] = []
    for front in nondominated_sort(unique):
        crowding_distance(front)
        if len(chosen) + len(front) <= size:
            chosen.extend(front)
        else:
            order = sorted(range(len(front)), key=lambda i: -front[i].crowding)
            chosen.extend(front[i] for i in order[: size - len(chosen)])
        if len(chosen) >= size:
            break
    for ind in dupes:
        if len(chosen) >= size:
            break
        ind.rank = chosen[-1].rank + 1 if chosen else 0
        ind.crowding = 0.0
        chosen.append(ind)
    return chosen


@dataclass
class ParetoArchive:
    members: list[Individual] = field(default_factory=list)
    hv_trace: list[float] = field(default_factory=list)
    reference_point: tuple[float, float, float] | None = None
    evaluations: int = 0

    def update(self, candidates: list[Individual]) -> None:
        pool: dict[bytes, Individual] = {m.key: m for m in self.members}
        for ind in candidates:
            if ind.feasible and ind.key not in pool:
                pool[ind.key] = Individual(ind.x, ind.objectives, 0, ind.channels)
        items = list(pool.values())
        if not items:
            return
        objs, viol = _arrays(items)
        dominated = dominance_matrix(objs, viol).any(axis=0)
        keep = [ind for ind, d in zip(items, dominated) if not d]
        keep.sort(key=lambda m: (m.objectives, m.key))
        self.members = keep

    def objectives(self) -> np.ndarray:
        return _arrays(self.members)[0]

    def current_hypervolume(self) -> float:
        if self.reference_point is None or not self.members:
            return 0.0
        objs = self.objectives()
        inside = np.all(objs <= np.asarray(self.reference_point), axis=1)
        return hypervolume(objs[inside], self.reference_point)


def reference_point_for(feasible: list[Individual]) -> tuple[float, float, float]:
    objs = np.array([ind.objectives for ind in feasible], dtype=float)
    objs = objs[np.all(np.isfinite(objs), axis=1)]
    if len(objs) == 0:
        return (INF, INF, INF)
    c_max, u_max, s_max = objs.max(axis=0)
    return (
        float(c_max + 1),
        float(u_max * 1.1) if u_max > 0 else 1.0,
        float(s_max * 1.1) if s_max > 0 else 1.0,
    )


def evolve(problem: PlacementProblem, cfg: GAConfig) -> ParetoArchive:
    """Run the seeded, elitist NSGA-II and return the Pareto archive.

    Raises:
        NoFeasibleError: if no feasible placement was evaluated in any generation.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    archive = ParetoArchive(reference_point=cfg.reference_point)
    population = [problem.evaluate(x) for x in seed_population(problem, cfg, rng)]

    def record(batch: list[Individual]) -> None:
        archive.update(batch)
        if archive.reference_point is None and archive.members:
            archive.reference_point = reference_point_for([i for i in batch if i.feasible])
        archive.hv_trace.append(archive.current_hypervolume())

    record(population)
    population = environmental_selection(population, cfg.population_size)
    for gen in range(1, cfg.generations + 1):
        parents = tournament(population, cfg.population_size, rng)
        children = [problem.evaluate(x) for x in vary([p.x for p in parents], cfg, rng)]
        record(children)
        population = environmental_selection(population + children, cfg.population_size)
        if gen % 50 == 0:
            log.debug("generation %d: archive %d, hv %.6g", gen, len(archive.members), archive.hv_trace[-1])
    archive.evaluations = problem.n_evaluations
    if not archive.members:
        raise NoFeasibleError("no feasible individual found")
    return archive
