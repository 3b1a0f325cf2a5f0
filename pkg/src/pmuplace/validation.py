"""Independent oracles for the analytical modules.

Everything here is rebuilt from first principles: design matrices are
written from the raw line list, covariances come from an SVD pseudo-inverse
rather than the QR path, and dominance is re-implemented pairwise. The only
shared pieces are the input data types and, for the exhaustive sweep, the
evaluation function under test.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .estimation import (
    MeasurementModel,
    UncertaintyParams,
    build_measurement_model,
    error_covariance,
    factorize,
    max_uncertainty,
    wls_gain,
)
from .grid import GridModel
from .hypervolume import hypervolume
from .moea import Individual, PlacementProblem, nondominated_sort
from .placement import Case, ChannelConfig, assign_channels
from .sensitivity import ToleranceSpec, max_sensitivity

EXHAUSTIVE_MAX_BUSES = 14
MIN_TRIALS = 10_000


@dataclass(frozen=True, eq=False)
class MonteCarloReport:
    trials: int
    empirical_covariance: np.ndarray
    empirical_U: float  # from the largest eigenvalue of the sample complex covariance
    empirical_rms_U: float  # largest per-bus complex RMS error, percent
    analytic_covariance: np.ndarray
    max_rel_error: float  # worst relative error on the diagonal


@dataclass(eq=False)
class ExhaustiveFront:
    all_evaluations: dict[bytes, Individual]
    true_front: list[Individual] = field(default_factory=list)

    def front_keys(self) -> set[bytes]:
        return {ind.key for ind in self.true_front}


# ---------------------------------------------------------------- design matrix


def reference_monitored_lines(grid: GridModel, bus: int, case: Case | str) -> list[int]:
    """Lines a device at ``bus`` measures, recomputed from the raw line list."""
    incident = [ln for ln in grid.lines if bus in (ln.from_bus, ln.to_bus)]
    if Case(case) is Case.B:
        return sorted(ln.id for ln in incident)
    degree = {b.id: 0 for b in grid.buses}
    for ln in grid.lines:
        degree[ln.from_bus] += 1
        degree[ln.to_bus] += 1
    best = None
    for ln in incident:
        far = ln.to_bus if ln.from_bus == bus else ln.from_bus
        key = (degree[far], far)
        if best is None or key < best[0]:
            best = (key, ln.id)
    return [] if best is None else [best[1]]


def reference_assignment(grid: GridModel, x, case: Case | str) -> dict[int, list[int]]:
    return {b: reference_monitored_lines(grid, b, case) for b in range(grid.n_buses) if x[b]}


def reference_design_matrix(
    grid: GridModel,
    monitored: dict[int, list[int]],
    line_scale: dict[int, float] | None = None,
) -> np.ndarray:
    """Stacked rectangular H written straight from the nodal equations.

    ``monitored`` maps each instrumented bus to the lines it measures.
    """
    n = grid.n_buses
    scale = line_scale or {}
    y = {ln.id: scale.get(ln.id, 1.0) / complex(ln.r, ln.x) for ln in grid.lines}
    Y = np.zeros((n, n), dtype=complex)
    for ln in grid.lines:
        i, k = ln.from_bus, ln.to_bus
        Y[i, k] -= y[ln.id]
        Y[k, i] -= y[ln.id]
        Y[i, i] += y[ln.id]
        Y[k, k] += y[ln.id]

    v_rows, i_rows = [], []
    for b in sorted(monitored):
        row = np.zeros(n, dtype=complex)
        row[b] = 1.0
        v_rows.append(row)
        for lid in monitored[b]:
            ln = grid.lines[lid]
            far = ln.to_bus if ln.from_bus == b else ln.from_bus
            row = np.zeros(n, dtype=complex)
            row[b] = y[lid]
            row[far] = -y[lid]
            i_rows.append(row)
    z_rows = [Y[b] for b in range(n) if grid.buses[b].zero_injection]

    blocks = []
    for group in (v_rows, i_rows, z_rows):
        if not group:
            continue
        C = np.array(group)
        blocks.append(np.hstack([C.real, -C.imag]))
        blocks.append(np.hstack([C.imag, C.real]))
    return np.vstack(blocks) if blocks else np.zeros((0, 2 * n))


def reference_variances(grid: GridModel, monitored: dict[int, list[int]], params: UncertaintyParams) -> np.ndarray:
    """Measurement variances in the same row order as reference_design_matrix."""
    base = grid.base_voltage
    sig_v, sig_i = [], []
    for b in sorted(monitored):
        sig_v.append(params.sigma_v * base)
        for lid in monitored[b]:
            ln = grid.lines[lid]
            ref = params.current_scale
            if ref is None:
                ref = base * abs(1 / complex(ln.r, ln.x))
            sig_i.append(params.sigma_i * ref)
    floor = params.sigma_v * base
    for ln in grid.lines:
        ref = params.current_scale
        if ref is None:
            ref = base * abs(1 / complex(ln.r, ln.x))
        floor = min(floor, params.sigma_i * ref)
    m_z = sum(1 for b in grid.buses if b.zero_injection)
    sig = sig_v * 2 + sig_i * 2 + [params.zi_sigma_factor * floor] * (2 * m_z)
    return np.asarray(sig) ** 2


def _pinv_gain(H: np.ndarray, variances: np.ndarray) -> np.ndarray:
    w = 1.0 / np.sqrt(variances)
    return np.linalg.pinv(H * w[:, None], rcond=1e-13) * w[None, :]


def reference_covariance(H: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """[H^T R^-1 H]^-1 through an SVD pseudo-inverse of the whitened H."""
    w = 1.0 / np.sqrt(variances)
    P = np.linalg.pinv(H * w[:, None], rcond=1e-13)
    return P @ P.T


def _complex_block(phi: np.ndarray) -> np.ndarray:
    n = phi.shape[0] // 2
    return phi[:n, :n] + phi[n:, n:] + 1j * (phi[n:, :n] - phi[:n, n:])


# ------------------------------------------------------------------ Monte Carlo


def flat_state(n_buses: int, base_voltage: float = 1.0) -> np.ndarray:
    return np.concatenate([np.full(n_buses, base_voltage), np.zeros(n_buses)])


def monte_carlo_uncertainty(
    model: MeasurementModel,
    true_state: np.ndarray | None = None,
    trials: int = 100_000,
    rng_seed: int = 0,
    base_voltage: float = 1.0,
    analytic_covariance: np.ndarray | None = None,
    shard_size: int = 10_000,
) -> MonteCarloReport:
    """Propagate Gaussian measurement noise through the WLS estimator by sampling.

    Each shard of ``shard_size`` trials draws from its own stream seeded by
    ``(rng_seed, shard index)``.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}")
    H, var = model.H, model.variances
    n2 = H.shape[1]
    v = flat_state(n2 // 2, base_voltage) if true_state is None else np.asarray(true_state, float)
    F = _pinv_gain(H, var)
    z0 = H @ v
    sd = np.sqrt(var)
    second = np.zeros((n2, n2))
    mean = np.zeros(n2)
    done = 0
    for shard in range(-(-trials // shard_size)):
        k = min(shard_size, trials - done)
        rng = np.random.default_rng([rng_seed, shard])
        z = z0[None, :] + rng.standard_normal((k, len(sd))) * sd[None, :]
        err = z @ F.T - v[None, :]
        second += err.T @ err
        mean += err.sum(axis=0)
        done += k
    mean /= trials
    cov = (second - trials * np.outer(mean, mean)) / (trials - 1)
    cov = 0.5 * (cov + cov.T)
    phi_c = _complex_block(cov)
    emp_u = 100.0 * np.sqrt(max(np.linalg.eigvalsh(0.5 * (phi_c + phi_c.conj().T))[-1], 0.0)) / base_voltage
    emp_rms = 100.0 * np.sqrt(np.max(np.diag(phi_c).real)) / base_voltage
    if analytic_covariance is None:
        analytic_covariance = reference_covariance(H, var)
    diag = np.diag(analytic_covariance)
    rel = np.abs(np.diag(cov) - diag) / diag
    return MonteCarloReport(trials, cov, float(emp_u), float(emp_rms), analytic_covariance, float(rel.max()))


def analytic_rms_uncertainty(phi_real: np.ndarray, base_voltage: float = 1.0) -> float:
    """Largest per-bus complex RMS error (percent) implied by a real covariance."""
    return 100.0 * float(np.sqrt(np.max(np.diag(_complex_block(phi_real)).real))) / base_voltage


# ---------------------------------------------------------- dominance and sorting


def _dominates(a_obj, a_viol, b_obj, b_viol) -> bool:
    if a_viol == 0 and b_viol > 0:
        return True
    if a_viol > 0 and b_viol == 0:
        return False
    if a_viol > 0:
        return a_viol < b_viol
    better = False
    for p, q in zip(a_obj, b_obj):
        if p > q:
            return False
        if p < q:
            better = True
    return better


def brute_force_sort(objectives, violations) -> list[list[int]]:
    """Fronts as index lists from a full pairwise dominance table."""
    objs = [tuple(float(v) for v in row) for row in objectives]
    viol = [int(v) for v in violations]
    n = len(objs)
    beaten_by = [0] * n
    beats: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j and _dominates(objs[i], viol[i], objs[j], viol[j]):
                beats[i].append(j)
                beaten_by[j] += 1
    fronts = []
    current = [i for i in range(n) if beaten_by[i] == 0]
    while current:
        fronts.append(sorted(current))
        nxt = []
        for i in current:
            for j in beats[i]:
                beaten_by[j] -= 1
                if beaten_by[j] == 0:
                    nxt.append(j)
        current = nxt
    return fronts


def reference_crowding(objectives) -> list[float]:
    objs = [list(map(float, row)) for row in objectives]
    n = len(objs)
    if n <= 2:
        return [float("inf")] * n
    dist = [0.0] * n
    for m in range(len(objs[0])):
        order = sorted(range(n), key=lambda i: objs[i][m])
        lo, hi = objs[order[0]][m], objs[order[-1]][m]
        dist[order[0]] = dist[order[-1]] = float("inf")
        if hi == lo:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            dist[i] += (objs[order[pos + 1]][m] - objs[order[pos - 1]][m]) / (hi - lo)
    return dist


# ------------------------------------------------------------------- exhaustive


def exhaustive_pareto(
    grid: GridModel,
    cfg: ChannelConfig,
    params: UncertaintyParams | None = None,
    tol: ToleranceSpec | None = None,
    problem: PlacementProblem | None = None,
) -> ExhaustiveFront:
    """Evaluate all 2^N placements and keep the feasible nondominated ones."""
    n = grid.n_buses
    if n > EXHAUSTIVE_MAX_BUSES:
        raise ValueError(f"exhaustive enumeration refused: {n} buses exceeds cap of {EXHAUSTIVE_MAX_BUSES}")
    problem = problem or PlacementProblem(grid, cfg, params, tol)
    evals: dict[bytes, Individual] = {}
    for bits in itertools.product((0, 1), repeat=n):
        ind = problem.evaluate(np.array(bits, dtype=np.int8))
        evals[ind.key] = ind
    feasible = [ind for ind in evals.values() if ind.feasible]
    front = [
        a
        for a in feasible
        if not any(_dominates(b.objectives, 0, a.objectives, 0) for b in feasible if b is not a)
    ]
    front.sort(key=lambda m: (m.objectives, m.key))
    return ExhaustiveFront(evals, front)


# ------------------------------------------------------------------ sensitivity


def finite_difference_sensitivity(
    model: MeasurementModel,
    grid: GridModel,
    line: int,
    h: float = 1e-4,
) -> np.ndarray:
    """Central-difference derivative of the normalised covariance w.r.t. one line's scale."""
    if not 0 < h <= 1e-3:
        raise ValueError("h must lie in (0, 1e-3]")
    monitored = {bc.bus: list(bc.monitored_lines) for bc in model.assignment.per_bus}
    rn = model.variances / model.sigma_r**2
    plus = reference_covariance(reference_design_matrix(grid, monitored, {line: 1 + h}), rn)
    minus = reference_covariance(reference_design_matrix(grid, monitored, {line: 1 - h}), rn)
    d = (plus - minus) / (2 * h)
    return 0.5 * (d + d.T)


def first_order_sensitivity(model: MeasurementModel, grid: GridModel, delta: float, h: float = 1e-4) -> float:
    """Linearised per-line-corner S: delta times the largest |dS/d delta| entry."""
    lines = sorted(set(int(v) for v in model.param_lines))
    best = 0.0
    for line in lines:
        d = finite_difference_sensitivity(model, grid, line, h)
        best = max(best, float(np.abs(d).max()))
    return delta * best


def reference_objectives(
    grid: GridModel,
    x,
    case: Case | str,
    params: UncertaintyParams | None = None,
    delta: float = 0.05,
) -> tuple[int, float, float, bool]:
    """Straight-line (C, U, S, feasible) for one placement without contingencies."""
    params = params or UncertaintyParams()
    n = grid.n_buses
    x = [int(v) for v in x]
    observed = [grid.buses[b].zero_injection for b in range(n)]
    for ln in grid.lines:
        if grid.buses[ln.from_bus].zero_injection:
            observed[ln.to_bus] = True
        if grid.buses[ln.to_bus].zero_injection:
            observed[ln.from_bus] = True
    cost = 0
    for b in range(n):
        if x[b]:
            lines = reference_monitored_lines(grid, b, case)
            cost += 1 + len(lines)
            observed[b] = True
            for lid in lines:
                ln = grid.lines[lid]
                observed[ln.to_bus if ln.from_bus == b else ln.from_bus] = True
    if not all(observed):
        return cost, float("inf"), float("inf"), False
    monitored = reference_assignment(grid, x, case)
    H = reference_design_matrix(grid, monitored)
    var = reference_variances(grid, monitored, params)
    if H.shape[0] < H.shape[1]:
        return cost, float("inf"), float("inf"), False
    Hn = H / np.linalg.norm(H, axis=1)[:, None]
    s = np.linalg.svd(Hn, compute_uv=False)
    if s[-1] < 1e-10 * s[0]:
        return cost, float("inf"), float("inf"), False
    phi = reference_covariance(H, var)
    u = 100.0 * np.sqrt(max(np.linalg.eigvalsh(_complex_block(phi))[-1], 0.0)) / grid.base_voltage
    sigma_r = params.common_sigma
    rn = var / sigma_r**2
    s0 = reference_covariance(H, rn)
    sens = 0.0
    for ln in grid.lines:
        for sign in (1, -1):
            Hp = reference_design_matrix(grid, monitored, {ln.id: 1 + sign * delta})
            if np.array_equal(Hp, H):
                continue
            sens = max(sens, float((reference_covariance(Hp, rn) - s0).max()))
    return cost, float(u), sens, True


# ------------------------------------------------------------------ hypervolume


def monte_carlo_hypervolume(front, reference_point, samples: int = 10_000_000, rng_seed: int = 0) -> float:
    """Dominated volume estimated by uniform sampling of the bounding box."""
    pts = np.asarray(front, dtype=float).reshape(-1, 3)
    ref = np.asarray(reference_point, dtype=float)
    if len(pts) == 0:
        return 0.0
    lo = pts.min(axis=0)
    box = float(np.prod(ref - lo))
    hits = 0
    done = 0
    chunk = 200_000
    shard = 0
    while done < samples:
        k = min(chunk, samples - done)
        rng = np.random.default_rng([rng_seed, shard])
        s = lo + rng.random((k, 3)) * (ref - lo)
        dominated = np.zeros(k, dtype=bool)
        for p in pts:
            dominated |= np.all(s >= p, axis=1)
        hits += int(dominated.sum())
        done += k
        shard += 1
    return box * hits / samples


# ------------------------------------------------------------------ check suite


def _check(name: str, passed: bool, measured=None, tolerance=None, **extra) -> dict:
    out = {"name": name, "status": "pass" if passed else "fail", "measured": measured, "tolerance": tolerance}
    out.update(extra)
    return out


def _skip(name: str, reason: str) -> dict:
    return {"name": name, "status": "skipped", "reason": reason}


def run_checks(
    problem: PlacementProblem,
    trials: int = 100_000,
    rng_seed: int = 0,
    hv_samples: int = 2_000_000,
) -> list[dict]:
    """Run every oracle that applies to ``problem`` and report each as a record.

    An oracle that cannot run (size cap, unobservable reference placement) is
    reported as skipped and the others still run.
    """
    grid, cfg = problem.grid, problem.cfg
    results: list[dict] = []
    x = np.ones(grid.n_buses, dtype=np.int8)
    model = build_measurement_model(grid, assign_channels(grid, x, cfg), problem.u, problem.params)
    try:
        fact = factorize(model)
    except np.linalg.LinAlgError as exc:
        fact = None
        reason = f"all-ones placement not observable: {exc}"
        for name in ("gain_identity", "covariance_identity", "monte_carlo_covariance", "monte_carlo_U", "finite_difference_S"):
            results.append(_skip(name, reason))
    if fact is not None:
        F = wls_gain(model, fact)
        resid = float(np.abs(F @ model.H - np.eye(model.n_state)).max())
        results.append(_check("gain_identity", resid <= 1e-8, resid, 1e-8))
        cov = error_covariance(model, fact)
        ref = reference_covariance(model.H, model.variances)
        frf = (F * model.variances[None, :]) @ F.T
        rel = float(np.abs(frf - cov.phi_real).max() / np.abs(cov.phi_real).max())
        rel_ref = float(np.abs(ref - cov.phi_real).max() / np.abs(cov.phi_real).max())
        results.append(_check("covariance_identity", max(rel, rel_ref) <= 1e-8, max(rel, rel_ref), 1e-8))
        rep = monte_carlo_uncertainty(model, trials=trials, rng_seed=rng_seed, base_voltage=grid.base_voltage,
                                      analytic_covariance=cov.phi_real)
        results.append(_check("monte_carlo_covariance", rep.max_rel_error <= 0.05, rep.max_rel_error, 0.05, trials=trials))
        u = max_uncertainty(cov, grid.base_voltage)
        rel_u = abs(rep.empirical_U - u) / u
        results.append(_check("monte_carlo_U", rel_u <= 0.05, rel_u, 0.05, analytic=u, empirical=rep.empirical_U))
        delta = 1e-3
        s = max_sensitivity(model, grid, ToleranceSpec(delta=delta), fact=fact).s_value
        fd = first_order_sensitivity(model, grid, delta)
        if fd == 0.0:
            results.append(_check("finite_difference_S", s == 0.0, s, 0.0))
        else:
            rel_s = abs(s - fd) / fd
            results.append(_check("finite_difference_S", rel_s <= 0.05, rel_s, 0.05, analytic=s, first_order=fd))

    if grid.n_buses > EXHAUSTIVE_MAX_BUSES:
        results.append(_skip("exhaustive_front", f"{grid.n_buses} buses exceeds cap of {EXHAUSTIVE_MAX_BUSES}"))
    else:
        ex = exhaustive_pareto(grid, cfg, problem=problem)
        objs = [m.objectives for m in ex.true_front]
        closed = len(brute_force_sort(objs, [0] * len(objs))) <= 1
        results.append(_check("exhaustive_front_closed", closed, len(ex.true_front), None))
        if grid.n_buses > 10 or cfg.contingency_aware or cfg.literal_observability:
            results.append(_skip("exhaustive_reference", "reference sweep covers N <= 10 without contingency"))
        else:
            worst, mismatched = 0.0, 0
            for ind in ex.all_evaluations.values():
                c, uu, ss, feas = reference_objectives(grid, ind.x, cfg.mode, problem.params, problem.tol.delta)
                if feas != ind.feasible or c != ind.objectives[0]:
                    mismatched += 1
                elif feas:
                    worst = max(worst, abs(uu - ind.objectives[1]) / uu, abs(ss - ind.objectives[2]) / max(ss, 1e-300))
            results.append(_check("exhaustive_reference", mismatched == 0 and worst <= 1e-6, worst, 1e-6,
                                  mismatched=mismatched, placements=len(ex.all_evaluations)))

    rng = np.random.default_rng([rng_seed, 1])
    bad = 0
    for _ in range(20):
        objs = rng.integers(0, 6, size=(200, 3)).astype(float)
        viol = np.where(rng.random(200) < 0.2, rng.integers(1, 4, size=200), 0)
        pop = [Individual(np.zeros(1, np.int8), tuple(o), int(v), ()) for o, v in zip(objs, viol)]
        fronts = nondominated_sort(pop)
        index = {id(ind): i for i, ind in enumerate(pop)}
        got = [sorted(index[id(ind)] for ind in f) for f in fronts]
        bad += got != brute_force_sort(objs, viol)
    results.append(_check("nondominated_sort", bad == 0, bad, 0, trials=20))

    front = rng.random((12, 3))
    ref_pt = np.ones(3) * 1.1
    exact = hypervolume(front, ref_pt)
    mc = monte_carlo_hypervolume(front, ref_pt, hv_samples, rng_seed)
    rel_hv = abs(mc - exact) / exact
    results.append(_check("hypervolume", rel_hv <= 0.02, rel_hv, 0.02, samples=hv_samples))
    return results
