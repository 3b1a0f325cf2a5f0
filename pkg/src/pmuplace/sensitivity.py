"""Sensitivity of the normalised error covariance to line-parameter tolerances.

The normalised covariance ``S = [H^T Rn^-1 H]^-1`` (with ``R = sigma_r^2 Rn``)
is independent of the common measurement accuracy. The sensitivity objective
is the largest increase of any entry of ``S`` when line admittances deviate
by a relative tolerance ``delta``.

Scaling line ``l`` by ``1 + s*delta`` changes only the rows of H that contain
its admittance, so the perturbed information matrix is a low-rank update of
the nominal one. The change ``S(delta) - S(0)`` is evaluated with the
Woodbury identity on the whitened QR factor, which computes the difference
directly instead of subtracting two nearly equal inverses.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .estimation import SINGULAR_RTOL, Factorization, MeasurementModel, build_measurement_model, factorize
from .grid import GridModel


class SearchMode(str, Enum):
    PER_LINE_CORNERS = "per_line_corners"
    SINGLE_ENTRY = "single_entry"


@dataclass(frozen=True)
class ToleranceSpec:
    delta: float = 0.05
    search: SearchMode = SearchMode.PER_LINE_CORNERS
    absolute_change: bool = False

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        object.__setattr__(self, "search", SearchMode(self.search))


@dataclass(frozen=True)
class SensitivityResult:
    s_nominal: np.ndarray
    s_value: float
    argmax: tuple[int, int, str] | None


class SingularPerturbationError(np.linalg.LinAlgError):
    pass


def sensitivity_matrix(
    model: MeasurementModel,
    sigma_r: float | None = None,
    fact: Factorization | None = None,
) -> np.ndarray:
    """Normalised covariance [H^T Rn^-1 H]^-1 with Rn = R / sigma_r^2."""
    fact = fact or factorize(model)
    s = fact.normalized_covariance
    if sigma_r is not None and sigma_r != model.sigma_r:
        s = s * (model.sigma_r / sigma_r) ** 2
    return 0.5 * (s + s.T)


def perturbed_model(
    model: MeasurementModel,
    grid: GridModel,
    line: int,
    sign: int,
    delta: float,
) -> MeasurementModel:
    """Rebuild ``model`` with line ``line``'s admittance scaled by ``1 + sign*delta``."""
    if not 0 <= line < grid.n_lines:
        raise ValueError(f"unknown line {line}")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    scale = dict(model.line_scale)
    scale[line] = scale.get(line, 1.0) * (1.0 + sign * delta)
    return build_measurement_model(grid, model.assignment, model.zin, model.params, scale)


def _line_blocks(model: MeasurementModel, fact: Factorization) -> tuple[np.ndarray, np.ndarray]:
    """Stacked low-rank factors for every parameter-carrying line.

    Returns ``(lines, U)`` with ``U[l] = [A_l; D_l] T^-1`` of shape
    (n_lines, 2k, 2N): ``A_l`` are the whitened rows of H that contain line
    ``l``'s admittance and ``D_l`` that line's own share of them. Lines with
    fewer than ``k`` rows are zero-padded, which leaves the update unchanged.
    """
    if model.param_lines.size == 0:
        return np.zeros(0, dtype=int), np.zeros((0, 0, model.n_state))
    pair = np.stack([model.param_lines, model.param_rows], axis=1)
    uniq_pairs, which = np.unique(pair, axis=0, return_inverse=True)
    which = which.ravel()
    lines, line_idx = np.unique(uniq_pairs[:, 0], return_inverse=True)
    line_idx = line_idx.ravel()
    counts = np.bincount(line_idx)
    k = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(uniq_pairs)) - starts[line_idx]
    rows = uniq_pairs[:, 1]
    w = fact.sqrt_w
    stack = np.zeros((len(lines), 2 * k, model.n_state))
    stack[line_idx, slot] = model.H[rows] * w[rows, None]
    entry_line = line_idx[which]
    np.add.at(
        stack,
        (entry_line, k + slot[which], model.param_cols),
        model.param_vals * w[model.param_rows],
    )
    return lines, stack @ fact.T_inv


def _woodbury_changes(U: np.ndarray, T_inv: np.ndarray, signed_delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched S(delta) - S(0) for each stacked factor; also flags singular updates."""
    # J(delta) = T^T (I + U^T C U) T with C = [[0, t I], [t I, t^2 I]]
    k = U.shape[1] // 2
    t = signed_delta
    C = np.zeros((2 * k, 2 * k))
    idx = np.arange(k)
    C[idx, k + idx] = t
    C[k + idx, idx] = t
    C[k + idx, k + idx] = t * t
    core = np.eye(2 * k) + (U @ U.transpose(0, 2, 1)) @ C
    # core carries the non-unit spectrum of T^-T J(delta) T^-1
    singular = np.min(np.abs(np.linalg.eigvals(core)), axis=1) < SINGULAR_RTOL
    core[singular] = np.eye(2 * k)
    Q = T_inv @ U.transpose(0, 2, 1)
    change = -(Q @ C) @ np.linalg.solve(core, Q.transpose(0, 2, 1))
    return 0.5 * (change + change.transpose(0, 2, 1)), singular


def covariance_change(
    model: MeasurementModel,
    fact: Factorization,
    line: int,
    signed_delta: float,
) -> np.ndarray:
    """S(delta) - S(0) for one line scaled by ``1 + signed_delta``."""
    lines, U = _line_blocks(model, fact)
    hit = np.flatnonzero(lines == line)
    if signed_delta == 0.0 or hit.size == 0:
        return np.zeros_like(fact.T_inv)
    change, singular = _woodbury_changes(U[hit], fact.T_inv, signed_delta)
    if singular[0]:
        raise SingularPerturbationError(f"singular under perturbation of line {line}")
    return change[0]


def max_sensitivity(
    model: MeasurementModel,
    grid: GridModel,
    tol: ToleranceSpec,
    sigma_r: float | None = None,
    fact: Factorization | None = None,
) -> SensitivityResult:
    """Worst-case increase of a normalised covariance entry under line tolerances.

    A perturbation that makes the model unobservable yields ``s_value = inf``.
    """
    fact = fact or factorize(model)
    s_nom = sensitivity_matrix(model, sigma_r, fact)
    rescale = 1.0 if sigma_r is None else (model.sigma_r / sigma_r) ** 2
    if tol.search is SearchMode.SINGLE_ENTRY:
        return _single_entry(model, fact, s_nom, tol, rescale)

    lines, U = _line_blocks(model, fact)
    best, arg = 0.0, None
    for sign in (1, -1):
        if lines.size == 0:
            break
        change, singular = _woodbury_changes(U, fact.T_inv, sign * tol.delta)
        if singular.any():
            line = int(lines[np.argmax(singular)])
            return SensitivityResult(s_nom, float("inf"), (-1, -1, f"line {line} {sign:+d}"))
        change = change * rescale
        if tol.absolute_change:
            change = np.abs(change)
        flat = int(np.argmax(change))
        if change.flat[flat] > best:
            best = float(change.flat[flat])
            li, rem = divmod(flat, change.shape[1] * change.shape[2])
            i, j = divmod(rem, change.shape[2])
            arg = (i, j, f"line {int(lines[li])} {'+' if sign > 0 else '-'}{tol.delta:g}")
    return SensitivityResult(s_nom, best, arg)


def _single_entry(model, fact, s_nom, tol, rescale) -> SensitivityResult:
    # first-order response to one H entry moving by +-delta of itself
    if model.param_rows.size == 0:
        return SensitivityResult(s_nom, 0.0, None)
    s_base = fact.normalized_covariance
    entries = np.unique(np.stack([model.param_rows, model.param_cols], axis=1), axis=0)
    weights = fact.sqrt_w**2
    best, arg = 0.0, None
    for start in range(0, len(entries), 64):
        chunk = entries[start : start + 64]
        r, c = chunk[:, 0], chunk[:, 1]
        alpha = model.H[r, c] * weights[r]
        p = s_base[:, c]  # (2N, E)
        q = s_base @ model.H[r].T  # (2N, E)
        outer = p.T[:, :, None] * q.T[:, None, :]
        resp = tol.delta * np.abs(alpha[:, None, None] * (outer + outer.transpose(0, 2, 1))) * rescale
        flat = resp.reshape(len(chunk), -1)
        k = int(np.argmax(flat.max(axis=1)))
        j = int(np.argmax(flat[k]))
        if flat[k, j] > best:
            best = float(flat[k, j])
            i1, i2 = divmod(j, s_base.shape[0])
            arg = (i1, i2, f"H[{int(r[k])},{int(c[k])}]")
    return SensitivityResult(s_nom, best, arg)
