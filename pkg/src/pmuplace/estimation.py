"""Linear WLS state estimation in rectangular coordinates.

The state is ``v = [v_R, v_I]`` (2N reals). Every complex measurement
``z = sum_k a_k V_k`` with ``a_k = g + jb`` contributes a real row
``[g, -b]`` and an imaginary row ``[b, g]``. Rows are stacked in the block
order voltage-real, voltage-imag, current-real, current-imag, ZI-real,
ZI-imag.

Numerics go through a QR factorisation of the whitened design matrix rather
than the normal equations; zero-injection pseudo-measurements carry weights
four orders of magnitude above the device channels and the normal equations
lose too many digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import solve_triangular

from .grid import GridModel
from .placement import ChannelAssignment

SINGULAR_RTOL = 1e-10


class SingularGainError(np.linalg.LinAlgError):
    """The information matrix is singular: the placement is not numerically observable."""


class CovarianceNotPSDError(ArithmeticError):
    pass


@dataclass(frozen=True)
class UncertaintyParams:
    sigma_v: float = 0.01
    sigma_i: float = 0.01
    zi_sigma_factor: float = 1e-2
    sigma_r: float | None = None  # defaults to sigma_v
    current_scale: float | None = None  # defaults to base_voltage * |y| per line

    def __post_init__(self):
        if self.sigma_v <= 0 or self.sigma_i <= 0:
            raise ValueError("sigma_v and sigma_i must be positive")
        if not 0 < self.zi_sigma_factor <= 1e-2:
            raise ValueError("zi_sigma_factor must lie in (0, 1e-2]")
        if self.sigma_r is not None and self.sigma_r <= 0:
            raise ValueError("sigma_r must be positive")

    @property
    def common_sigma(self) -> float:
        return self.sigma_v if self.sigma_r is None else self.sigma_r

    def scaled(self, k: float) -> UncertaintyParams:
        """All device sigmas (and sigma_r) multiplied by ``k``."""
        return UncertaintyParams(
            self.sigma_v * k,
            self.sigma_i * k,
            self.zi_sigma_factor,
            None if self.sigma_r is None else self.sigma_r * k,
            self.current_scale,
        )


@dataclass(frozen=True)
class RowInfo:
    kind: str  # "V", "I" or "Z"
    element: tuple[int, ...]  # (bus,) for V and Z; (bus, line) for I
    part: str  # "R" or "I"


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    H: np.ndarray
    variances: np.ndarray
    rows: tuple[RowInfo, ...]
    m_v: int
    m_i: int
    m_z: int
    sigma_r: float
    # nonzero entries of H that depend on a line admittance: (row, col, value, line)
    param_rows: np.ndarray
    param_cols: np.ndarray
    param_vals: np.ndarray
    param_lines: np.ndarray
    assignment: ChannelAssignment
    zin: np.ndarray
    params: UncertaintyParams
    line_scale: Mapping[int, float] = field(default_factory=dict)
    rel_sigma: np.ndarray | None = None  # row sigma / sigma_r, i.e. sqrt of diag(R~)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.variances)

    @property
    def n_state(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.m_v + self.m_i + self.m_z

    def line_component(self, line: int) -> np.ndarray:
        """The part of H contributed by one line's admittance (H is linear in it)."""
        out = np.zeros_like(self.H)
        sel = self.param_lines == line
        np.add.at(out, (self.param_rows[sel], self.param_cols[sel]), self.param_vals[sel])
        return out

    def parameter_lines(self) -> np.ndarray:
        return np.unique(self.param_lines)


@dataclass(frozen=True)
class StateCovariance:
    phi_real: np.ndarray
    phi_complex: np.ndarray


def _current_scale(grid: GridModel, line_id: int, params: UncertaintyParams) -> float:
    if params.current_scale is not None:
        return params.current_scale
    return grid.base_voltage * abs(grid.lines[line_id].admittance)


def _relative_sigmas(grid: GridModel, params: UncertaintyParams) -> tuple[float, np.ndarray, float]:
    """Voltage, per-line current and ZI sigmas divided by sigma_r.

    Ratios are taken before any other product so that scaling every sigma by
    a common factor leaves them bit-for-bit unchanged.
    """
    rv = params.sigma_v / params.common_sigma
    ri = params.sigma_i / params.common_sigma
    v = rv * grid.base_voltage
    cur = np.array([ri * _current_scale(grid, ln.id, params) for ln in grid.lines])
    z = params.zi_sigma_factor * min(v, float(cur.min()))
    return v, cur, z


def zi_sigma(grid: GridModel, params: UncertaintyParams) -> float:
    """Pseudo-measurement sigma for zero-injection rows.

    Referenced to the smallest sigma any voltage or current channel on this
    grid could have, so it does not depend on the placement.
    """
    return params.common_sigma * _relative_sigmas(grid, params)[2]


def build_measurement_model(
    grid: GridModel,
    asg: ChannelAssignment,
    u,
    params: UncertaintyParams,
    line_scale: Mapping[int, float] | None = None,
) -> MeasurementModel:
    """Assemble H and the diagonal of R for one channel assignment.

    ``line_scale`` multiplies individual line admittances inside H only; the
    weights stay at their nominal values.
    """
    n = grid.n_buses
    u = np.asarray(u).astype(np.int8)
    line_scale = dict(line_scale or {})
    y = grid.admittances.copy()
    for lid, s in line_scale.items():
        y[lid] = y[lid] * s

    # complex rows: list of (bus, coefficient, line or -1)
    v_rows, i_rows, z_rows = [], [], []
    v_info, i_info, z_info = [], [], []
    v_sig, i_sig = [], []
    rel_v, rel_i, rel_z = _relative_sigmas(grid, params)
    for bc in asg.per_bus:
        v_rows.append([(bc.bus, 1.0 + 0j, -1)])
        v_info.append((bc.bus,))
        v_sig.append(rel_v)
        for lid in bc.monitored_lines:
            far = grid.lines[lid].far_end(bc.bus)
            i_rows.append([(bc.bus, y[lid], lid), (far, -y[lid], lid)])
            i_info.append((bc.bus, lid))
            i_sig.append(rel_i[lid])
    for b in np.flatnonzero(u):
        terms = []
        for lid in grid.incident_lines[b]:
            far = grid.lines[lid].far_end(b)
            terms.append((int(b), y[lid], lid))
            terms.append((far, -y[lid], lid))
        z_rows.append(terms)
        z_info.append((int(b),))
    m_v, m_i, m_z = len(v_rows), len(i_rows), len(z_rows)
    m = m_v + m_i + m_z

    H = np.zeros((2 * m, 2 * n))
    prow, pcol, pval, pline = [], [], [], []
    rows: list[RowInfo] = []
    offset = 0
    for kind, block, info in (("V", v_rows, v_info), ("I", i_rows, i_info), ("Z", z_rows, z_info)):
        k = len(block)
        for r, terms in enumerate(block):
            re_row, im_row = offset + r, offset + k + r
            for bus, a, lid in terms:
                entries = (
                    (re_row, bus, a.real),
                    (re_row, n + bus, -a.imag),
                    (im_row, bus, a.imag),
                    (im_row, n + bus, a.real),
                )
                for rr, cc, val in entries:
                    H[rr, cc] += val
                    if lid >= 0 and val != 0.0:
                        prow.append(rr)
                        pcol.append(cc)
                        pval.append(val)
                        pline.append(lid)
        rows.extend(RowInfo(kind, el, "R") for el in info)
        rows.extend(RowInfo(kind, el, "I") for el in info)
        offset += 2 * k

    rel = np.concatenate([v_sig, v_sig, i_sig, i_sig, [rel_z] * (2 * m_z)]) if m else np.zeros(0)
    rel = np.asarray(rel, dtype=float)
    return MeasurementModel(
        H=H,
        variances=(params.common_sigma * rel) ** 2,
        rows=tuple(rows),
        m_v=m_v,
        m_i=m_i,
        m_z=m_z,
        sigma_r=params.common_sigma,
        param_rows=np.asarray(prow, dtype=int),
        param_cols=np.asarray(pcol, dtype=int),
        param_vals=np.asarray(pval, dtype=float),
        param_lines=np.asarray(pline, dtype=int),
        assignment=asg,
        zin=u,
        params=params,
        line_scale=line_scale,
        rel_sigma=rel,
    )


def check_observable(H: np.ndarray) -> None:
    """Raise SingularGainError unless H has full column rank.

    Rank is judged on the row-normalised matrix so that the extreme weights
    of pseudo-measurements do not masquerade as rank deficiency.
    """
    n_state = H.shape[1]
    if H.shape[0] < n_state:
        raise SingularGainError(f"singular gain: {H.shape[0]} rows for {n_state} states")
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0):
        raise SingularGainError("singular gain: empty measurement row")
    s = np.linalg.svd(H / norms[:, None], compute_uv=False)
    if s[-1] < SINGULAR_RTOL * s[0]:
        raise SingularGainError(f"singular gain: singular-value ratio {s[-1] / s[0]:.3e}")


@dataclass(frozen=True, eq=False)
class Factorization:
    """Whitened QR of a measurement model: ``diag(w) H = Q T`` with normalised weights."""

    Q: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray
    sqrt_w: np.ndarray  # 1 / sqrt(normalised variances)

    @property
    def normalized_covariance(self) -> np.ndarray:
        """[H^T Rn^-1 H]^-1 where Rn = R / sigma_r^2."""
        return self.T_inv @ self.T_inv.T


def factorize(model: MeasurementModel) -> Factorization:
    check_observable(model.H)
    if model.rel_sigma is not None:
        sqrt_w = 1.0 / model.rel_sigma
    else:
        sqrt_w = model.sigma_r / np.sqrt(model.variances)
    Q, T = np.linalg.qr(model.H * sqrt_w[:, None])
    T_inv = solve_triangular(T, np.eye(T.shape[0]))
    return Factorization(Q, T, T_inv, sqrt_w)


def wls_gain(model: MeasurementModel, fact: Factorization | None = None) -> np.ndarray:
    """F = [H^T R^-1 H]^-1 H^T R^-1 (2N x 2M)."""
    fact = fact or factorize(model)
    return (fact.T_inv @ fact.Q.T) * fact.sqrt_w[None, :]


def complex_covariance(phi_real: np.ndarray) -> np.ndarray:
    """Second moment of e_R + j e_I from the stacked real covariance."""
    n = phi_real.shape[0] // 2
    rr, ri = phi_real[:n, :n], phi_real[:n, n:]
    ir, ii = phi_real[n:, :n], phi_real[n:, n:]
    out = (rr + ii) + 1j * (ir - ri)
    return 0.5 * (out + out.conj().T)


def error_covariance(model: MeasurementModel, fact: Factorization | None = None) -> StateCovariance:
    fact = fact or factorize(model)
    phi = fact.normalized_covariance * model.sigma_r**2
    phi = 0.5 * (phi + phi.T)
    return StateCovariance(phi, complex_covariance(phi))


def max_uncertainty(cov: StateCovariance, base_voltage: float = 1.0) -> float:
    """Largest complex-error standard deviation, in percent of nominal voltage."""
    eig = np.linalg.eigvalsh(cov.phi_complex)
    if eig[0] < -1e-10:
        raise CovarianceNotPSDError(f"covariance not PSD: eigenvalue {eig[0]:.3e}")
    return 100.0 * float(np.sqrt(max(eig[-1], 0.0))) / base_voltage
