"""Difference penalties and the pentadiagonal SPD solver.

Symmetric banded matrices are stored in LAPACK lower form: an array ``ab``
of shape ``(3, m)`` with ``ab[0]`` the main diagonal, ``ab[1, :m-1]`` the
first sub-diagonal and ``ab[2, :m-2]`` the second.  Unused tail entries are
kept at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .errors import DimensionError, SingularSystemError

BANDWIDTH = 2

_SECOND_DIFF = np.array([1.0, -2.0, 1.0])
_CENTRAL_DIFF = np.array([-0.5, 0.0, 0.5])


def _stencil_gram(stencil, m):
    """Banded form of ``D.T @ D`` where every row of ``D`` is `stencil` shifted by one."""
    ab = np.zeros((BANDWIDTH + 1, m))
    rows = m - 2
    for a in range(3):
        for b in range(a, 3):
            ab[b - a, a:a + rows] += stencil[a] * stencil[b]
    return ab


def _stencil_energy(stencil, x):
    d = np.correlate(np.asarray(x, dtype=float), stencil, mode="valid")
    return float(d @ d)


def banded_matvec(ab, x):
    """Product of the symmetric banded matrix `ab` with the vector `x`."""
    x = np.asarray(x, dtype=float)
    y = ab[0] * x
    for d in range(1, BANDWIDTH + 1):
        sub = ab[d, :-d]
        y[d:] += sub * x[:-d]
        y[:-d] += sub * x[d:]
    return y


def banded_quad(ab, x):
    """``x.T @ A @ x`` for a symmetric banded ``A``."""
    x = np.asarray(x, dtype=float)
    return float(x @ banded_matvec(ab, x))


def banded_to_dense(ab):
    m = ab.shape[1]
    dense = np.diag(ab[0])
    for d in range(1, BANDWIDTH + 1):
        if m > d:
            off = np.diag(ab[d, :m - d], -d)
            dense = dense + off + off.T
    return dense


@dataclass(frozen=True)
class PenaltyPair:
    """Curvature (``omega``) and slope (``gamma``) penalties for one axis length.

    ``u @ omega @ u`` is the sum of squared second differences over the
    interior indices and ``u @ gamma @ u`` the sum of squared central
    differences ``(u[i+1] - u[i-1]) / 2``.  Both are in banded lower form.
    """

    size: int
    omega: np.ndarray
    gamma: np.ndarray

    # summed squared differences, not x' A x: for smooth x the matrix form
    # cancels terms of size x_i^2 down to a tiny curvature and loses digits
    def omega_quad(self, x):
        return _stencil_energy(_SECOND_DIFF, x)

    def gamma_quad(self, x):
        return _stencil_energy(_CENTRAL_DIFF, x)


@dataclass(frozen=True)
class BandedSpdSystem:
    """``A x = rhs`` with ``A`` symmetric pentadiagonal in banded lower form."""

    bands: np.ndarray
    rhs: np.ndarray

    @property
    def size(self):
        return self.bands.shape[1]


def build_penalties(m):
    """Return the `PenaltyPair` for profiles of length `m` (``m >= 3``)."""
    if m < 3:
        raise DimensionError(f"penalties need at least 3 points, got {m}")
    omega = _stencil_gram(_SECOND_DIFF, m)
    gamma = _stencil_gram(_CENTRAL_DIFF, m)
    omega.setflags(write=False)
    gamma.setflags(write=False)
    return PenaltyPair(m, omega, gamma)


def conditional_penalty(pen_u, pen_v, v, lam):
    """Banded ``lam * Omega_{u|v}`` for updating the profile paired with `pen_u`.

    ``Omega_{u|v} = (v.v) Omega_u + (v' Omega_v v) I + 2 (v' Gamma_v v) Gamma_u``.
    Swapping the arguments gives ``lam * Omega_{v|u}``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (pen_v.size,):
        raise DimensionError(f"vector of length {v.shape} does not match penalty size {pen_v.size}")
    vv = float(v @ v)
    v_omega_v = pen_v.omega_quad(v)
    v_gamma_v = pen_v.gamma_quad(v)
    ab = vv * pen_u.omega + 2.0 * v_gamma_v * pen_u.gamma
    ab[0] += v_omega_v
    return lam * ab


def solve_banded_spd(system):
    """Solve a symmetric positive-definite pentadiagonal system by banded Cholesky.

    Raises
    ------
    SingularSystemError
        If the factorization meets a non-positive pivot.
    """
    ab = np.asarray(system.bands, dtype=float)
    rhs = np.asarray(system.rhs, dtype=float)
    if ab.shape != (BANDWIDTH + 1, rhs.shape[0]):
        raise DimensionError(f"bands {ab.shape} incompatible with rhs of length {rhs.shape[0]}")
    try:
        return solveh_banded(ab, rhs, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
