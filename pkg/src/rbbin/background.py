"""Robust background surface estimation.

The background is modelled as a sum of rank-one terms ``u_k v_k^T``, each fit
to the current residual by alternating penalized weighted least squares
(Huber weights, curvature penalty), added stagewise until a term's energy
``|u|^2 |v|^2`` drops below a tolerance.

The alternating updates never form the ``mn x m`` Kronecker operators: with a
diagonal weight matrix, ``V' W V`` reduces to ``diag(W @ v**2)`` and
``V' W r`` to ``(W * R) @ v``, so every solve is pentadiagonal.
"""

from __future__ import annotations

import contextlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import svds

from .errors import DegenerateFitError, DimensionError, SingularSystemError, StageError
from .penalty import BandedSpdSystem, PenaltyPair, build_penalties, conditional_penalty, solve_banded_spd

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (1e-4, 1e-2, 1.0, 1e2, 1e4)

# Images at most this many pixels get a dense SVD for initialization.
_DENSE_SVD_LIMIT = 512 * 512


@dataclass(frozen=True)
class HuberConfig:
    """Settings for the boosted robust fit.

    `delta_units` says how `delta` is read.  With ``"gray"`` (default) the
    cutoff is in 8-bit gray levels, so on unit-scale data the effective
    cutoff is ``delta / 255``.  With ``"unit"`` it is compared directly to
    unit-scale residuals, which on [0, 1] images leaves every weight at 1.

    `relative_tol` measures the inner stopping quantity
    ``|u_old v_old^T - u v^T|_F^2`` relative to ``|R|_F^2``.

    `lambda_rule` picks each stage's lambda.  ``"objective"`` (default)
    fits the whole grid and keeps the largest lambda whose final objective
    f(u, v; lambda) is within a factor ``1 + lambda_rtol`` of the smallest.
    With ``lambda_rtol=0`` that is the plain argmin (ties to larger
    lambda), which in practice always lands on the smallest grid value
    because f carries lambda times the penalty; later stages then fit the
    foreground itself.  ``"smoothest"`` fits only the largest grid value.
    """

    delta: float = 1.346
    delta_units: str = "gray"
    max_irls_iters: int = 100
    tol_inner: float = 1e-6
    tol_stage: float = 1e-6
    max_stages: int = 20
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    relative_tol: bool = True
    lambda_rule: str = "objective"
    lambda_rtol: float = 0.5
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.delta_units not in ("gray", "unit"):
            raise ValueError(f"delta_units must be 'gray' or 'unit', not {self.delta_units!r}")
        if not (self.tol_inner > 0 and self.tol_stage > 0):
            raise ValueError("tolerances must be positive")
        if self.max_stages < 1 or self.max_irls_iters < 1:
            raise ValueError("max_stages and max_irls_iters must be at least 1")
        if self.lambda_rule not in ("objective", "smoothest"):
            raise ValueError(f"lambda_rule must be 'objective' or 'smoothest', not {self.lambda_rule!r}")
        if not self.lambda_rtol >= 0:
            raise ValueError("lambda_rtol must be nonnegative")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise ValueError("lambda_grid must be nonempty and strictly positive")

    @property
    def effective_delta(self):
        """Huber cutoff on the scale the data is fit on (unit intensities)."""
        return self.delta / 255.0 if self.delta_units == "gray" else self.delta


@dataclass(frozen=True)
class RankOneTerm:
    u: np.ndarray
    v: np.ndarray
    lambda_used: float
    irls_iters: int
    objective: float
    converged: bool = True

    @property
    def energy(self):
        return float(self.u @ self.u) * float(self.v @ self.v)

    def surface(self):
        return np.outer(self.u, self.v)


@dataclass(frozen=True)
class BackgroundModel:
    terms: tuple
    m: int
    n: int

    @property
    def stages(self):
        return len(self.terms)

    @property
    def lambdas(self):
        return [t.lambda_used for t in self.terms]

    @property
    def energies(self):
        return [t.energy for t in self.terms]

    def surface(self, upto=None):
        """The background ``L = sum_k u_k v_k^T`` over the first `upto` terms."""
        L = np.zeros((self.m, self.n))
        for term in self.terms[:upto]:
            L += np.outer(term.u, term.v)
        return L


@dataclass
class RobustFitState:
    """Residual being fit and the current Huber weights."""

    residual: np.ndarray
    weights: np.ndarray
    iterations: int = 0
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class SolveEvent:
    """Objective before/after one coordinate solve with the weights held fixed."""

    lam: float
    iteration: int
    step: str
    f_before: float
    f_after: float
    w_min: float
    w_max: float


_observers: list = []


@contextlib.contextmanager
def observe_fits(callback: Callable[[SolveEvent], None]):
    """Call `callback` with a `SolveEvent` after every u- and v-solve.

    Objective evaluations only happen while at least one observer is active.
    """
    _observers.append(callback)
    try:
        yield callback
    finally:
        _observers.remove(callback)


def huber_weights(residual_fit, delta):
    """Huber IRLS weights: 1 where ``|r| <= delta``, else ``delta / |r|``."""
    r = np.abs(np.asarray(residual_fit, dtype=float))
    w = np.ones_like(r)
    big = r > delta
    w[big] = delta / r[big]
    return w


def objective_f(u, v, R, W, pen_u, pen_v, lam):
    """Weighted squared loss of ``R - u v^T`` plus the separable Hessian penalty."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    R = np.asarray(R, dtype=float)
    if R.shape != (u.size, v.size) or np.shape(W) != R.shape:
        raise DimensionError(f"R {R.shape}, W {np.shape(W)} do not match u ({u.size}) x v ({v.size})")
    if pen_u.size != u.size or pen_v.size != v.size:
        raise DimensionError("penalty sizes do not match u, v")
    loss = float(np.sum(W * (R - np.outer(u, v)) ** 2))
    uu = float(u @ u)
    vv = float(v @ v)
    penalty = (pen_u.omega_quad(u) * vv
               + pen_v.omega_quad(v) * uu
               + 2.0 * pen_u.gamma_quad(u) * pen_v.gamma_quad(v))
    return loss + lam * penalty


def _leading_pair(R):
    """sqrt(s1)-scaled leading singular vectors, sign fixed so sum(u) >= 0."""
    if R.size <= _DENSE_SVD_LIMIT or min(R.shape) < 3:
        U, s, Vt = np.linalg.svd(R, full_matrices=False)
        u1, s1, v1 = U[:, 0], s[0], Vt[0]
    else:
        v0 = np.ones(min(R.shape)) / np.sqrt(min(R.shape))
        U, s, Vt = svds(R, k=1, v0=v0)
        u1, s1, v1 = U[:, 0], s[0], Vt[0]
    if u1.sum() < 0:
        u1, v1 = -u1, -v1
    root = np.sqrt(s1)
    return root * u1, root * v1


def _update_u(R_w, W, v, pen_u, pen_v, lam):
    ab = conditional_penalty(pen_u, pen_v, v, lam)
    ab[0] += W @ (v * v)
    return solve_banded_spd(BandedSpdSystem(ab, R_w @ v))


def _change_sq(u_old, v_old, u, v):
    # |u_o v_o' - u v'|_F^2 without forming either outer product
    val = (u_old @ u_old) * (v_old @ v_old) + (u @ u) * (v @ v) - 2.0 * (u_old @ u) * (v_old @ v)
    return max(float(val), 0.0)


def fit_rank_one(R, cfg: HuberConfig, lam, pen_u: Optional[PenaltyPair] = None,
                 pen_v: Optional[PenaltyPair] = None, robust=True,
                 state: Optional[RobustFitState] = None):
    """Fit one smooth rank-one term ``u v^T`` to the residual `R`.

    Alternates Huber reweighting, a u-solve and a v-solve, starting from the
    leading singular pair.  With ``robust=False`` the weights stay at 1,
    which gives the plain penalized least-squares rank-one fit.

    If a `RobustFitState` is passed it is filled with the residual, the
    final weights and the per-iteration objective history.

    Returns
    -------
    RankOneTerm
        ``objective`` is f evaluated at the final (u, v) with weights
        recomputed from that iterate.
    """
    R = np.asarray(R, dtype=float)
    m, n = R.shape
    if m < 3 or n < 3:
        raise DimensionError(f"rank-one fit needs at least 3x3, got {m}x{n}")
    if not np.all(np.isfinite(R)):
        raise ValueError("residual contains non-finite values")
    pen_u = pen_u or build_penalties(m)
    pen_v = pen_v or build_penalties(n)
    delta = cfg.effective_delta

    u, v = _leading_pair(R)
    if not (np.any(u) and np.any(v)):
        zero_u, zero_v = np.zeros(m), np.zeros(n)
        W = huber_weights(R, delta) if robust else np.ones_like(R)
        obj = objective_f(zero_u, zero_v, R, W, pen_u, pen_v, lam)
        if state is not None:
            state.residual, state.weights, state.iterations = R, W, 0
            state.history.append(obj)
        return RankOneTerm(zero_u, zero_v, float(lam), 0, obj)

    tol = cfg.tol_inner * (float(np.sum(R * R)) if cfg.relative_tol else 1.0)
    u_old, v_old = np.zeros(m), np.zeros(n)
    W = np.ones_like(R)
    it = 0
    converged = False
    while True:
        if _change_sq(u_old, v_old, u, v) <= tol:
            converged = True
            break
        if it >= cfg.max_irls_iters:
            break
        if robust:
            W = huber_weights(R - np.outer(u, v), delta)
        R_w = W * R
        watching = bool(_observers) or state is not None
        try:
            f0 = objective_f(u, v, R, W, pen_u, pen_v, lam) if watching else 0.0
            u_old, u = u, _update_u(R_w, W, v, pen_u, pen_v, lam)
            f1 = objective_f(u, v, R, W, pen_u, pen_v, lam) if watching else 0.0
            if not np.any(u):
                v_old, v = v, np.zeros(n)
                it += 1
                break
            v_old, v = v, _update_u(R_w.T, W.T, u, pen_v, pen_u, lam)
        except SingularSystemError as exc:
            raise DegenerateFitError(f"singular update at lambda={lam}, iteration {it}") from exc
        it += 1
        if watching:
            f2 = objective_f(u, v, R, W, pen_u, pen_v, lam)
            w_min, w_max = float(W.min()), float(W.max())
            for cb in list(_observers):
                cb(SolveEvent(lam, it, "u", f0, f1, w_min, w_max))
                cb(SolveEvent(lam, it, "v", f1, f2, w_min, w_max))
            if state is not None:
                state.history.append(f2)

    W_final = huber_weights(R - np.outer(u, v), delta) if robust else np.ones_like(R)
    obj = objective_f(u, v, R, W_final, pen_u, pen_v, lam)
    if state is not None:
        state.residual, state.weights, state.iterations = R, W_final, it
    if not converged:
        log.debug("rank-one fit hit max_irls_iters=%d at lambda=%g", cfg.max_irls_iters, lam)
    return RankOneTerm(u, v, float(lam), it, obj, converged)


def select_lambda(R, cfg: HuberConfig, pen_u=None, pen_v=None, robust=True):
    """Fit the stage term, choosing lambda by ``cfg.lambda_rule``.

    With ``"objective"`` every grid value is fit and the largest lambda
    whose objective is within ``1 + cfg.lambda_rtol`` times the smallest
    wins (exact ties also go to the larger lambda).  Grid fits are
    independent and run on ``cfg.jobs`` threads; the choice does not depend
    on completion order.  With ``"smoothest"`` only the largest grid value
    is fit.
    """
    R = np.asarray(R, dtype=float)
    pen_u = pen_u or build_penalties(R.shape[0])
    pen_v = pen_v or build_penalties(R.shape[1])

    def attempt(lam):
        try:
            return fit_rank_one(R, cfg, lam, pen_u, pen_v, robust=robust)
        except DegenerateFitError as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            return None

    grid = list(cfg.lambda_grid)
    if cfg.lambda_rule == "smoothest":
        grid = [max(grid)]
    if cfg.jobs > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            fits = list(pool.map(attempt, grid))
    else:
        fits = [attempt(lam) for lam in grid]

    fits = [t for t in fits if t is not None]
    if not fits:
        raise StageError(f"all {len(grid)} lambda values failed")
    f_min = min(t.objective for t in fits)
    near = [t for t in fits if t.objective <= f_min + cfg.lambda_rtol * abs(f_min)]
    return max(near, key=lambda t: t.lambda_used)


def _as_array(Y):
    pixels = getattr(Y, "pixels", Y)
    return np.asarray(pixels, dtype=float)


def estimate_background(Y, cfg: HuberConfig = HuberConfig(), robust=True,
                        on_stage: Optional[Callable[[int, RankOneTerm], None]] = None):
    """Boosted estimate of the background surface of `Y`.

    `Y` is a unit-scale `GrayImage` or a 2-D array.  Each stage fits a term to
    the current residual (lambda picked per stage), subtracts it, and the
    loop stops after the first term whose energy is below ``cfg.tol_stage``;
    that term is kept.
    """
    if getattr(Y, "scale", "unit") != "unit":
        raise ValueError("estimate_background expects a normalized (unit-scale) image")
    R = _as_array(Y).copy()
    if R.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {R.shape}")
    m, n = R.shape
    if m < 3 or n < 3:
        raise DimensionError(f"image must be at least 3x3, got {m}x{n}")
    pen_u, pen_v = build_penalties(m), build_penalties(n)
    terms = []
    for k in range(cfg.max_stages):
        term = select_lambda(R, cfg, pen_u, pen_v, robust=robust)
        R -= np.outer(term.u, term.v)
        terms.append(term)
        log.debug("stage %d: lambda=%g energy=%.3g iters=%d", k + 1, term.lambda_used,
                  term.energy, term.irls_iters)
        if on_stage is not None:
            on_stage(k, term)
        if term.energy < cfg.tol_stage:
            break
    return BackgroundModel(tuple(terms), m, n)
