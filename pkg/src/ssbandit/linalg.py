"""Online ridge regression state shared by the UCB solvers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DataError, NumericalIntegrityError

#: full re-inversion of the precision matrix after this many rank-one updates
REFRESH_EVERY = 1000
NEGATIVE_RADICAND_TOL = 1e-12


@dataclass
class RidgeState:
    """Per-arm ridge regression: D = lam*I + sum x x^T, b = sum r x, theta = D^-1 b."""

    dim: int
    lam: float
    precision: np.ndarray
    precision_inv: np.ndarray
    moment: np.ndarray
    theta: np.ndarray
    obs_count: int = 0
    updates_since_refresh: int = field(default=0, repr=False)

    def copy(self) -> RidgeState:
        return RidgeState(
            self.dim,
            self.lam,
            self.precision.copy(),
            self.precision_inv.copy(),
            self.moment.copy(),
            self.theta.copy(),
            self.obs_count,
            self.updates_since_refresh,
        )

    def refresh_inverse(self) -> None:
        """Replace the incrementally maintained inverse by a direct one."""
        inv = np.linalg.inv(self.precision)
        self.precision_inv = 0.5 * (inv + inv.T)
        self.theta = self.precision_inv @ self.moment
        self.updates_since_refresh = 0


def ridge_init(dim: int, lam: float) -> RidgeState:
    if dim < 1:
        raise ConfigurationError(f"ridge dimension must be >= 1, got {dim}")
    if not lam > 0:
        raise ConfigurationError(f"ridge regularizer must be positive, got {lam}")
    return RidgeState(
        dim=dim,
        lam=float(lam),
        precision=np.eye(dim) * lam,
        precision_inv=np.eye(dim) / lam,
        moment=np.zeros(dim),
        theta=np.zeros(dim),
    )


def _as_vector(state: RidgeState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != state.dim:
        raise ContractError(f"expected a vector of length {state.dim}, got shape {x.shape}")
    return np.ascontiguousarray(x)


def ridge_update(state: RidgeState, x, r: float) -> RidgeState:
    """Add one observation in place (and return the state for chaining)."""
    x = _as_vector(state, x)
    if not (np.all(np.isfinite(x)) and math.isfinite(r)):
        raise DataError("ridge_update received non-finite input")
    kernels.rank_one_update(state.precision, x)
    state.moment += r * x
    kernels.sherman_morrison(state.precision_inv, x)
    state.obs_count += 1
    state.updates_since_refresh += 1
    if state.updates_since_refresh >= REFRESH_EVERY:
        state.refresh_inverse()
    else:
        state.theta = state.precision_inv @ state.moment
    return state


def ridge_rebuild(dim: int, lam: float, features: np.ndarray, rewards: np.ndarray) -> RidgeState:
    """Build a state from scratch out of an (n, dim) feature block."""
    state = ridge_init(dim, lam)
    features = np.asarray(features, dtype=np.float64).reshape(-1, dim)
    rewards = np.asarray(rewards, dtype=np.float64)
    if features.shape[0]:
        state.precision += features.T @ features
        state.precision = 0.5 * (state.precision + state.precision.T)
        state.moment = features.T @ rewards
        state.obs_count = features.shape[0]
        state.refresh_inverse()
    return state


def ridge_solve_batch(X, R, lam: float, pinv_fallback: bool = True) -> np.ndarray:
    """Solve (lam*I + X^T X) theta = X^T R by Cholesky, falling back to lstsq when singular."""
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"design matrix must be 2-D, got shape {X.shape}")
    if R.shape != (X.shape[0],):
        raise DataError(f"reward vector shape {R.shape} does not match {X.shape[0]} rows")
    if lam < 0:
        raise ConfigurationError("ridge regularizer must be nonnegative")
    d = X.shape[1]
    gram = X.T @ X + lam * np.eye(d)
    rhs = X.T @ R
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        if not pinv_fallback:
            raise DataError("normal equations are singular") from None
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def ucb_width(state: RidgeState, x) -> float:
    x = _as_vector(state, x)
    q = kernels.quad_form(state.precision_inv, x)
    if q < 0:
        if q < -NEGATIVE_RADICAND_TOL:
            raise NumericalIntegrityError(f"x^T D^-1 x = {q} is negative")
        q = 0.0
    return math.sqrt(q)


def ucb_score(state: RidgeState, x, alpha: float) -> float:
    x = _as_vector(state, x)
    return float(state.theta @ x) + alpha * ucb_width(state, x)
