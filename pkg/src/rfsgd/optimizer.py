"""One-pass averaged SGD for random-features least squares, plus baselines.

The update is theta_t = theta_{t-1} + gamma_t (y_t - <theta_{t-1}, phi_t>) phi_t
with polynomial-decay step size gamma_t = gamma0 * t^{-zeta}. The reported
estimator is the running average of theta_0 .. theta_{T-1}: the initial point
is included, the final update is computed but excluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .features import FeatureMap, apply_batch


@dataclass(frozen=True)
class StepSchedule:
    """gamma_t = gamma0 * t^{-zeta}; zeta = 0 is the constant step size."""

    gamma0: float
    zeta: float = 0.0

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if not 0.0 <= self.zeta < 1.0:
            raise ValueError(f"zeta must lie in [0, 1), got {self.zeta}")


def step_size(schedule: StepSchedule, t: int) -> float:
    """Step size at iteration t = 1, 2, ..."""
    if t < 1:
        raise ValueError(f"iteration index must be >= 1, got {t}")
    return schedule.gamma0 * float(t) ** (-schedule.zeta)


@dataclass(frozen=True)
class ZeroInit:
    """theta_0 = 0."""


@dataclass(frozen=True)
class ConstantInit:
    """theta_0 = c * ones."""

    value: float


@dataclass(frozen=True)
class NearMinNormInit:
    """theta_0 = min-norm solution plus N(0, noise_sd^2) per coordinate."""

    noise_sd: float = 1.0


InitScheme = Union[ZeroInit, ConstantInit, NearMinNormInit]


@dataclass
class SgdOutcome:
    theta_bar: np.ndarray
    theta_last: np.ndarray
    trajectory: Optional[np.ndarray]  # (T+1, p) iterates theta_0..theta_T when kept
    stability_warning: bool


class DivergenceError(RuntimeError):
    """SGD iterate became non-finite or exceeded the norm guard."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


_NORM_GUARD = 1e12


def sgd_average(
    fmap: FeatureMap,
    X: np.ndarray,
    y: np.ndarray,
    schedule: StepSchedule,
    init: InitScheme = ZeroInit(),
    epochs: int = 1,
    seed: int = 0,
    keep_trajectory: bool = False,
) -> SgdOutcome:
    """Averaged SGD over the dataset; batch size 1, one pass by default.

    With epochs = 1 samples are visited exactly in the order given. More
    epochs reshuffle every epoch with the seed; note the one-pass setting is
    the only one the averaged-iterate theory covers.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")

    Phi = apply_batch(fmap, X)
    p = Phi.shape[1]
    rng = np.random.default_rng(seed)

    if isinstance(init, ZeroInit):
        theta = np.zeros(p)
    elif isinstance(init, ConstantInit):
        theta = np.full(p, float(init.value))
    elif isinstance(init, NearMinNormInit):
        theta = min_norm_fit(Phi, y) + init.noise_sd * rng.standard_normal(p)
    else:
        raise TypeError(f"unsupported init scheme: {init!r}")

    # stability threshold from the sample covariance trace (mean ||phi||^2)
    trace_hat = float(np.sum(Phi**2)) / n
    stability_warning = trace_hat > 0 and schedule.gamma0 > 1.0 / trace_hat

    total = n * epochs
    avg = np.zeros(p)
    traj = [theta.copy()] if keep_trajectory else None
    t = 0
    for epoch in range(epochs):
        order = np.arange(n) if epochs == 1 else rng.permutation(n)
        for idx in order:
            t += 1
            avg += theta
            phi = Phi[idx]
            gamma = schedule.gamma0 * float(t) ** (-schedule.zeta)
            theta = theta + gamma * (y[idx] - phi @ theta) * phi
            norm_sq = theta @ theta
            if not np.isfinite(norm_sq) or norm_sq > _NORM_GUARD**2:
                raise DivergenceError(t, f"SGD diverged at step {t} (||theta|| > {_NORM_GUARD:g})")
            if keep_trajectory:
                traj.append(theta.copy())
    avg /= total
    return SgdOutcome(
        theta_bar=avg,
        theta_last=theta,
        trajectory=np.array(traj) if keep_trajectory else None,
        stability_warning=stability_warning,
    )


def min_norm_fit(Phi: np.ndarray, y: np.ndarray, svd_tol: float = 1e-12) -> np.ndarray:
    """Minimum-norm least-squares solution via SVD.

    Singular values below svd_tol times the largest are treated as zero.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(Phi)) or not np.all(np.isfinite(y)):
        raise ValueError("min_norm_fit requires finite inputs")
    theta, *_ = np.linalg.lstsq(Phi, y, rcond=svd_tol)
    return theta


def test_mse(theta: np.ndarray, fmap: FeatureMap, X_test: np.ndarray, y_test: np.ndarray) -> float:
    """Mean squared error of <theta, phi(x)> against the test labels."""
    pred = apply_batch(fmap, X_test) @ theta
    return float(np.mean((pred - np.asarray(y_test, dtype=np.float64)) ** 2))


def excess_risk(theta_bar: np.ndarray, theta_star: np.ndarray, Sigma_hat: np.ndarray) -> float:
    """Quadratic form <v, Sigma v> with v = theta_bar - theta_star."""
    Sigma_hat = np.asarray(Sigma_hat, dtype=np.float64)
    if np.max(np.abs(Sigma_hat - Sigma_hat.T)) > 1e-10:
        raise ValueError("covariance metric must be symmetric (within 1e-10)")
    v = np.asarray(theta_bar, dtype=np.float64) - np.asarray(theta_star, dtype=np.float64)
    return float(v @ Sigma_hat @ v)
