"""Random feature maps of the form phi(x) = sigma(W x / sqrt(d)) / sqrt(m).

W is drawn once with i.i.d. standard normal entries and then frozen; the
1/sqrt(d) input scaling is applied at evaluation time so W itself keeps
exactly unit-variance entries regardless of the data dimension.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Activation(enum.Enum):
    """Activation families applied componentwise to the random projections.

    COS_SIN emits two coordinates per projection row (cosines first, then
    sines), so it doubles the output dimension; the output scale stays
    1/sqrt(m) for every family.
    """

    RELU = "relu"
    IDENTITY = "identity"
    COS_SIN = "cos_sin"

    @property
    def output_multiplicity(self) -> int:
        return 2 if self is Activation.COS_SIN else 1


@dataclass(frozen=True)
class FeatureMap:
    """Frozen Gaussian projection W (shape m x d) plus an activation."""

    W: np.ndarray
    activation: Activation
    m: int
    d: int
    seed: int

    @property
    def feature_dim(self) -> int:
        """Output dimension p = m * output_multiplicity."""
        return self.m * self.activation.output_multiplicity


def build_feature_map(seed: int, m: int, d: int, activation: Activation) -> FeatureMap:
    """Draw W ~ N(0,1)^{m x d} from a seeded generator and freeze it."""
    if m < 1:
        raise ValueError(f"feature count m must be >= 1, got {m}")
    if d < 1:
        raise ValueError(f"input dimension d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((m, d))
    W.setflags(write=False)
    return FeatureMap(W=W, activation=Activation(activation), m=m, d=d, seed=seed)


def _activate(fmap: FeatureMap, Z: np.ndarray) -> np.ndarray:
    """Map raw projections Z (..., m) to features (..., p), scaled by 1/sqrt(m)."""
    scale = 1.0 / np.sqrt(fmap.m)
    if fmap.activation is Activation.RELU:
        return np.maximum(Z, 0.0) * scale
    if fmap.activation is Activation.IDENTITY:
        return Z * scale
    # cosines occupy the first m coordinates, sines the last m
    return np.concatenate([np.cos(Z), np.sin(Z)], axis=-1) * scale


def apply(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    """Evaluate phi(x) for a single input vector of length d."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (fmap.d,):
        raise ValueError(f"expected input of shape ({fmap.d},), got {x.shape}")
    z = fmap.W @ x / np.sqrt(fmap.d)
    return _activate(fmap, z)


def apply_batch(fmap: FeatureMap, X: np.ndarray) -> np.ndarray:
    """Evaluate phi row-wise on an n x d matrix, returning n x p."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fmap.d:
        raise ValueError(f"expected matrix of shape (n, {fmap.d}), got {X.shape}")
    if X.shape[0] == 0:
        return np.empty((0, fmap.feature_dim))
    Z = X @ fmap.W.T / np.sqrt(fmap.d)
    return _activate(fmap, Z)
