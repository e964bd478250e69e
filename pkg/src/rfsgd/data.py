"""Synthetic dataset generators and IDX binary ingestion.

Synthetic inputs follow the correlated-features model x = Sigma_d^{1/2} t
with i.i.d. standard normal t, so the identity covariance recovers plain
Gaussian data. Targets come either from a Laplace-kernel expansion over the
training points or from a coefficient vector planted in a given feature map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .features import FeatureMap, apply_batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class IdentityCov:
    """Sigma_d = I."""


@dataclass(frozen=True)
class DiagonalPowerLaw:
    """Sigma_d = diag(j^-exponent), j = 1..d; exponent 0 recovers identity."""

    exponent: float

    def __post_init__(self):
        if self.exponent < 0:
            raise ValueError(f"power-law exponent must be >= 0, got {self.exponent}")


@dataclass(frozen=True)
class ExplicitCov:
    """Sigma_d given as an explicit symmetric PSD matrix."""

    matrix: np.ndarray


CovSpec = Union[IdentityCov, DiagonalPowerLaw, ExplicitCov]


@dataclass(frozen=True)
class Dataset:
    """Design matrix, labels, and (when known) clean targets fstar."""

    X: np.ndarray
    y: np.ndarray
    fstar: Optional[np.ndarray]
    noise_sd: float
    provenance: str  # synthetic-linear | synthetic-laplace | idx-binary

    def __post_init__(self):
        n, d = self.X.shape
        if n < 1 or d < 1:
            raise ValueError(f"dataset needs n >= 1 and d >= 1, got shape {self.X.shape}")
        if self.y.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {self.y.shape}")
        if self.fstar is not None and self.fstar.shape != (n,):
            raise ValueError(f"fstar must have shape ({n},), got {self.fstar.shape}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _cov_sqrt(cov: CovSpec, d: int) -> Optional[np.ndarray]:
    """Return Sigma_d^{1/2} as a vector (diagonal) or matrix; None for identity."""
    if isinstance(cov, IdentityCov):
        return None
    if isinstance(cov, DiagonalPowerLaw):
        return np.arange(1, d + 1, dtype=np.float64) ** (-cov.exponent / 2.0)
    if isinstance(cov, ExplicitCov):
        S = np.asarray(cov.matrix, dtype=np.float64)
        if S.shape != (d, d):
            raise ValueError(f"explicit covariance must be {d}x{d}, got {S.shape}")
        if not np.allclose(S, S.T, atol=1e-10):
            raise ValueError("explicit covariance is not symmetric")
        vals, vecs = np.linalg.eigh(S)
        if vals.min() < -1e-10 * max(1.0, vals.max()):
            raise ValueError(f"explicit covariance is not PSD (min eigenvalue {vals.min():.3e})")
        return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    raise TypeError(f"unsupported covariance spec: {cov!r}")


def gen_inputs(seed: int, n: int, d: int, cov: CovSpec = IdentityCov()) -> np.ndarray:
    """Draw n rows x = Sigma_d^{1/2} t with t i.i.d. standard normal."""
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((n, d))
    root = _cov_sqrt(cov, d)
    if root is None:
        return T
    if root.ndim == 1:
        return T * root
    return T @ root


def laplace_kernel(A: np.ndarray, B: np.ndarray, bandwidth: float) -> np.ndarray:
    """k(a, b) = exp(-||a - b||_2 / bandwidth), as a len(A) x len(B) matrix."""
    sq = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    return np.exp(-dist / bandwidth)


def gen_target_laplace(
    seed: int,
    X_train: np.ndarray,
    X_eval: np.ndarray,
    bandwidth: float,
    noise_sd: float,
):
    """Target f*(x) = sum_j k(x, x_j) w_j with standard Gaussian weights w.

    Returns (fstar_train, fstar_eval, y_train) where y_train adds centered
    Gaussian noise of the given standard deviation to the clean targets.
    The conventional bandwidth is d itself.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_eval = np.asarray(X_eval, dtype=np.float64)
    if X_train.shape[0] == 0:
        raise ValueError("X_train must contain at least one point")
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(X_train.shape[0])
    fstar_train = laplace_kernel(X_train, X_train, bandwidth) @ w
    fstar_eval = laplace_kernel(X_eval, X_train, bandwidth) @ w
    y_train = fstar_train + noise_sd * rng.standard_normal(len(fstar_train))
    return fstar_train, fstar_eval, y_train


def plant_rf_target(fmap: FeatureMap, seed: int, target_norm: float, X: np.ndarray):
    """Plant theta* with ||theta*|| = target_norm; returns (theta_star, fstar)."""
    if target_norm <= 0:
        raise ValueError(f"target_norm must be positive, got {target_norm}")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(fmap.feature_dim)
    theta *= target_norm / np.linalg.norm(theta)
    fstar = apply_batch(fmap, X) @ theta
    return theta, fstar


class IdxFormatError(ValueError):
    """Raised when an IDX file violates the binary format contract."""


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into a uint8 array of shape (n, rows, cols)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: header truncated at offset {len(raw)} (need 16 bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(
            f"{path}: payload truncated, expected {expected} bytes, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a uint8 vector of length n."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: header truncated at offset {len(raw)} (need 8 bytes)")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
        )
    if len(raw) != 8 + n:
        raise IdxFormatError(f"{path}: payload truncated, expected {8 + n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx_images(images: np.ndarray, path) -> None:
    """Write a uint8 (n, rows, cols) array in IDX image format, bit-exact."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    """Write a uint8 label vector in IDX label format."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _flatten_pixels(images: np.ndarray, sel: np.ndarray, scale_pixels: bool) -> np.ndarray:
    width = int(np.prod(images.shape[1:]))
    X = images[sel].reshape(len(sel), width).astype(np.float64)
    if scale_pixels:
        X /= 255.0
    return X


def binary_digit_split(
    images: np.ndarray,
    labels: np.ndarray,
    digit_a: int,
    digit_b: int,
    n_per_class: int,
    seed: int,
    noise_sd: float,
    scale_pixels: bool = True,
):
    """Training Dataset plus the remaining samples of the two digits.

    Returns (train, X_rest, y_rest) where the remainder carries the clean
    {-1, +1} labels and serves as the test set.
    """
    if len(images) != len(labels):
        raise ValueError(f"images/labels count mismatch: {len(images)} vs {len(labels)}")
    idx_a = np.flatnonzero(labels == digit_a)
    idx_b = np.flatnonzero(labels == digit_b)
    if len(idx_a) < n_per_class or len(idx_b) < n_per_class:
        raise ValueError(
            f"need {n_per_class} samples per class, found {len(idx_a)} of digit "
            f"{digit_a} and {len(idx_b)} of digit {digit_b}"
        )
    rng = np.random.default_rng(seed)
    pick_a = rng.choice(idx_a, size=n_per_class, replace=False)
    pick_b = rng.choice(idx_b, size=n_per_class, replace=False)
    sel = np.concatenate([pick_a, pick_b])
    sel = sel[rng.permutation(len(sel))]

    X = _flatten_pixels(images, sel, scale_pixels)
    y = np.where(labels[sel] == digit_a, 1.0, -1.0)
    eps = noise_sd * rng.standard_normal(len(sel))
    train = Dataset(X=X, y=y, fstar=y - eps, noise_sd=noise_sd, provenance="idx-binary")

    rest = np.setdiff1d(np.concatenate([idx_a, idx_b]), sel)
    X_rest = _flatten_pixels(images, rest, scale_pixels)
    y_rest = np.where(labels[rest] == digit_a, 1.0, -1.0)
    return train, X_rest, y_rest


def make_binary_digit_dataset(
    images: np.ndarray,
    labels: np.ndarray,
    digit_a: int,
    digit_b: int,
    n_per_class: int,
    seed: int,
    noise_sd: float,
    scale_pixels: bool = True,
) -> Dataset:
    """Build a two-class regression dataset with labels in {-1, +1}.

    Synthetic label noise eps ~ N(0, noise_sd^2) is drawn and the clean
    target recorded as fstar = y - eps, which is what makes bias/variance
    estimation possible on real data. Pixels are scaled to [0, 1] unless
    scale_pixels is disabled.
    """
    train, _, _ = binary_digit_split(
        images, labels, digit_a, digit_b, n_per_class, seed, noise_sd, scale_pixels
    )
    return train
