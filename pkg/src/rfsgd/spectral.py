"""Sample and expected covariance of random feature vectors.

The expectation over the Gaussian projection matrix gives a covariance with
constant diagonal a and constant off-diagonal b, hence exactly two distinct
eigenvalues: a + (m-1)b with multiplicity 1 and a - b with multiplicity m-1.
The cos/sin map instead yields a block-diagonal expected covariance with
three distinct eigenvalues. Entries are one-dimensional Gaussian integrals
of the activation, evaluated in closed form where available and by
Gauss-Hermite quadrature otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from . import hermite
from .features import Activation, FeatureMap, apply_batch, build_feature_map


@dataclass(frozen=True)
class SingleOutput:
    """Structure tag for single-output activations: (a-b) I + b 11^T."""

    m: int


@dataclass(frozen=True)
class GaussBlocks:
    """Cos/sin block structure: S1 (a1 diag, b1 off-diag) direct-sum S2 (a2 I)."""

    m: int
    a1: float
    b1: float
    a2: float


@dataclass(frozen=True)
class CovarianceSummary:
    """Entries and exact eigenstructure of the expected covariance."""

    a: float  # common diagonal entry (S1 diagonal for cos/sin)
    b: float  # common off-diagonal entry (S1 off-diagonal for cos/sin)
    structure: Union[SingleOutput, GaussBlocks]
    eigenvalues: Tuple[Tuple[float, int], ...]  # (value, multiplicity)
    trace: float
    degenerate: bool = False

    @property
    def feature_dim(self) -> int:
        if isinstance(self.structure, GaussBlocks):
            return 2 * self.structure.m
        return self.structure.m


def _single_output_summary(a: float, b: float, m: int) -> CovarianceSummary:
    lam1 = a + (m - 1) * b
    lam2 = a - b
    eigs = [(lam1, 1)]
    if m > 1:
        eigs.append((lam2, m - 1))
    degenerate = min(v for v, _ in eigs) <= 0.0
    return CovarianceSummary(
        a=a, b=b, structure=SingleOutput(m), eigenvalues=tuple(eigs),
        trace=m * a, degenerate=degenerate,
    )


def _gauss_blocks_summary(a1: float, b1: float, a2: float, m: int) -> CovarianceSummary:
    lam1 = a1 + (m - 1) * b1
    lam2 = a2
    lam3 = a1 - b1
    eigs = [(lam1, 1), (lam2, m)]
    if m > 1:
        eigs.append((lam3, m - 1))
    degenerate = min(v for v, _ in eigs) <= 0.0
    return CovarianceSummary(
        a=a1, b=b1, structure=GaussBlocks(m, a1, b1, a2), eigenvalues=tuple(eigs),
        trace=m * (a1 + a2), degenerate=degenerate,
    )


def sample_cov(fmap: FeatureMap, X: np.ndarray) -> np.ndarray:
    """Sample covariance (1/n) sum_i phi(x_i) phi(x_i)^T, symmetric PSD."""
    Phi = apply_batch(fmap, X)
    if Phi.shape[0] < 1:
        raise ValueError("sample covariance needs at least one row")
    C = Phi.T @ Phi / Phi.shape[0]
    return (C + C.T) / 2.0


_SIGMA_FNS: dict = {
    Activation.RELU: (lambda z: np.maximum(z, 0.0), True),
    Activation.IDENTITY: (lambda z: z, False),
}


def expected_cov_quadrature(
    activation: Union[Activation, Callable],
    X_sample: np.ndarray,
    m: int,
    quad_order: int = 64,
    split_at_zero: Optional[bool] = None,
) -> CovarianceSummary:
    """Expected covariance entries via Gauss-Hermite quadrature.

    The inner Gaussian expectation per data point reduces to a
    one-dimensional integral with scale ||x||/sqrt(d); the outer expectation
    over x is the empirical average over the rows of X_sample. Activations
    with a kink at zero (ReLU) are integrated on each half-line separately
    with half the node budget per side; pass split_at_zero to override the
    default for a custom callable.
    """
    if quad_order < 2:
        raise ValueError(f"quad_order must be >= 2, got {quad_order}")
    X_sample = np.asarray(X_sample, dtype=np.float64)
    n, d = X_sample.shape
    scales = np.linalg.norm(X_sample, axis=1) / np.sqrt(d)

    if activation is Activation.COS_SIN:
        cos1, cos2 = hermite.gaussian_moments(np.cos, scales, quad_order)
        _, sin2 = hermite.gaussian_moments(np.sin, scales, quad_order)
        a1 = float(np.mean(cos2)) / m
        b1 = float(np.mean(cos1**2)) / m
        a2 = float(np.mean(sin2)) / m
        return _gauss_blocks_summary(a1, b1, a2, m)

    if isinstance(activation, Activation):
        sigma_fn, default_split = _SIGMA_FNS[activation]
    else:
        sigma_fn, default_split = activation, False
    split = default_split if split_at_zero is None else split_at_zero
    first, second = hermite.gaussian_moments(sigma_fn, scales, quad_order, split_at_zero=split)
    a = float(np.mean(second)) / m
    b = float(np.mean(first**2)) / m
    return _single_output_summary(a, b, m)


def expected_cov_relu(trace_ratio: float, m: int) -> CovarianceSummary:
    """Closed form for ReLU from the rectified-Gaussian moments.

    trace_ratio is Tr(Sigma_d)/d; the entries are a = trace_ratio/(2m) and
    b = trace_ratio/(2 m pi).
    """
    if trace_ratio <= 0:
        raise ValueError(f"trace_ratio must be positive, got {trace_ratio}")
    a = trace_ratio / (2.0 * m)
    b = trace_ratio / (2.0 * m * np.pi)
    return _single_output_summary(a, b, m)


def expected_cov_identity(trace_ratio: float, m: int) -> CovarianceSummary:
    """Closed form for the identity activation: a = trace_ratio/m, b = 0."""
    if trace_ratio <= 0:
        raise ValueError(f"trace_ratio must be positive, got {trace_ratio}")
    return _single_output_summary(trace_ratio / m, 0.0, m)


def expected_cov_gauss(X_sample: np.ndarray, m: int) -> CovarianceSummary:
    """Closed form for the cos/sin map, averaging exp(-theta) over the sample.

    With theta = ||x||^2/d the cosine block has diagonal
    (1/2m) E[1 + exp(-2 theta)] and off-diagonal (1/m) E[exp(-theta)]; the
    sine block is diagonal with entries (1/2m) E[1 - exp(-2 theta)].
    """
    X_sample = np.asarray(X_sample, dtype=np.float64)
    if X_sample.shape[0] < 1:
        raise ValueError("need at least one sample row")
    theta = np.sum(X_sample**2, axis=1) / X_sample.shape[1]
    e1 = float(np.mean(np.exp(-theta)))
    e2 = float(np.mean(np.exp(-2.0 * theta)))
    a1 = (1.0 + e2) / (2.0 * m)
    b1 = e1 / m
    a2 = (1.0 - e2) / (2.0 * m)
    return _gauss_blocks_summary(a1, b1, a2, m)


def analytic_summary(
    activation: Activation, X_sample: np.ndarray, m: int, quad_order: int = 64
) -> CovarianceSummary:
    """Expected covariance via the closed form for the activation, else quadrature."""
    X_sample = np.asarray(X_sample, dtype=np.float64)
    if activation is Activation.COS_SIN:
        return expected_cov_gauss(X_sample, m)
    trace_ratio = float(np.mean(np.sum(X_sample**2, axis=1))) / X_sample.shape[1]
    if activation is Activation.RELU:
        return expected_cov_relu(trace_ratio, m)
    if activation is Activation.IDENTITY:
        return expected_cov_identity(trace_ratio, m)
    return expected_cov_quadrature(activation, X_sample, m, quad_order)


def assemble_expected_cov(summary: CovarianceSummary, m: Optional[int] = None) -> np.ndarray:
    """Materialize the expected covariance as a dense p x p matrix."""
    s = summary.structure
    if m is not None and m != s.m:
        raise ValueError(f"m mismatch: summary has {s.m}, caller passed {m}")
    if isinstance(s, GaussBlocks):
        p = 2 * s.m
        out = np.zeros((p, p))
        S1 = np.full((s.m, s.m), s.b1)
        np.fill_diagonal(S1, s.a1)
        out[: s.m, : s.m] = S1
        out[s.m :, s.m :] = np.eye(s.m) * s.a2
        return out
    out = np.full((s.m, s.m), summary.b)
    np.fill_diagonal(out, summary.a)
    return out


def expected_cov_matvec(summary: CovarianceSummary, v: np.ndarray) -> np.ndarray:
    """Apply the expected covariance to a vector without materializing it."""
    s = summary.structure
    if isinstance(s, GaussBlocks):
        out = np.empty_like(v)
        head, tail = v[: s.m], v[s.m :]
        out[: s.m] = (s.a1 - s.b1) * head + s.b1 * head.sum()
        out[s.m :] = s.a2 * tail
        return out
    return (summary.a - summary.b) * v + summary.b * v.sum()


@dataclass(frozen=True)
class TraceConcentration:
    """Spread of Tr(sample covariance) across independent projection draws."""

    mean: float
    sd: float
    max_over_mean: float
    traces: Tuple[float, ...]


def trace_concentration(
    activation: Activation, X: np.ndarray, m: int, seeds: Sequence[int]
) -> TraceConcentration:
    """Empirical concentration check for the covariance trace.

    Samples Tr(sample_cov) across the given W seeds. A tight spread is the
    observable counterpart of the trace being sub-exponential with O(1)
    norm; this is a diagnostic, not a proof.
    """
    if len(seeds) < 30:
        raise ValueError(f"need at least 30 seeds for a meaningful spread, got {len(seeds)}")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    traces = []
    for seed in seeds:
        fmap = build_feature_map(int(seed), m, d, activation)
        Phi = apply_batch(fmap, X)
        traces.append(float(np.sum(Phi**2)) / n)
    traces = np.array(traces)
    mean = float(traces.mean())
    return TraceConcentration(
        mean=mean,
        sd=float(traces.std(ddof=1)),
        max_over_mean=float(traces.max() / mean) if mean > 0 else float("nan"),
        traces=tuple(traces),
    )


@dataclass(frozen=True)
class FourthMomentDiagnostic:
    """Empirical stand-ins for the fourth-moment operator bounds."""

    trace_ratio: float  # Tr[expected_cov^{-1} avg_W(sample_cov^2)]
    min_margin_eigenvalue: float  # min eig of r Tr(E) E - avg_W(sample_cov^2)
    r: float
    n_draws: int


def fourth_moment_diagnostic(
    activation: Activation,
    X: np.ndarray,
    m: int,
    seeds: Sequence[int],
    r: Optional[float] = None,
) -> FourthMomentDiagnostic:
    """Average sample_cov^2 over W draws and compare against the expected cov.

    trace_ratio should stay O(1) as m grows at fixed m/d; the margin
    eigenvalue is reported without asserting a threshold since the theory
    fixes no concrete constant.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    summary = analytic_summary(activation, X, m)
    E = assemble_expected_cov(summary)
    p = E.shape[0]
    avg_sq = np.zeros((p, p))
    for seed in seeds:
        fmap = build_feature_map(int(seed), m, d, activation)
        C = sample_cov(fmap, X)
        avg_sq += C @ C
    avg_sq /= len(seeds)
    r_used = (1.0 + 1.0 / m) if r is None else float(r)
    trace_ratio = float(np.trace(np.linalg.solve(E, avg_sq)))
    margin = r_used * summary.trace * E - avg_sq
    min_eig = float(np.linalg.eigvalsh((margin + margin.T) / 2.0).min())
    return FourthMomentDiagnostic(
        trace_ratio=trace_ratio, min_margin_eigenvalue=min_eig, r=r_used, n_draws=len(seeds)
    )
