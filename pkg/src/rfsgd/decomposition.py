"""Six coupled error recursions and Monte Carlo bias/variance estimation.

The centered SGD iterate theta_t - theta* splits into a bias path (driven by
the initial error, no noise) and a variance path (driven by label noise,
zero init). Each has two semi-stochastic companions where the per-sample
rank-one operator is replaced by the sample covariance and then by its
expectation over the projection matrix. Quadratic forms of the averaged
paths give the decomposition terms: B1/V1 isolate data-order randomness,
B2/V2 the projection randomness, and B3/V3 the residual deterministic and
minimally-interacting parts.

Sign convention: the bias paths are initialized at -theta* (rather than the
target itself) so that bias_t + var_t equals theta_t - theta* exactly for a
zero start. All reported quantities are quadratic forms and therefore
insensitive to this sign choice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, gen_inputs, plant_rf_target
from .features import Activation, FeatureMap, apply_batch, build_feature_map
from .optimizer import DivergenceError, StepSchedule
from .spectral import CovarianceSummary, analytic_summary, expected_cov_matvec


@dataclass
class PathAverages:
    """Time averages (over t = 0..n-1) of the six coupled recursions."""

    bias: np.ndarray
    bias_x: np.ndarray
    bias_xw: np.ndarray
    var: np.ndarray
    var_x: np.ndarray
    var_xw: np.ndarray
    bias_trajectory: Optional[np.ndarray] = None  # (n+1, p) when requested
    var_trajectory: Optional[np.ndarray] = None


def _check_metric(name: str, M: np.ndarray, p: int) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (p, p):
        raise ValueError(f"{name} must be {p}x{p}, got {M.shape}")
    if np.max(np.abs(M - M.T)) > 1e-10:
        raise ValueError(f"{name} must be symmetric (within 1e-10)")
    return M


def step_sizes(schedule: StepSchedule, n: int) -> np.ndarray:
    """gamma_t for t = 1..n as an array."""
    return schedule.gamma0 * np.arange(1, n + 1, dtype=np.float64) ** (-schedule.zeta)


def run_paths(
    fmap: FeatureMap,
    Sigma_hat: np.ndarray,
    Sigma_tilde: np.ndarray,
    theta_star: np.ndarray,
    X_ordered: np.ndarray,
    noise: np.ndarray,
    schedule: StepSchedule,
    keep_trajectory: bool = False,
) -> PathAverages:
    """Run all six recursions in one pass with shared order and noise.

    The coupling (same sample stream, same noise realization across the six
    paths) is what isolates each randomness source in the differences.
    Dense reference implementation; the Monte Carlo estimator uses an
    algebraically equivalent reduced form and is tested against this one.
    """
    Phi = apply_batch(fmap, X_ordered)
    n, p = Phi.shape
    Sigma_hat = _check_metric("Sigma_hat", Sigma_hat, p)
    Sigma_tilde = _check_metric("Sigma_tilde", Sigma_tilde, p)
    theta_star = np.asarray(theta_star, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if theta_star.shape != (p,):
        raise ValueError(f"theta_star must have shape ({p},), got {theta_star.shape}")
    if noise.shape != (n,):
        raise ValueError(f"noise must have shape ({n},), got {noise.shape}")

    gammas = step_sizes(schedule, n)
    e_b = -theta_star.copy()
    e_bx = -theta_star.copy()
    e_bxw = -theta_star.copy()
    e_v = np.zeros(p)
    e_vx = np.zeros(p)
    e_vxw = np.zeros(p)
    sums = [np.zeros(p) for _ in range(6)]
    traj_b = [e_b.copy()] if keep_trajectory else None
    traj_v = [e_v.copy()] if keep_trajectory else None

    for t in range(n):
        for acc, state in zip(sums, (e_b, e_bx, e_bxw, e_v, e_vx, e_vxw)):
            acc += state
        g = gammas[t]
        phi = Phi[t]
        eps = noise[t]
        e_b = e_b - g * (phi @ e_b) * phi
        e_bx = e_bx - g * (Sigma_hat @ e_bx)
        e_bxw = e_bxw - g * (Sigma_tilde @ e_bxw)
        e_v = e_v - g * (phi @ e_v) * phi + g * eps * phi
        e_vx = e_vx - g * (Sigma_hat @ e_vx) + g * eps * phi
        e_vxw = e_vxw - g * (Sigma_tilde @ e_vxw) + g * eps * phi
        check = e_b @ e_b + e_bx @ e_bx + e_bxw @ e_bxw + e_v @ e_v + e_vx @ e_vx + e_vxw @ e_vxw
        if not np.isfinite(check):
            raise DivergenceError(t + 1, f"recursion state became non-finite at step {t + 1}")
        if keep_trajectory:
            traj_b.append(e_b.copy())
            traj_v.append(e_v.copy())

    avgs = [s / n for s in sums]
    return PathAverages(
        bias=avgs[0], bias_x=avgs[1], bias_xw=avgs[2],
        var=avgs[3], var_x=avgs[4], var_xw=avgs[5],
        bias_trajectory=np.array(traj_b) if keep_trajectory else None,
        var_trajectory=np.array(traj_v) if keep_trajectory else None,
    )


class _WContext:
    """Per-projection-draw state for the reduced-form recursions.

    The sample covariance acts as V diag(lam) V^T with V from a thin SVD of
    the feature matrix, so the semi-stochastic paths evolve in at most
    min(n, p) coordinates; the expected covariance acts through its closed
    block structure. Both reductions are exact, not approximations.
    """

    def __init__(self, fmap: FeatureMap, X: np.ndarray, fstar: np.ndarray,
                 schedule: StepSchedule, svd_tol: float = 1e-12):
        self.Phi = apply_batch(fmap, X)
        self.n, self.p = self.Phi.shape
        U, S, Vt = np.linalg.svd(self.Phi, full_matrices=False)
        self.V = Vt.T
        self.lam = S**2 / self.n
        self.G = U * S  # row t is V^T phi_t
        self.gammas = step_sizes(schedule, self.n)
        self.summary: CovarianceSummary = analytic_summary(fmap.activation, X, fmap.m)
        # min-norm lift of the clean targets, reusing the SVD
        inv = np.where(S > svd_tol * S.max(), 1.0 / np.where(S > 0, S, 1.0), 0.0)
        self.theta_star = self.V @ ((U.T @ fstar) * inv)
        self.f_train = self.Phi @ self.theta_star

    def quad(self, v: np.ndarray) -> float:
        """Sample-covariance quadratic form <v, Sigma_hat v> = ||Phi v||^2 / n."""
        w = self.Phi @ v
        return float(w @ w) / self.n

    def quad_tilde(self, v: np.ndarray) -> float:
        return float(v @ expected_cov_matvec(self.summary, v))

    def bias_x_bar(self) -> np.ndarray:
        """Average of the covariance-driven bias path; order independent."""
        c = self.V.T @ (-self.theta_star)
        w_perp = -self.theta_star - self.V @ c
        csum = np.zeros_like(c)
        for g in self.gammas:
            csum += c
            c = c * (1.0 - g * self.lam)
        return self.V @ (csum / self.n) + w_perp

    def bias_xw_bar(self) -> np.ndarray:
        """Average of the expected-covariance bias path; fully deterministic."""
        e = -self.theta_star.copy()
        acc = np.zeros(self.p)
        for g in self.gammas:
            acc += e
            e = e - g * expected_cov_matvec(self.summary, e)
        return acc / self.n

    def bias_bar(self, perm: np.ndarray) -> np.ndarray:
        """Average of the rank-one bias path along the given sample order."""
        e = -self.theta_star.copy()
        acc = np.zeros(self.p)
        for t, idx in enumerate(perm):
            acc += e
            phi = self.Phi[idx]
            e = e - self.gammas[t] * (phi @ e) * phi
        if not np.isfinite(e @ e):
            raise DivergenceError(self.n, "bias path became non-finite")
        return acc / self.n

    def variance_bars(self, perm: np.ndarray, eps: np.ndarray):
        """Averages of the three noise-driven paths for one (order, noise) cell."""
        n, p = self.n, self.p
        e_v = np.zeros(p)
        e_vxw = np.zeros(p)
        c_vx = np.zeros(len(self.lam))
        acc_v = np.zeros(p)
        acc_vxw = np.zeros(p)
        acc_c = np.zeros(len(self.lam))
        for t, idx in enumerate(perm):
            acc_v += e_v
            acc_vxw += e_vxw
            acc_c += c_vx
            g = self.gammas[t]
            phi = self.Phi[idx]
            ge = g * eps[idx]
            e_v = e_v - g * (phi @ e_v) * phi + ge * phi
            e_vxw = e_vxw - g * expected_cov_matvec(self.summary, e_vxw) + ge * phi
            c_vx = c_vx * (1.0 - g * self.lam) + ge * self.G[idx]
        if not np.isfinite(e_v @ e_v + e_vxw @ e_vxw):
            raise DivergenceError(n, "variance path became non-finite")
        return acc_v / n, self.V @ (acc_c / n), acc_vxw / n

    def sgd_bar(self, perm: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Average iterate of the actual zero-init SGD run on y = f* + eps."""
        theta = np.zeros(self.p)
        acc = np.zeros(self.p)
        for t, idx in enumerate(perm):
            acc += theta
            phi = self.Phi[idx]
            y_t = self.f_train[idx] + eps[idx]
            theta = theta + self.gammas[t] * (y_t - phi @ theta) * phi
        if not np.isfinite(theta @ theta):
            raise DivergenceError(self.n, "SGD path became non-finite")
        return acc / self.n


@dataclass(frozen=True)
class DecompositionReport:
    """Monte Carlo estimates of the decomposition terms with standard errors."""

    b1: float
    b2: float
    b3: float
    v1: float
    v2: float
    v3: float
    bias: float
    variance: float
    excess: float
    stderr: Mapping[str, float]
    counts: Tuple[int, int, int]  # (n_w, n_noise, n_order)


def _mean_se(samples) -> Tuple[float, float]:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def estimate_terms(
    dataset: Dataset,
    map_factory: Callable[[int], FeatureMap],
    schedule: StepSchedule,
    mc: Tuple[int, int, int],
    seed: int = 0,
    risk_metric: Optional[np.ndarray] = None,
) -> DecompositionReport:
    """Estimate B1..B3, V1..V3, Bias, Variance, and excess risk.

    Outer Monte Carlo draws the projection matrix through map_factory; per
    draw, inner Monte Carlo runs over sample orders and synthetic noise
    vectors eps ~ N(0, noise_sd^2) placed on the clean targets. Noise draws
    come in antithetic pairs (eps, -eps): the variance paths are odd in eps,
    so their quadratic forms coincide within a pair, while the pairing
    cancels the bias/variance cross term in the excess risk exactly.

    Quadratic forms use the per-draw sample covariance except B3, which is
    measured in the expected-covariance metric. theta* is the minimum-norm
    lift of the clean targets; when the dataset records no clean targets the
    labels are used as-is.
    """
    n_w, n_noise, n_order = mc
    if n_w < 1 or n_noise < 1 or n_order < 1:
        raise ValueError(f"mc counts must all be >= 1, got {mc}")
    fstar = dataset.fstar if dataset.fstar is not None else dataset.y
    root = np.random.SeedSequence(seed)
    map_ss, noise_ss, order_ss = root.spawn(3)
    w_seeds = map_ss.generate_state(n_w)
    noise_rng = np.random.default_rng(noise_ss)
    order_rng = np.random.default_rng(order_ss)

    n = dataset.n
    samples: dict = {k: [] for k in ("b1", "b2", "b3", "v1", "v2", "v3", "bias", "variance", "excess")}
    risk = None

    for w_seed in w_seeds:
        fmap = map_factory(int(w_seed))
        ctx = _WContext(fmap, dataset.X, fstar, schedule)
        if risk_metric is not None:
            risk = _check_metric("risk_metric", risk_metric, ctx.p)
        bx_bar = ctx.bias_x_bar()
        bxw_bar = ctx.bias_xw_bar()
        samples["b2"].append(ctx.quad(bx_bar - bxw_bar))
        samples["b3"].append(ctx.quad_tilde(bxw_bar))

        for _ in range(n_order):
            perm = np.arange(n) if n_order == 1 else order_rng.permutation(n)
            b_bar = ctx.bias_bar(perm)
            samples["b1"].append(ctx.quad(b_bar - bx_bar))
            samples["bias"].append(ctx.quad(b_bar))

            pairs, leftover = divmod(n_noise, 2)
            for k in range(pairs + leftover):
                eps = dataset.noise_sd * noise_rng.standard_normal(n)
                v_bar, vx_bar, vxw_bar = ctx.variance_bars(perm, eps)
                samples["v1"].append(ctx.quad(v_bar - vx_bar))
                samples["v2"].append(ctx.quad(vx_bar - vxw_bar))
                samples["v3"].append(ctx.quad(vxw_bar))
                samples["variance"].append(ctx.quad(v_bar))

                def _excess(e):
                    dev = ctx.sgd_bar(perm, e) - ctx.theta_star
                    return float(dev @ risk @ dev) if risk is not None else ctx.quad(dev)

                if k < pairs:
                    samples["excess"].append((_excess(eps) + _excess(-eps)) / 2.0)
                else:
                    samples["excess"].append(_excess(eps))

    means, stderr = {}, {}
    for key, vals in samples.items():
        means[key], stderr[key] = _mean_se(vals)
    return DecompositionReport(
        b1=means["b1"], b2=means["b2"], b3=means["b3"],
        v1=means["v1"], v2=means["v2"], v3=means["v3"],
        bias=means["bias"], variance=means["variance"], excess=means["excess"],
        stderr=stderr, counts=(n_w, n_noise, n_order),
    )


@dataclass(frozen=True)
class BiasRatePoint:
    n: int
    bias: float
    stderr: float


@dataclass(frozen=True)
class BiasRateResult:
    slope: float
    intercept: float
    points: Tuple[BiasRatePoint, ...]
    dropped: Tuple[int, ...]


def rate_probe_bias(
    n_grid: Sequence[int],
    zeta: float,
    ratio: float = 2.0,
    gamma0: float = 1.0,
    d: Optional[int] = None,
    d_over_n: float = 0.25,
    activation: Activation = Activation.RELU,
    target_norm: float = 1.0,
    reps: int = 6,
    seed: int = 0,
) -> BiasRateResult:
    """Fit the log-log decay rate of the bias term along an n grid.

    Holds m/n fixed, plants a coefficient vector of the given norm in each
    fresh feature map, and measures the bias quadratic form of the averaged
    rank-one path. The input dimension is fixed at d unless d is None, in
    which case it scales as d_over_n * n. Non-positive bias estimates cannot
    be log-fitted and are dropped (recorded in the result).
    """
    n_grid = sorted(int(v) for v in n_grid)
    if len(n_grid) < 4:
        raise ValueError(f"n_grid needs at least 4 points, got {len(n_grid)}")
    if n_grid[-1] < 8 * n_grid[0]:
        raise ValueError("n_grid must span at least a factor of 8")
    schedule_proto = StepSchedule(gamma0=gamma0, zeta=zeta)
    root = np.random.SeedSequence(seed)

    points, dropped = [], []
    for n, ss in zip(n_grid, root.spawn(len(n_grid))):
        m = max(1, int(round(ratio * n)))
        d_n = d if d is not None else max(2, int(round(d_over_n * n)))
        vals = []
        for rep_ss in ss.spawn(reps):
            s_data, s_map, s_target = rep_ss.generate_state(3)
            X = gen_inputs(int(s_data), n, d_n)
            fmap = build_feature_map(int(s_map), m, d_n, activation)
            theta_star, _ = plant_rf_target(fmap, int(s_target), target_norm, X)
            Phi = apply_batch(fmap, X)
            gammas = step_sizes(schedule_proto, n)
            e = -theta_star.copy()
            acc = np.zeros_like(e)
            for t in range(n):
                acc += e
                phi = Phi[t]
                e = e - gammas[t] * (phi @ e) * phi
            bar = acc / n
            w = Phi @ bar
            vals.append(float(w @ w) / n)
        mean, se = _mean_se(vals)
        if mean <= 0:
            dropped.append(n)
        else:
            points.append(BiasRatePoint(n=n, bias=mean, stderr=se))

    if len(points) < 2:
        raise ValueError("fewer than two positive bias estimates; cannot fit a slope")
    logn = np.log([p.n for p in points])
    logb = np.log([p.bias for p in points])
    slope, intercept = np.polyfit(logn, logb, 1)
    return BiasRateResult(
        slope=float(slope), intercept=float(intercept),
        points=tuple(points), dropped=tuple(dropped),
    )


@dataclass(frozen=True)
class ShapeProbeResult:
    ratios: Tuple[float, ...]
    m_values: Tuple[int, ...]
    reports: Tuple[DecompositionReport, ...]


def shape_probe_variance(
    dataset: Dataset,
    ratio_grid: Sequence[float],
    schedule: StepSchedule,
    mc: Tuple[int, int, int],
    seed: int = 0,
    activation: Activation = Activation.COS_SIN,
) -> ShapeProbeResult:
    """Tabulate the decomposition terms along an m/n ratio grid.

    The ratio counts projection rows (cos/sin pairs for the Gaussian-kernel
    map), so the interpolation threshold sits at 1/output_multiplicity. The
    grid must straddle it.
    """
    ratios = sorted(float(r) for r in ratio_grid)
    threshold = 1.0 / Activation(activation).output_multiplicity
    if not (ratios[0] < threshold and ratios[-1] > threshold):
        raise ValueError(
            f"ratio grid {ratios} must span the interpolation threshold {threshold}"
        )
    n, d = dataset.n, dataset.d
    root = np.random.SeedSequence(seed)
    reports, m_values = [], []
    for ratio, ss in zip(ratios, root.spawn(len(ratios))):
        m = max(1, int(round(ratio * n)))
        m_values.append(m)
        factory = lambda s, _m=m: build_feature_map(s, _m, d, activation)
        reports.append(
            estimate_terms(dataset, factory, schedule, mc, seed=int(ss.generate_state(1)[0]))
        )
    return ShapeProbeResult(ratios=tuple(ratios), m_values=tuple(m_values), reports=tuple(reports))


def trend_violation(values, stderrs, direction: str, z: float = 2.0) -> float:
    """Worst slack-adjusted violation of a monotone trend across index pairs.

    For each ordered pair the raw violation (an increase when expecting
    non-increasing, a decrease otherwise) is reduced by z times the combined
    standard error; the maximum over pairs is returned, so a value <= 0
    means the trend holds within Monte Carlo noise.
    """
    if direction not in ("non_increasing", "non_decreasing"):
        raise ValueError(f"unknown direction {direction!r}")
    v = np.asarray(values, dtype=np.float64)
    se = np.asarray(stderrs, dtype=np.float64)
    worst = -np.inf
    for i in range(len(v)):
        for j in range(i + 1, len(v)):
            diff = v[j] - v[i] if direction == "non_increasing" else v[i] - v[j]
            worst = max(worst, diff - z * float(np.hypot(se[i], se[j])))
    return float(worst)
