"""Configuration-driven experiment sweeps with CSV tables and SVG figures.

A sweep runs one cell per (m, schedule, repetition). Cell seeds are derived
from the base seed and the cell coordinates, so any single row can be
regenerated in isolation. Failed cells (divergent SGD) are marked rather
than aborting the sweep.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .data import (
    Dataset,
    DiagonalPowerLaw,
    IdentityCov,
    binary_digit_split,
    gen_inputs,
    gen_target_laplace,
    load_idx_images,
    load_idx_labels,
    plant_rf_target,
)
from .decomposition import estimate_terms
from .features import Activation, apply_batch, build_feature_map
from .optimizer import (
    ConstantInit,
    DivergenceError,
    NearMinNormInit,
    StepSchedule,
    ZeroInit,
    min_norm_fit,
    sgd_average,
    test_mse,
)


class ConfigError(ValueError):
    """Configuration file violates the sweep schema."""


@dataclass(frozen=True)
class SyntheticSource:
    cov: Union[IdentityCov, DiagonalPowerLaw]
    target: str  # laplace | planted
    target_norm: float
    bandwidth: Optional[float]  # None means d
    noise_sd: float
    n_test: int


@dataclass(frozen=True)
class IdxSource:
    images_path: str
    labels_path: str
    digit_a: int
    digit_b: int
    n_per_class: int
    noise_sd: float
    scale_pixels: bool


@dataclass(frozen=True)
class SvgSpec:
    metric: str
    path: str
    logy: bool


@dataclass(frozen=True)
class SweepSpec:
    data_source: Union[SyntheticSource, IdxSource]
    activation: Activation
    m_grid: Tuple[int, ...]
    n: int
    d: int
    schedules: Tuple[StepSchedule, ...]
    epochs: int
    init_kind: str  # zero | constant | near_min_norm
    init_value: float
    repetitions: int
    mc: Optional[Tuple[int, int, int]]
    seed_base: int
    csv_path: Optional[str]
    svg_specs: Tuple[SvgSpec, ...]


@dataclass(frozen=True)
class SweepRow:
    """One sweep cell. ratio is m/n with m counting projection rows."""

    ratio: float
    m: int
    n: int
    d: int
    zeta: float
    gamma0: float
    seed: int
    test_mse_sgd: float
    test_mse_minnorm: float
    train_mse_minnorm: float
    B1: float
    B2: float
    B3: float
    V1: float
    V2: float
    V3: float
    bias: float
    variance: float
    excess: float
    stability_warning: bool
    p: int
    n_test: int


CSV_HEADER_V1 = (
    "ratio,m,n,d,zeta,gamma0,seed,test_mse_sgd,test_mse_minnorm,train_mse_minnorm,"
    "B1,B2,B3,V1,V2,V3,bias,variance,excess,stability_warning,p,n_test"
)

_NUMERIC_METRICS = (
    "test_mse_sgd",
    "test_mse_minnorm",
    "train_mse_minnorm",
    "B1",
    "B2",
    "B3",
    "V1",
    "V2",
    "V3",
    "bias",
    "variance",
    "excess",
)


def _require_keys(section: dict, allowed: dict, context: str) -> dict:
    """Reject unknown keys and fill defaults; `allowed` maps key -> default.

    A default of ... marks a required key.
    """
    if not isinstance(section, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(section).__name__}")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{context}.{key}: unknown key")
    out = {}
    for key, default in allowed.items():
        if key in section:
            out[key] = section[key]
        elif default is ...:
            raise ConfigError(f"{context}.{key}: required key missing")
        else:
            out[key] = default
    return out


def _as_int(value, context: str, minimum=None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{context}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{context}: must be >= {minimum}, got {value}")
    return value


def _as_float(value, context: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}: expected a number, got {value!r}")
    return float(value)


def _parse_schedule(entry, context: str) -> StepSchedule:
    got = _require_keys(entry, {"gamma0": ..., "zeta": 0.0}, context)
    gamma0 = _as_float(got["gamma0"], f"{context}.gamma0")
    zeta = _as_float(got["zeta"], f"{context}.zeta")
    if gamma0 <= 0:
        raise ConfigError(f"{context}.gamma0: must be positive, got {gamma0}")
    if not 0.0 <= zeta < 1.0:
        raise ConfigError(f"{context}.zeta: must lie in [0, 1), got {zeta}")
    return StepSchedule(gamma0=gamma0, zeta=zeta)


def parse_config(path) -> SweepSpec:
    """Load and validate a sweep configuration file (YAML sections)."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raise ConfigError("config file is empty")
    top = _require_keys(
        raw, {"data": ..., "model": ..., "train": ..., "run": ..., "outputs": {}}, "config"
    )

    data = _require_keys(
        top["data"],
        {
            "source": "synthetic",
            "cov": "identity",
            "cov_exponent": 1.0,
            "target": "laplace",
            "target_norm": 1.0,
            "bandwidth": None,
            "noise_sd": 1.0,
            "n_test": 200,
            "images": None,
            "labels": None,
            "digit_a": 3,
            "digit_b": 7,
            "n_per_class": 300,
            "scale_pixels": True,
        },
        "data",
    )
    model = _require_keys(top["model"], {"activation": ..., "m_grid": ...}, "model")
    train = _require_keys(
        top["train"],
        {"schedules": ..., "epochs": 1, "init": "zero", "init_value": 1.0},
        "train",
    )
    run = _require_keys(
        top["run"],
        {"n": None, "d": None, "repetitions": 1, "seed_base": 0, "mc": None},
        "run",
    )
    outputs = _require_keys(top["outputs"], {"csv": None, "svg": []}, "outputs")

    # data source
    source = data["source"]
    if source == "synthetic":
        if data["cov"] == "identity":
            cov = IdentityCov()
        elif data["cov"] == "power_law":
            cov = DiagonalPowerLaw(_as_float(data["cov_exponent"], "data.cov_exponent"))
        else:
            raise ConfigError(f"data.cov: expected identity or power_law, got {data['cov']!r}")
        if data["target"] not in ("laplace", "planted"):
            raise ConfigError(f"data.target: expected laplace or planted, got {data['target']!r}")
        bandwidth = data["bandwidth"]
        if bandwidth is not None:
            bandwidth = _as_float(bandwidth, "data.bandwidth")
            if bandwidth <= 0:
                raise ConfigError(f"data.bandwidth: must be positive, got {bandwidth}")
        noise_sd = _as_float(data["noise_sd"], "data.noise_sd")
        if noise_sd < 0:
            raise ConfigError(f"data.noise_sd: must be >= 0, got {noise_sd}")
        data_source: Union[SyntheticSource, IdxSource] = SyntheticSource(
            cov=cov,
            target=data["target"],
            target_norm=_as_float(data["target_norm"], "data.target_norm"),
            bandwidth=bandwidth,
            noise_sd=noise_sd,
            n_test=_as_int(data["n_test"], "data.n_test", minimum=1),
        )
        n = _as_int(run["n"], "run.n", minimum=1) if run["n"] is not None else None
        d = _as_int(run["d"], "run.d", minimum=1) if run["d"] is not None else None
        if n is None or d is None:
            raise ConfigError("run.n and run.d are required for synthetic data")
    elif source == "idx":
        if not data["images"] or not data["labels"]:
            raise ConfigError("data.images and data.labels are required for the idx source")
        data_source = IdxSource(
            images_path=str(data["images"]),
            labels_path=str(data["labels"]),
            digit_a=_as_int(data["digit_a"], "data.digit_a", minimum=0),
            digit_b=_as_int(data["digit_b"], "data.digit_b", minimum=0),
            n_per_class=_as_int(data["n_per_class"], "data.n_per_class", minimum=1),
            noise_sd=_as_float(data["noise_sd"], "data.noise_sd"),
            scale_pixels=bool(data["scale_pixels"]),
        )
        n = 2 * data_source.n_per_class
        if run["n"] is not None and _as_int(run["n"], "run.n") != n:
            raise ConfigError(f"run.n: inconsistent with 2*n_per_class = {n}")
        # d is read off the image file lazily; a configured value is checked then
        d = _as_int(run["d"], "run.d", minimum=1) if run["d"] is not None else 0
    else:
        raise ConfigError(f"data.source: expected synthetic or idx, got {source!r}")

    # model
    try:
        activation = Activation(model["activation"])
    except ValueError:
        raise ConfigError(
            f"model.activation: expected one of relu/identity/cos_sin, got {model['activation']!r}"
        ) from None
    m_grid = model["m_grid"]
    if not isinstance(m_grid, list) or not m_grid:
        raise ConfigError("model.m_grid: expected a non-empty list of integers")
    m_grid = tuple(_as_int(v, "model.m_grid", minimum=1) for v in m_grid)
    if any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ConfigError(f"model.m_grid: must be strictly increasing, got {list(m_grid)}")

    # training
    schedules = train["schedules"]
    if not isinstance(schedules, list) or not schedules:
        raise ConfigError("train.schedules: expected a non-empty list")
    schedules = tuple(
        _parse_schedule(s, f"train.schedules[{i}]") for i, s in enumerate(schedules)
    )
    if train["init"] not in ("zero", "constant", "near_min_norm"):
        raise ConfigError(
            f"train.init: expected zero, constant, or near_min_norm, got {train['init']!r}"
        )

    mc = run["mc"]
    if mc is not None:
        got = _require_keys(mc, {"n_w": 1, "n_noise": 1, "n_order": 1}, "run.mc")
        mc = (
            _as_int(got["n_w"], "run.mc.n_w", minimum=1),
            _as_int(got["n_noise"], "run.mc.n_noise", minimum=1),
            _as_int(got["n_order"], "run.mc.n_order", minimum=1),
        )

    svg_specs = []
    for i, entry in enumerate(outputs["svg"]):
        got = _require_keys(entry, {"metric": ..., "path": ..., "logy": False}, f"outputs.svg[{i}]")
        if got["metric"] not in _NUMERIC_METRICS:
            raise ConfigError(
                f"outputs.svg[{i}].metric: unknown metric {got['metric']!r}"
            )
        svg_specs.append(SvgSpec(metric=got["metric"], path=str(got["path"]), logy=bool(got["logy"])))

    return SweepSpec(
        data_source=data_source,
        activation=activation,
        m_grid=m_grid,
        n=n,
        d=d,
        schedules=schedules,
        epochs=_as_int(train["epochs"], "train.epochs", minimum=1),
        init_kind=train["init"],
        init_value=_as_float(train["init_value"], "train.init_value"),
        repetitions=_as_int(run["repetitions"], "run.repetitions", minimum=1),
        mc=mc,
        seed_base=_as_int(run["seed_base"], "run.seed_base"),
        csv_path=str(outputs["csv"]) if outputs["csv"] else None,
        svg_specs=tuple(svg_specs),
    )


def cell_seed(seed_base: int, m: int, schedule_index: int, repetition: int) -> int:
    """Stable per-cell seed: base xor a keyed hash of the cell coordinates."""
    digest = hashlib.blake2b(
        f"{m}:{schedule_index}:{repetition}".encode(), digest_size=8
    ).digest()
    return (seed_base ^ int.from_bytes(digest, "big")) & (2**63 - 1)


def _build_cell_data(spec: SweepSpec, fmap, ss: np.random.SeedSequence):
    """Train Dataset plus (X_test, y_test) for one cell."""
    src = spec.data_source
    s_train, s_test, s_target, s_testnoise = (int(v) for v in ss.generate_state(4))
    if isinstance(src, SyntheticSource):
        X = gen_inputs(s_train, spec.n, spec.d, src.cov)
        X_test = gen_inputs(s_test, src.n_test, spec.d, src.cov)
        rng_test = np.random.default_rng(s_testnoise)
        if src.target == "laplace":
            bandwidth = src.bandwidth if src.bandwidth is not None else float(spec.d)
            fstar, fstar_test, y = gen_target_laplace(s_target, X, X_test, bandwidth, src.noise_sd)
            provenance = "synthetic-laplace"
        else:
            theta_star, fstar_all = plant_rf_target(
                fmap, s_target, src.target_norm, np.vstack([X, X_test])
            )
            fstar, fstar_test = fstar_all[: spec.n], fstar_all[spec.n :]
            y = fstar + src.noise_sd * rng_test.standard_normal(spec.n)
            provenance = "synthetic-linear"
        y_test = fstar_test + src.noise_sd * rng_test.standard_normal(len(fstar_test))
        train = Dataset(X=X, y=y, fstar=fstar, noise_sd=src.noise_sd, provenance=provenance)
        return train, X_test, y_test
    images = load_idx_images(src.images_path)
    labels = load_idx_labels(src.labels_path)
    if spec.d and images.shape[1] * images.shape[2] != spec.d:
        raise ConfigError(
            f"run.d: image files carry d = {images.shape[1] * images.shape[2]}, config says {spec.d}"
        )
    return binary_digit_split(
        images, labels, src.digit_a, src.digit_b, src.n_per_class,
        s_train, src.noise_sd, src.scale_pixels,
    )


def _init_scheme(spec: SweepSpec):
    if spec.init_kind == "zero":
        return ZeroInit()
    if spec.init_kind == "constant":
        return ConstantInit(spec.init_value)
    return NearMinNormInit(spec.init_value)


def build_cell(spec: SweepSpec, m: int, schedule_index: int, repetition: int):
    """Deterministic per-cell context: seed, feature map, train and test data."""
    seed = cell_seed(spec.seed_base, m, schedule_index, repetition)
    ss = np.random.SeedSequence(seed)
    data_ss, map_ss, sgd_ss, decomp_ss = ss.spawn(4)

    # the planted target needs the map, so the map is built first
    probe_d = spec.d
    if isinstance(spec.data_source, IdxSource):
        images = load_idx_images(spec.data_source.images_path)
        probe_d = images.shape[1] * images.shape[2]
    fmap = build_feature_map(int(map_ss.generate_state(1)[0]), m, probe_d, spec.activation)
    train, X_test, y_test = _build_cell_data(spec, fmap, data_ss)
    sgd_seed = int(sgd_ss.generate_state(1)[0])
    decomp_seed = int(decomp_ss.generate_state(1)[0])
    return seed, fmap, train, X_test, y_test, sgd_seed, decomp_seed


def run_cell(spec: SweepSpec, m: int, schedule_index: int, repetition: int) -> SweepRow:
    """Run a single sweep cell; reproducible in isolation from its coordinates."""
    schedule = spec.schedules[schedule_index]
    seed, fmap, train, X_test, y_test, sgd_seed, decomp_seed = build_cell(
        spec, m, schedule_index, repetition
    )

    n, d = train.n, train.d
    Phi = apply_batch(fmap, train.X)
    theta_mn = min_norm_fit(Phi, train.y)
    train_mse_minnorm = float(np.mean((Phi @ theta_mn - train.y) ** 2))
    test_mse_minnorm = test_mse(theta_mn, fmap, X_test, y_test)

    nan = float("nan")
    stability_warning = False
    try:
        outcome = sgd_average(
            fmap, train.X, train.y, schedule,
            init=_init_scheme(spec), epochs=spec.epochs,
            seed=sgd_seed,
        )
        sgd_mse = test_mse(outcome.theta_bar, fmap, X_test, y_test)
        stability_warning = outcome.stability_warning
    except DivergenceError:
        sgd_mse = nan
        stability_warning = True

    b1 = b2 = b3 = v1 = v2 = v3 = bias = variance = excess = nan
    if spec.mc is not None:
        report = estimate_terms(
            train,
            lambda s, _m=m, _d=d: build_feature_map(s, _m, _d, spec.activation),
            schedule,
            spec.mc,
            seed=decomp_seed,
        )
        b1, b2, b3 = report.b1, report.b2, report.b3
        v1, v2, v3 = report.v1, report.v2, report.v3
        bias, variance, excess = report.bias, report.variance, report.excess

    return SweepRow(
        ratio=m / n, m=m, n=n, d=d, zeta=schedule.zeta, gamma0=schedule.gamma0,
        seed=seed, test_mse_sgd=sgd_mse, test_mse_minnorm=test_mse_minnorm,
        train_mse_minnorm=train_mse_minnorm,
        B1=b1, B2=b2, B3=b3, V1=v1, V2=v2, V3=v3,
        bias=bias, variance=variance, excess=excess,
        stability_warning=stability_warning,
        p=fmap.feature_dim, n_test=len(y_test),
    )


def run_sweep(spec: SweepSpec, parallelism: int = 1):
    """Run all cells, ordered by (m, schedule index, repetition)."""
    cells = [
        (m, si, rep)
        for m in spec.m_grid
        for si in range(len(spec.schedules))
        for rep in range(spec.repetitions)
    ]
    if parallelism <= 1:
        return [run_cell(spec, *cell) for cell in cells]
    rows = [None] * len(cells)
    with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
        futures = {pool.submit(run_cell, spec, *cell): i for i, cell in enumerate(cells)}
        for fut in concurrent.futures.as_completed(futures):
            rows[futures[fut]] = fut.result()
    return rows


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def write_csv(rows: Sequence[SweepRow], path) -> None:
    """Write rows under the fixed v1 header; floats round-trip exactly."""
    lines = [CSV_HEADER_V1]
    names = [f.name for f in fields(SweepRow)]
    for row in rows:
        lines.append(",".join(_format_value(getattr(row, name)) for name in names))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> list:
    """Parse a sweep CSV produced by write_csv back into SweepRow objects."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != CSV_HEADER_V1:
        raise ValueError(f"{path}: unrecognized CSV header")
    names = [f.name for f in fields(SweepRow)]
    types = {f.name: f.type for f in fields(SweepRow)}
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        kwargs = {}
        for name, part in zip(names, parts):
            if types[name] in ("int", int):
                kwargs[name] = int(part)
            elif types[name] in ("bool", bool):
                kwargs[name] = part == "true"
            else:
                kwargs[name] = float(part) if part else float("nan")
        rows.append(SweepRow(**kwargs))
    return rows


def aggregate_metric(rows: Sequence[SweepRow], metric: str):
    """Per-ratio mean and sample std of a metric over finite repetitions.

    Returns a list of (ratio, mean, std, count) sorted by ratio.
    """
    if metric not in _NUMERIC_METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {_NUMERIC_METRICS}")
    groups: dict = {}
    for row in rows:
        value = getattr(row, metric)
        if math.isfinite(value):
            groups.setdefault(row.ratio, []).append(value)
    out = []
    for ratio in sorted(groups):
        vals = np.array(groups[ratio])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append((ratio, float(vals.mean()), std, len(vals)))
    return out


def render_svg(rows: Sequence[SweepRow], metric: str, path, logy: bool = False) -> None:
    """Mean plus/minus one sample-std band of a metric against the ratio."""
    if not rows:
        raise ValueError("cannot render an empty row set")
    stats = aggregate_metric(rows, metric)
    if not stats:
        raise ValueError(f"no finite values of {metric!r} to plot")

    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rfsgd"
    import matplotlib.pyplot as plt

    ratios = [s[0] for s in stats]
    means = np.array([s[1] for s in stats])
    stds = np.array([s[2] for s in stats])
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(ratios, means, marker="o", lw=1.5, label=metric)
    ax.fill_between(ratios, means - stds, means + stds, alpha=0.25)
    ax.set_xscale("log", base=2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("ratio m/n")
    ax.set_ylabel(metric)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
