"""Command line front end: sweep, spectra, decompose, and plot subcommands."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .decomposition import estimate_terms
from .features import build_feature_map
from .spectral import analytic_summary, trace_concentration
from .sweep import (
    SweepSpec,
    build_cell,
    parse_config,
    read_csv,
    render_svg,
    run_sweep,
    write_csv,
)

OUT_DIR_ENV = "RFSGD_OUT_DIR"


def _resolve_out_dir(flag_value) -> Path:
    out = flag_value or os.environ.get(OUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _out_path(out_dir: Path, target: str) -> Path:
    target = Path(target)
    return target if target.is_absolute() else out_dir / target


def _load_spec(args) -> SweepSpec:
    spec = parse_config(args.config)
    if args.seed is not None:
        spec = replace(spec, seed_base=args.seed)
    return spec


def _cmd_sweep(args) -> int:
    spec = _load_spec(args)
    out_dir = _resolve_out_dir(args.out_dir)
    rows = run_sweep(spec, parallelism=args.parallelism)
    failed = sum(1 for r in rows if r.stability_warning and not np.isfinite(r.test_mse_sgd))
    print(f"sweep: {len(rows)} cells ({failed} divergent)")
    if spec.csv_path:
        csv_path = _out_path(out_dir, spec.csv_path)
        write_csv(rows, csv_path)
        print(f"wrote {csv_path}")
    for svg in spec.svg_specs:
        svg_path = _out_path(out_dir, svg.path)
        render_svg(rows, svg.metric, svg_path, logy=svg.logy)
        print(f"wrote {svg_path}")
    return 0


def _cmd_spectra(args) -> int:
    spec = _load_spec(args)
    out_dir = _resolve_out_dir(args.out_dir)
    lines = ["m,p,eigenvalue,multiplicity,trace_analytic,trace_sample_mean,trace_sample_sd"]
    for m in spec.m_grid:
        _, fmap, train, _, _, _, _ = build_cell(spec, m, 0, 0)
        summary = analytic_summary(spec.activation, train.X, m)
        seeds = [spec.seed_base + 1000 * m + i for i in range(30)]
        conc = trace_concentration(spec.activation, train.X, m, seeds)
        print(f"m={m} p={summary.feature_dim} trace={summary.trace:.6g} "
              f"sample trace {conc.mean:.6g} +- {conc.sd:.3g}")
        for value, mult in summary.eigenvalues:
            print(f"  eigenvalue {value:.12g} multiplicity {mult}")
            lines.append(
                f"{m},{summary.feature_dim},{value!r},{mult},"
                f"{summary.trace!r},{conc.mean!r},{conc.sd!r}"
            )
    path = _out_path(out_dir, args.output)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _cmd_decompose(args) -> int:
    spec = _load_spec(args)
    out_dir = _resolve_out_dir(args.out_dir)
    m = args.m if args.m is not None else spec.m_grid[0]
    _, fmap, train, _, _, _, decomp_seed = build_cell(spec, m, 0, 0)
    mc = spec.mc if spec.mc is not None else (2, 4, 1)
    report = estimate_terms(
        train,
        lambda s: build_feature_map(s, m, train.d, spec.activation),
        spec.schedules[0],
        mc,
        seed=decomp_seed,
    )
    lines = ["term,estimate,stderr"]
    print(f"decomposition at m={m} (n={train.n}, d={train.d}, mc={mc}):")
    for name in ("b1", "b2", "b3", "v1", "v2", "v3", "bias", "variance", "excess"):
        value = getattr(report, name)
        se = report.stderr[name]
        print(f"  {name:8s} {value:.6e} +- {se:.2e}")
        lines.append(f"{name},{value!r},{se!r}")
    path = _out_path(out_dir, args.output)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _cmd_plot(args) -> int:
    out_dir = _resolve_out_dir(args.out_dir)
    rows = read_csv(args.csv)
    path = _out_path(out_dir, args.output)
    render_svg(rows, args.metric, path, logy=args.logy)
    print(f"wrote {path}")
    return 0


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="override the config seed_base")
    sub.add_argument("--out-dir", default=None,
                     help=f"output directory (default: ${OUT_DIR_ENV} or cwd)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rfsgd",
        description="Random-features regression experiments: sweeps, spectra, decompositions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sweep = sub.add_parser("sweep", help="run a full sweep and write CSV/SVG outputs")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--parallelism", type=int, default=1, help="worker processes")
    _add_common(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_spec = sub.add_parser("spectra", help="analytic covariance spectra and trace diagnostics")
    p_spec.add_argument("config")
    p_spec.add_argument("--output", default="spectra.csv")
    _add_common(p_spec)
    p_spec.set_defaults(func=_cmd_spectra)

    p_dec = sub.add_parser("decompose", help="bias/variance decomposition at a single m")
    p_dec.add_argument("config")
    p_dec.add_argument("--m", type=int, default=None, help="feature count (default: first of m_grid)")
    p_dec.add_argument("--output", default="decompose.csv")
    _add_common(p_dec)
    p_dec.set_defaults(func=_cmd_decompose)

    p_plot = sub.add_parser("plot", help="render one metric from a sweep CSV to SVG")
    p_plot.add_argument("csv")
    p_plot.add_argument("--metric", required=True)
    p_plot.add_argument("-o", "--output", required=True)
    p_plot.add_argument("--logy", action="store_true")
    p_plot.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p_plot.add_argument("--out-dir", default=None,
                        help=f"output directory (default: ${OUT_DIR_ENV} or cwd)")
    p_plot.set_defaults(func=_cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
