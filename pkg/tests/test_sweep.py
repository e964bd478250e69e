import math
import xml.etree.ElementTree as ET

import pytest

from rfsgd.sweep import (
    CSV_HEADER_V1,
    ConfigError,
    SweepRow,
    aggregate_metric,
    cell_seed,
    parse_config,
    read_csv,
    render_svg,
    run_cell,
    run_sweep,
    write_csv,
)

from _fixtures import write_digit_fixture

MINIMAL_CONFIG = """
data:
  source: synthetic
  target: laplace
  noise_sd: 0.5
  n_test: 20
model:
  activation: relu
  m_grid: [4, 8]
train:
  schedules:
    - {gamma0: 0.8, zeta: 0.5}
run:
  n: 16
  d: 3
  repetitions: 2
outputs:
  csv: out.csv
"""


@pytest.fixture
def minimal_spec(tmp_path):
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(MINIMAL_CONFIG)
    return parse_config(cfg)


class TestParseConfig:
    def test_minimal_config_fills_defaults(self, minimal_spec):
        spec = minimal_spec
        assert spec.m_grid == (4, 8)
        assert spec.repetitions == 2
        assert spec.epochs == 1
        assert spec.init_kind == "zero"
        assert spec.seed_base == 0
        assert spec.mc is None
        assert spec.csv_path == "out.csv"

    def _parse_mutation(self, tmp_path, old, new):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text(MINIMAL_CONFIG.replace(old, new))
        return parse_config(cfg)

    def test_zeta_one_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match=r"zeta.*\[0, 1\)"):
            self._parse_mutation(tmp_path, "zeta: 0.5", "zeta: 1.0")

    def test_non_increasing_m_grid_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="strictly increasing"):
            self._parse_mutation(tmp_path, "m_grid: [4, 8]", "m_grid: [8, 8]")

    def test_unknown_key_named_in_error(self, tmp_path):
        with pytest.raises(ConfigError, match="run.bananas"):
            self._parse_mutation(tmp_path, "repetitions: 2", "repetitions: 2\n  bananas: 1")

    def test_unknown_activation_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="activation"):
            self._parse_mutation(tmp_path, "activation: relu", "activation: selu")

    def test_idx_source_requires_paths(self, tmp_path):
        with pytest.raises(ConfigError, match="images"):
            self._parse_mutation(tmp_path, "source: synthetic", "source: idx")


class TestRunSweep:
    def test_single_cell_single_row(self, tmp_path):
        cfg = tmp_path / "one.yaml"
        cfg.write_text(
            MINIMAL_CONFIG.replace("m_grid: [4, 8]", "m_grid: [4]").replace(
                "repetitions: 2", "repetitions: 1"
            )
        )
        rows = run_sweep(parse_config(cfg))
        assert len(rows) == 1
        row = rows[0]
        assert row.m == 4 and row.n == 16 and row.p == 4
        assert row.ratio == pytest.approx(4 / 16)
        assert math.isfinite(row.test_mse_sgd)
        assert math.isnan(row.B1)  # no mc section: decomposition skipped

    def test_rows_ordered_and_complete(self, minimal_spec):
        rows = run_sweep(minimal_spec)
        assert len(rows) == 4
        assert [(r.m,) for r in rows] == [(4,), (4,), (8,), (8,)]

    def test_rerun_bit_identical(self, minimal_spec, tmp_path):
        rows_a = run_sweep(minimal_spec)
        rows_b = run_sweep(minimal_spec)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(rows_a, pa)
        write_csv(rows_b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_cell_reproducible_in_isolation(self, minimal_spec, tmp_path):
        rows = run_sweep(minimal_spec)
        again = run_cell(minimal_spec, 8, 0, 1)
        # compare via the canonical CSV encoding (NaN-tolerant)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv([rows[3]], a)
        write_csv([again], b)
        assert a.read_bytes() == b.read_bytes()

    def test_parallel_matches_serial(self, minimal_spec, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(run_sweep(minimal_spec, parallelism=1), a)
        write_csv(run_sweep(minimal_spec, parallelism=2), b)
        assert a.read_bytes() == b.read_bytes()

    def test_mc_section_fills_decomposition_columns(self, tmp_path):
        cfg = tmp_path / "mc.yaml"
        cfg.write_text(
            MINIMAL_CONFIG.replace("repetitions: 2", "repetitions: 1\n  mc: {n_w: 1, n_noise: 2, n_order: 1}")
            .replace("m_grid: [4, 8]", "m_grid: [4]")
        )
        rows = run_sweep(parse_config(cfg))
        assert math.isfinite(rows[0].B1) and math.isfinite(rows[0].V3)

    def test_idx_source_end_to_end(self, tmp_path):
        images_path, labels_path = write_digit_fixture(tmp_path, n_per_digit=30, seed=0)
        cfg = tmp_path / "idx.yaml"
        cfg.write_text(
            f"""
data:
  source: idx
  images: {images_path}
  labels: {labels_path}
  digit_a: 3
  digit_b: 7
  n_per_class: 20
  noise_sd: 1.0
model:
  activation: cos_sin
  m_grid: [10]
train:
  schedules:
    - {{gamma0: 1.0, zeta: 0.5}}
  init: near_min_norm
run:
  repetitions: 1
outputs: {{}}
"""
        )
        rows = run_sweep(parse_config(cfg))
        assert rows[0].n == 40 and rows[0].d == 784
        assert rows[0].n_test == 20  # remaining 10 per digit
        assert math.isfinite(rows[0].test_mse_minnorm)


class TestCellSeeds:
    def test_distinct_across_cells(self):
        seeds = {cell_seed(0, m, s, r) for m in (4, 8) for s in (0, 1) for r in range(3)}
        assert len(seeds) == 12

    def test_base_seed_shifts(self):
        assert cell_seed(0, 4, 0, 0) != cell_seed(1, 4, 0, 0)


class TestCsv:
    def _rows(self):
        base = dict(
            ratio=0.25, m=4, n=16, d=3, zeta=0.5, gamma0=0.8, seed=11,
            test_mse_sgd=1.25, test_mse_minnorm=0.5, train_mse_minnorm=1e-17,
            B1=float("nan"), B2=float("nan"), B3=float("nan"),
            V1=float("nan"), V2=float("nan"), V3=float("nan"),
            bias=float("nan"), variance=float("nan"), excess=float("nan"),
            stability_warning=False, p=4, n_test=20,
        )
        rows = [SweepRow(**base)]
        base2 = dict(base, ratio=0.5, m=8, p=8, seed=12, test_mse_sgd=0.1234567890123456789)
        rows.append(SweepRow(**base2))
        return rows

    def test_header_pinned(self, tmp_path):
        path = tmp_path / "o.csv"
        write_csv([], path)
        assert path.read_text().strip() == CSV_HEADER_V1
        assert CSV_HEADER_V1.startswith("ratio,m,n,d,zeta,gamma0,seed,test_mse_sgd")

    def test_round_trip_seventeen_digits(self, tmp_path):
        rows = self._rows()
        path = tmp_path / "o.csv"
        write_csv(rows, path)
        back = read_csv(path)
        assert len(back) == 2
        assert back[0].test_mse_sgd == rows[0].test_mse_sgd
        assert back[1].test_mse_sgd == rows[1].test_mse_sgd
        assert math.isnan(back[0].B1)
        assert back[0].stability_warning is False

    def test_header_mismatch_detected(self, tmp_path):
        path = tmp_path / "o.csv"
        path.write_text("not,a,header\n")
        with pytest.raises(ValueError, match="header"):
            read_csv(path)


class TestAggregation:
    def test_mean_and_sample_std(self):
        rows = []
        for value in (1.0, 2.0, 3.0):
            rows.append(
                SweepRow(
                    ratio=0.5, m=8, n=16, d=3, zeta=0.5, gamma0=0.8, seed=0,
                    test_mse_sgd=value, test_mse_minnorm=0.0, train_mse_minnorm=0.0,
                    B1=0.0, B2=0.0, B3=0.0, V1=0.0, V2=0.0, V3=0.0,
                    bias=0.0, variance=0.0, excess=0.0,
                    stability_warning=False, p=8, n_test=1,
                )
            )
        stats = aggregate_metric(rows, "test_mse_sgd")
        assert stats == [(0.5, 2.0, 1.0, 3)]

    def test_nan_rows_excluded(self):
        rows = self._nan_row()
        stats = aggregate_metric(rows, "test_mse_sgd")
        assert stats[0][3] == 1

    def _nan_row(self):
        good = SweepRow(
            ratio=0.5, m=8, n=16, d=3, zeta=0.5, gamma0=0.8, seed=0,
            test_mse_sgd=2.0, test_mse_minnorm=0.0, train_mse_minnorm=0.0,
            B1=0.0, B2=0.0, B3=0.0, V1=0.0, V2=0.0, V3=0.0,
            bias=0.0, variance=0.0, excess=0.0,
            stability_warning=False, p=8, n_test=1,
        )
        bad = SweepRow(**{**good.__dict__, "test_mse_sgd": float("nan"),
                          "stability_warning": True})
        return [good, bad]

    def test_unknown_metric_rejected(self):
        with pytest.raises(ValueError, match="unknown metric"):
            aggregate_metric([], "not_a_metric")


class TestRenderSvg:
    def test_writes_self_contained_svg(self, minimal_spec, tmp_path):
        rows = run_sweep(minimal_spec)
        out = tmp_path / "fig.svg"
        render_svg(rows, "test_mse_sgd", out, logy=True)
        tree = ET.parse(out)
        assert tree.getroot().tag.endswith("svg")
        body = out.read_text()
        assert "http-equiv" not in body and "xlink:href=\"http" not in body

    def test_empty_rows_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            render_svg([], "test_mse_sgd", tmp_path / "x.svg")
