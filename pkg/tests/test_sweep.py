"""Resolution sweep plumbing: aggregation, CSV formats, charts, micro runs."""

from pathlib import Path

import numpy as np
import pytest

from tempsed.events import PosteriorMatrix
from tempsed.model import tiny_config
from tempsed.postprocess import DecodeConfig
from tempsed.sweep import (
    SweepSpec,
    aggregate_rows,
    build_operating_points,
    desk_model_config,
    desk_train_config,
    parse_classwise_csv,
    parse_results_csv,
    render_classwise_chart,
    render_metric_chart,
    resolution_ms,
    run_single,
    run_sweep,
    serialize_classwise_csv,
    serialize_results_csv,
    serialize_runs_csv,
)
from tempsed.synth import SyntheticSpec, gen_dataset
from tempsed.training import TrainConfig


class TestResolutionMs:
    def test_default_grid_values(self):
        got = [round(resolution_ms(x, 10.0, 608), 1) for x in range(1, 6)]
        assert got == [32.9, 65.8, 131.6, 263.2, 526.3]

    def test_doubles_per_level(self):
        for x in range(1, 5):
            np.testing.assert_allclose(
                resolution_ms(x + 1, 10.0, 608), 2 * resolution_ms(x, 10.0, 608)
            )


class TestSweepSpec:
    def test_defaults(self):
        spec = SweepSpec(out_dir="/tmp/x")
        assert spec.x_values == (1, 2, 3, 4, 5)
        assert spec.seeds == (1, 2, 3)
        assert spec.scale == 0.01

    def test_x_range_enforced(self):
        with pytest.raises(ValueError):
            SweepSpec(out_dir="/tmp/x", x_values=(0,))
        with pytest.raises(ValueError):
            SweepSpec(out_dir="/tmp/x", x_values=(1, 1))

    def test_seed_duplicates_rejected(self):
        with pytest.raises(ValueError):
            SweepSpec(out_dir="/tmp/x", seeds=(1, 1))


class TestAggregation:
    def _rows(self):
        return [
            (1, 2, "clip_f1", "ALL", 0.5),
            (1, 1, "clip_f1", "ALL", 0.7),
            (1, 1, "event_f1", "a", 0.2),
            (1, 2, "event_f1", "a", 0.4),
            (2, 1, "clip_f1", "ALL", 0.6),
            (2, 2, "clip_f1", "ALL", 0.6),
        ]

    def test_population_mean_and_std(self):
        results, classwise = aggregate_rows(self._rows(), 10.0, 608)
        headline = {(x, m): (mean, std) for x, _, m, mean, std in results}
        np.testing.assert_allclose(headline[(1, "clip_f1")], (0.6, 0.1))
        np.testing.assert_allclose(headline[(2, "clip_f1")], (0.6, 0.0))
        (row,) = classwise
        assert row[2] == "event_f1" and row[3] == "a"
        np.testing.assert_allclose(row[4:], (0.3, 0.1))

    def test_seed_order_invisible(self):
        swapped = list(reversed(self._rows()))
        a = serialize_results_csv(aggregate_rows(self._rows(), 10.0, 608)[0])
        b = serialize_results_csv(aggregate_rows(swapped, 10.0, 608)[0])
        assert a == b

    def test_single_seed_std_zero(self):
        rows = [(3, 7, "psds1", "ALL", 0.25)]
        results, _ = aggregate_rows(rows, 10.0, 608)
        assert results[0][4] == 0.0


class TestCsvFormats:
    def test_runs_csv_schema_and_order(self):
        text = serialize_runs_csv([(2, 1, "m", "ALL", 0.5), (1, 1, "m", "ALL", 1 / 3)])
        lines = text.strip().split("\n")
        assert lines[0] == "x,seed,metric,class,value"
        assert lines[1].startswith("1,1,m,ALL,0.333333333333")
        assert text.endswith("\n")

    def test_serialization_stable_after_one_round(self):
        """resolution_ms prints at 6 decimals, so parse -> serialize must be
        the identity on file content (what the regeneration check relies on)."""
        results, classwise = aggregate_rows(
            [
                (1, 1, "clip_f1", "ALL", 0.123456789),
                (1, 1, "event_f1", "a", 0.5),
            ],
            10.0,
            608,
        )
        text = serialize_results_csv(results)
        parsed = parse_results_csv(text)
        assert serialize_results_csv(parsed) == text
        assert [(r[0], r[2], r[3], r[4]) for r in parsed] == [
            (r[0], r[2], r[3], r[4]) for r in results
        ]
        ctext = serialize_classwise_csv(classwise)
        assert serialize_classwise_csv(parse_classwise_csv(ctext)) == ctext


class TestCharts:
    def test_metric_chart_is_deterministic_svg(self):
        results, classwise = aggregate_rows(
            [
                (x, s, m, "ALL", 0.1 * x + 0.01 * s)
                for x in (1, 2, 3)
                for s in (1, 2)
                for m in ("clip_f1", "event_f1_macro")
            ]
            + [(x, 1, "event_f1", "a", 0.05 * x) for x in (1, 2, 3)],
            10.0,
            608,
        )
        one = render_metric_chart(results)
        two = render_metric_chart(results)
        assert one == two
        assert one.lstrip().startswith("<svg") and one.rstrip().endswith("</svg>")
        cw = render_classwise_chart(classwise)
        assert cw.lstrip().startswith("<svg")
        assert "event_f1" in cw

    def test_chart_survives_csv_round_trip(self):
        results, _ = aggregate_rows(
            [(x, 1, "clip_f1", "ALL", 0.3 + 0.1 * x) for x in (1, 2)], 10.0, 608
        )
        direct = render_metric_chart(results)
        reparsed = render_metric_chart(parse_results_csv(serialize_results_csv(results)))
        assert direct == reparsed


class TestBuildOperatingPoints:
    def test_threshold_count_and_monotone_event_counts(self):
        rng = np.random.default_rng(0)
        pm = PosteriorMatrix("c", 0.25, rng.random((32, 2)).astype(np.float32))
        ops = build_operating_points([pm], ("a", "b"), {"c": 8.0})
        assert len(ops.thresholds) == 50
        assert ops.thresholds[0] == pytest.approx(0.01)
        assert ops.thresholds[-1] == pytest.approx(0.99)
        # Raising the threshold cannot activate more frames.
        actives = [
            sum(len(r.events) for r in rosters.values()) for rosters in ops.rosters
        ]
        # Not strictly monotone (merging can fuse runs), but the extremes are.
        assert actives[0] >= actives[-1]

    def test_custom_thresholds(self):
        pm = PosteriorMatrix("c", 0.25, np.full((4, 1), 0.6, dtype=np.float32))
        ops = build_operating_points(
            [pm], ("a",), {"c": 1.0}, DecodeConfig(), thresholds=(0.5, 0.7)
        )
        assert len(ops.rosters[0]["c"].events) == 1
        assert len(ops.rosters[1]["c"].events) == 0


def _micro_dataset(tmp_path):
    spec = SyntheticSpec(
        num_frames=64,
        num_mel_bins=16,
        classes=("one", "two"),
        weak_count=2,
        strong_count=2,
        unlabeled_count=2,
        eval_count=2,
        num_short_classes=1,
    )
    data_dir = tmp_path / "data"
    gen_dataset(spec, data_dir)
    return data_dir


def _micro_train():
    return TrainConfig(
        epochs=1,
        batches_per_epoch=2,
        weak_per_batch=2,
        strong_per_batch=2,
        unlabeled_per_batch=2,
        ramp_steps=4,
    )


class TestRunSingle:
    def test_artifacts_and_rows(self, tmp_path):
        data_dir = _micro_dataset(tmp_path)
        run_dir = tmp_path / "run"
        rows = run_single(
            data_dir, run_dir, x=2, seed=1,
            model_base=tiny_config(), train_base=_micro_train(),
        )
        for name in ("checkpoint.tpmd", "history.csv", "posteriors.bin",
                     "report.csv", "report.txt"):
            assert (run_dir / name).exists(), name
        headline = {r[2] for r in rows if r[3] == "ALL"}
        assert headline == {"clip_f1", "segment_f1", "event_f1_macro", "psds1", "psds2"}
        assert all(r[0] == 2 and r[1] == 1 for r in rows)
        assert all(0.0 <= r[4] <= 1.0 for r in rows)

    def test_rerun_byte_identical(self, tmp_path):
        data_dir = _micro_dataset(tmp_path)
        rows_a = run_single(
            data_dir, tmp_path / "a", x=1, seed=3,
            model_base=tiny_config(), train_base=_micro_train(),
        )
        rows_b = run_single(
            data_dir, tmp_path / "b", x=1, seed=3,
            model_base=tiny_config(), train_base=_micro_train(),
        )
        assert rows_a == rows_b
        for name in ("checkpoint.tpmd", "posteriors.bin", "report.csv", "history.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name


class TestRunSweep:
    def test_micro_sweep_outputs(self, tmp_path):
        data_dir = _micro_dataset(tmp_path)
        spec = SweepSpec(
            out_dir=str(tmp_path / "out"),
            data_dir=str(data_dir),
            x_values=(1, 2),
            seeds=(1, 2),
            model=tiny_config(),
            train=_micro_train(),
        )
        result = run_sweep(spec)
        out = Path(result["out_dir"])
        for name in ("runs.csv", "results.csv", "results_classwise.csv",
                     "fig_metrics.svg", "fig_event_f1_classwise.svg"):
            assert (out / name).exists(), name
        parsed = parse_results_csv((out / "results.csv").read_text())
        assert {r[0] for r in parsed} == {1, 2}
        assert (out / "runs" / "x1_seed1" / "checkpoint.tpmd").exists()

    def test_seed_set_order_irrelevant(self, tmp_path):
        data_dir = _micro_dataset(tmp_path)
        common = dict(
            data_dir=str(data_dir),
            x_values=(1,),
            model=tiny_config(),
            train=_micro_train(),
        )
        run_sweep(SweepSpec(out_dir=str(tmp_path / "fwd"), seeds=(1, 2), **common))
        run_sweep(SweepSpec(out_dir=str(tmp_path / "rev"), seeds=(2, 1), **common))
        for name in ("runs.csv", "results.csv", "results_classwise.csv"):
            assert (tmp_path / "fwd" / name).read_text() == (
                tmp_path / "rev" / name
            ).read_text(), name

    def test_generates_dataset_when_missing(self, tmp_path):
        spec = SweepSpec(
            out_dir=str(tmp_path / "out"),
            x_values=(1,),
            seeds=(1,),
            scale=1e-6,  # one clip per pool
            model=tiny_config(num_mel_bins=32),
            train=_micro_train(),
        )
        result = run_sweep(spec)
        assert (Path(result["data_dir"]) / "classes.txt").exists()


class TestDeskDefaults:
    def test_model_shape(self):
        cfg = desk_model_config()
        assert cfg.num_mel_bins == 32
        assert cfg.temporal_pool_layers == 2
        assert cfg.num_classes == 10

    def test_train_budget(self):
        tc = desk_train_config()
        assert tc.epochs * tc.batches_per_epoch == 100
