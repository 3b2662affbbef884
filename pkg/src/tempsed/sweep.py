"""Temporal-resolution sweep: train per (x, seed), score, aggregate, chart.

Each run trains a fresh model whose first x conv blocks pool time by 2,
evaluates the final student on the held-out synthetic split with the full
metric suite, and the sweep averages each metric over seeds per x. Outputs:

    dataset/                  generated when no --data directory is given
    runs/x{X}_seed{S}/        checkpoint.tpmd, history.csv, posteriors.bin,
                              report.csv, report.txt
    runs.csv                  x, seed, metric, class, value (one row per score)
    results.csv               x, resolution_ms, metric, mean, std
    results_classwise.csv     x, resolution_ms, metric, class, mean, std
    fig_metrics.svg           headline metrics vs resolution (log x)
    fig_event_f1_classwise.svg  per-class event F1 vs resolution

Worker slots come from the TEMPSED_WORKERS environment variable (default 1);
BLAS threads are pinned to one inside every run so results do not depend on
the worker count. Aggregation sorts before reducing, so seed order does not
matter either.
"""

from __future__ import annotations

import math
import os
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional at runtime
    threadpool_limits = None

from .events import PosteriorMatrix, serialize_posteriors
from .metrics import (
    PSDS1,
    PSDS2,
    MetricReport,
    OperatingPointSet,
    clip_f1,
    default_thresholds,
    event_f1,
    format_report,
    psds,
    psds_classwise,
    segment_f1,
    serialize_report,
)
from .model import ModelConfig, Parameters, forward_batch, save_checkpoint
from .postprocess import DecodeConfig, decode_posteriors
from .svg import Series, line_chart
from .synth import LoadedDataset, gen_dataset, load_dataset, scaled_spec
from .training import TrainConfig, serialize_history, train_loop

WORKERS_ENV = "TEMPSED_WORKERS"
HEADLINE_METRICS = ("clip_f1", "segment_f1", "event_f1_macro", "psds1", "psds2")
_EVAL_CHUNK = 16


def desk_model_config() -> ModelConfig:
    """Small model for laptop-scale sweeps; same structure as the full one."""
    return ModelConfig(
        temporal_pool_layers=2,
        conv_channels=(4, 8, 16, 16, 16, 16, 16),
        dropout_rate=0.1,
        gru_hidden=32,
        gru_layers=2,
        num_classes=10,
        num_mel_bins=32,
    )


def desk_train_config() -> TrainConfig:
    """Short schedule tuned for the synthetic corpus at scale 0.01."""
    return TrainConfig(
        epochs=5,
        batches_per_epoch=20,
        lr_peak=0.002,
        ramp_steps=30,
        seed=0,
    )


@dataclass(frozen=True)
class SweepSpec:
    out_dir: str
    data_dir: str | None = None  # default: <out_dir>/dataset, generated if missing
    x_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    seeds: tuple[int, ...] = (1, 2, 3)
    scale: float = 0.01
    data_seed: int = 0
    model: ModelConfig = field(default_factory=desk_model_config)
    train: TrainConfig = field(default_factory=desk_train_config)

    def __post_init__(self) -> None:
        if not self.x_values or not all(1 <= x <= 6 for x in self.x_values):
            raise ValueError(f"x values must lie in [1, 6], got {self.x_values}")
        if len(set(self.x_values)) != len(self.x_values):
            raise ValueError("duplicate x values")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("need at least one seed, all distinct")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def resolution_ms(x: int, clip_duration: float, num_frames: int) -> float:
    """Output frame duration in milliseconds: clip/T * 2^x * 1000."""
    return clip_duration / num_frames * (2 ** x) * 1000.0


def build_operating_points(
    posteriors: Sequence[PosteriorMatrix],
    classes: Sequence[str],
    durations: Mapping[str, float],
    decode: DecodeConfig = DecodeConfig(),
    thresholds: Sequence[float] | None = None,
) -> OperatingPointSet:
    """Decode every posterior at each threshold with the same smoothing chain."""
    if thresholds is None:
        thresholds = default_thresholds()
    rosters = []
    for tau in thresholds:
        cfg = DecodeConfig(
            threshold=float(tau),
            median_window=decode.median_window,
            merge_gap=decode.merge_gap,
        )
        rosters.append(
            {
                m.clip_id: decode_posteriors(
                    m, classes, cfg, clip_duration=durations.get(m.clip_id)
                )
                for m in posteriors
            }
        )
    return OperatingPointSet(tuple(float(t) for t in thresholds), tuple(rosters))


def eval_forward(
    params: Parameters, model_config: ModelConfig, data: LoadedDataset
) -> tuple[list[PosteriorMatrix], dict[str, np.ndarray]]:
    """Frame posteriors and aggregated clip probabilities for the eval split."""
    clip_ids = sorted(data.eval_features)
    frame_chunks, clip_chunks = [], []
    for start in range(0, len(clip_ids), _EVAL_CHUNK):
        chunk = np.stack([data.eval_features[c] for c in clip_ids[start : start + _EVAL_CHUNK]])
        frames, clips, _ = forward_batch(chunk, params, model_config, mode="eval")
        frame_chunks.append(frames)
        clip_chunks.append(clips)
    frame_probs = np.concatenate(frame_chunks)
    clip_probs = np.concatenate(clip_chunks)
    fd = data.clip_duration / frame_probs.shape[1]
    posteriors = [
        PosteriorMatrix(cid, fd, frame_probs[i]) for i, cid in enumerate(clip_ids)
    ]
    return posteriors, {cid: clip_probs[i] for i, cid in enumerate(clip_ids)}


def evaluate_student(
    params: Parameters,
    model_config: ModelConfig,
    data: LoadedDataset,
    decode: DecodeConfig = DecodeConfig(),
) -> tuple[MetricReport, list[PosteriorMatrix]]:
    """Full metric suite on the evaluation split.

    Clip tags come from the aggregated clip probabilities at threshold 0.5;
    event and segment F1 from the default decoding chain; PSDS 1/2 from 50
    operating points.
    """
    posteriors, clip_vectors = eval_forward(params, model_config, data)
    pred_tags = {
        cid: frozenset(
            label
            for j, label in enumerate(data.classes)
            if clip_vectors[cid][j] >= decode.threshold
        )
        for cid in clip_vectors
    }
    pred_rosters = {
        m.clip_id: decode_posteriors(
            m, data.classes, decode, clip_duration=data.durations[m.clip_id]
        )
        for m in posteriors
    }
    clip_res = clip_f1(pred_tags, data.eval_tags, data.classes)
    seg_res = segment_f1(pred_rosters, data.eval_rosters, data.classes)
    ev_res = event_f1(pred_rosters, data.eval_rosters, data.classes)
    ops = build_operating_points(posteriors, data.classes, data.durations, decode)
    psds1_res = psds(ops, data.eval_rosters, data.classes, PSDS1)
    psds2_res = psds(ops, data.eval_rosters, data.classes, PSDS2)
    report = MetricReport(
        clip_f1=clip_res.value,
        segment_f1=seg_res.value,
        event_f1_macro=ev_res.value,
        psds1=psds1_res.score,
        psds2=psds2_res.score,
        per_class={
            "clip_f1": clip_res.per_class,
            "segment_f1": seg_res.per_class,
            "event_f1": ev_res.per_class,
            "psds1": psds_classwise(ops, data.eval_rosters, data.classes, PSDS1),
            "psds2": psds_classwise(ops, data.eval_rosters, data.classes, PSDS2),
        },
    )
    return report, posteriors


def _limit_blas():
    if threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=1)


def run_single(
    data_dir: str,
    run_dir: str,
    x: int,
    seed: int,
    model_base: ModelConfig,
    train_base: TrainConfig,
) -> list[tuple[int, int, str, str, float]]:
    """One (x, seed) training-plus-evaluation run; returns score rows
    (x, seed, metric, class-or-ALL, value)."""
    with _limit_blas():
        data = load_dataset(data_dir)
        model_config = model_base.with_overrides(
            temporal_pool_layers=x,
            num_classes=len(data.classes),
            num_mel_bins=data.train.weak_features.shape[2],
        )
        train_config = train_base.with_overrides(seed=seed)
        state, history = train_loop(data.train, model_config, train_config)

        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.tpmd", state.student, model_config)
        (out / "history.csv").write_text(serialize_history(history))
        report, posteriors = evaluate_student(state.student, model_config, data)
        (out / "posteriors.bin").write_bytes(serialize_posteriors(posteriors))
        (out / "report.csv").write_text(serialize_report(report))
        (out / "report.txt").write_text(format_report(report))

    rows = [(x, seed, name, "ALL", value) for name, value in report.headline().items()]
    for metric in sorted(report.per_class):
        for label in sorted(report.per_class[metric]):
            rows.append((x, seed, metric, label, report.per_class[metric][label]))
    return rows


def _run_job(args) -> list[tuple[int, int, str, str, float]]:
    data_dir, run_dir, x, seed, model_base, train_base = args
    try:
        return run_single(data_dir, run_dir, x, seed, model_base, train_base)
    except Exception as exc:
        raise RuntimeError(f"sweep run x={x} seed={seed} failed: {exc}") from exc


def serialize_runs_csv(rows: Sequence[tuple[int, int, str, str, float]]) -> str:
    lines = ["x,seed,metric,class,value"]
    for x, seed, metric, label, value in sorted(rows):
        lines.append(f"{x},{seed},{metric},{label},{value:.12g}")
    return "\n".join(lines) + "\n"


def aggregate_rows(
    rows: Sequence[tuple[int, int, str, str, float]],
    clip_duration: float,
    num_frames: int,
) -> tuple[list[tuple], list[tuple]]:
    """Mean/std (population) over seeds for each (x, metric[, class]).

    Returns (results, classwise): results rows are
    (x, resolution_ms, metric, mean, std), classwise rows carry the class in
    between. Rows are sorted, so seed order never shows through.
    """
    grouped: dict[tuple[int, str, str], list[float]] = {}
    for x, _seed, metric, label, value in rows:
        grouped.setdefault((x, metric, label), []).append(value)
    results, classwise = [], []
    for (x, metric, label), values in sorted(grouped.items()):
        res = resolution_ms(x, clip_duration, num_frames)
        mean = float(np.mean(values))
        std = float(np.std(values))
        if label == "ALL":
            results.append((x, res, metric, mean, std))
        else:
            classwise.append((x, res, metric, label, mean, std))
    return results, classwise


def serialize_results_csv(results: Sequence[tuple]) -> str:
    lines = ["x,resolution_ms,metric,mean,std"]
    for x, res, metric, mean, std in results:
        lines.append(f"{x},{res:.6f},{metric},{mean:.12g},{std:.12g}")
    return "\n".join(lines) + "\n"


def serialize_classwise_csv(classwise: Sequence[tuple]) -> str:
    lines = ["x,resolution_ms,metric,class,mean,std"]
    for x, res, metric, label, mean, std in classwise:
        lines.append(f"{x},{res:.6f},{metric},{label},{mean:.12g},{std:.12g}")
    return "\n".join(lines) + "\n"


def parse_results_csv(text: str) -> list[tuple]:
    rows = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        x, res, metric, mean, std = line.split(",")
        rows.append((int(x), float(res), metric, float(mean), float(std)))
    return rows


def parse_classwise_csv(text: str) -> list[tuple]:
    rows = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        x, res, metric, label, mean, std = line.split(",")
        rows.append((int(x), float(res), metric, label, float(mean), float(std)))
    return rows


def render_metric_chart(results: Sequence[tuple]) -> str:
    """Headline metrics vs output resolution, the Figure-2 analogue."""
    series = []
    for metric in HEADLINE_METRICS:
        points = sorted((res, mean, std) for x, res, m, mean, std in results if m == metric)
        if points:
            series.append(
                Series(
                    metric,
                    tuple(p[0] for p in points),
                    tuple(p[1] for p in points),
                    tuple(p[2] for p in points),
                )
            )
    return line_chart(
        "Metrics vs temporal output resolution",
        "output resolution (ms)",
        "score",
        series,
    )


def render_classwise_chart(classwise: Sequence[tuple], metric: str = "event_f1") -> str:
    """Per-class event F1 vs resolution, the Figure-3 analogue."""
    labels = sorted({label for _, _, m, label, _, _ in classwise if m == metric})
    series = []
    for label in labels:
        points = sorted(
            (res, mean) for x, res, m, lab, mean, std in classwise
            if m == metric and lab == label
        )
        series.append(
            Series(label, tuple(p[0] for p in points), tuple(p[1] for p in points))
        )
    return line_chart(
        f"Class-wise {metric} vs temporal output resolution",
        "output resolution (ms)",
        metric,
        series,
    )


def run_sweep(spec: SweepSpec, log=None) -> dict:
    """Execute the full sweep; returns the output paths and aggregated rows."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(spec.data_dir) if spec.data_dir else out / "dataset"
    if not (data_dir / "classes.txt").exists():
        if log:
            log(f"generating dataset at {data_dir} (scale {spec.scale})")
        gen_dataset(
            scaled_spec(
                spec.scale, seed=spec.data_seed, num_mel_bins=spec.model.num_mel_bins
            ),
            data_dir,
        )
    data = load_dataset(data_dir)

    jobs = []
    for x in sorted(spec.x_values):
        for seed in sorted(spec.seeds):
            run_dir = out / "runs" / f"x{x}_seed{seed}"
            jobs.append((str(data_dir), str(run_dir), x, seed, spec.model, spec.train))

    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(jobs) > 1:
        import multiprocessing

        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            per_job = pool.map(_run_job, jobs)
    else:
        per_job = []
        for job in jobs:
            if log:
                log(f"training x={job[2]} seed={job[3]}")
            per_job.append(_run_job(job))
    rows = [row for job_rows in per_job for row in job_rows]

    runs_csv = serialize_runs_csv(rows)
    (out / "runs.csv").write_text(runs_csv)
    results, classwise = aggregate_rows(rows, data.clip_duration, data.train.num_frames)
    results_csv = serialize_results_csv(results)
    classwise_csv = serialize_classwise_csv(classwise)
    (out / "results.csv").write_text(results_csv)
    (out / "results_classwise.csv").write_text(classwise_csv)
    # Charts render from the parsed CSV text so they regenerate identically
    # from the files alone.
    (out / "fig_metrics.svg").write_text(render_metric_chart(parse_results_csv(results_csv)))
    (out / "fig_event_f1_classwise.svg").write_text(
        render_classwise_chart(parse_classwise_csv(classwise_csv))
    )
    return {
        "out_dir": str(out),
        "data_dir": str(data_dir),
        "results": results,
        "classwise": classwise,
        "runs": sorted(rows),
    }
