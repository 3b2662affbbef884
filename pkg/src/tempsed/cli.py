"""Command-line interface.

Subcommands:
    gen-data      write a synthetic dataset to a directory
    train         train one model on a dataset directory
    postprocess   decode a posterior file into an event roster TSV
    score         compute metrics for predictions against references
    sweep         run the temporal-resolution study end to end

Model and training settings come from built-in defaults, then an optional
config file (`key = value` lines), then per-field flags, later sources
winning. Every config field is exposed as a flag; see `--help` per
subcommand.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .configio import MODEL_FIELDS, TRAIN_FIELDS, _convert, parse_config_text
from .events import (
    POSTERIOR_MAGIC,
    EventRoster,
    RosterError,
    parse_duration_manifest,
    parse_posteriors,
    parse_posteriors_csv,
    parse_roster_file,
    serialize_posteriors,
    serialize_roster,
)
from .metrics import (
    PSDS1,
    PSDS2,
    MetricReport,
    clip_f1,
    event_f1,
    format_report,
    psds,
    psds_classwise,
    segment_f1,
    serialize_report,
)
from .model import ModelConfig, save_checkpoint
from .postprocess import DecodeConfig, decode_posteriors
from .sweep import (
    SweepSpec,
    build_operating_points,
    desk_model_config,
    desk_train_config,
    eval_forward,
    run_sweep,
)
from .synth import gen_dataset, load_dataset, scaled_spec
from .training import TrainConfig, serialize_history, train_loop

_FIELD_HELP = {
    "temporal_pool_layers": "conv blocks that pool time by 2 (the x of the study)",
    "conv_channels": "comma list of conv output channels, one per block",
    "dropout_rate": "dropout rate after every conv block",
    "gru_hidden": "GRU hidden units per direction",
    "gru_layers": "stacked bidirectional GRU layers",
    "num_classes": "output classes (training overrides this from the dataset)",
    "num_mel_bins": "input mel bins (training overrides this from the dataset)",
    "epochs": "training epochs",
    "batches_per_epoch": "optimizer steps per epoch",
    "weak_per_batch": "clip-labeled samples per batch",
    "strong_per_batch": "event-labeled samples per batch",
    "unlabeled_per_batch": "unlabeled samples per batch",
    "ema_decay": "teacher EMA decay",
    "consistency_weight": "weight of the student-teacher MSE term",
    "classification_weight": "weight of the supervised BCE terms",
    "lr_peak": "learning rate at the end of the ramp",
    "ramp_steps": "steps of exponential ramp-up",
    "lr_decay": "per-step multiplicative decay after the ramp",
    "mixup_prob": "probability of mixing a batch",
    "mixup_beta": "Beta(a, a) parameter for mixup weights",
    "seed": "seed for all training randomness",
    "teacher_dropout": "true/false: keep dropout active in the teacher forward",
    "dtype": "float32 or float64",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model and training fields")
    for name in list(MODEL_FIELDS) + list(TRAIN_FIELDS):
        group.add_argument(
            "--" + name.replace("_", "-"),
            dest="cfg_" + name,
            metavar="V",
            help=_FIELD_HELP[name],
        )


def _resolve_configs(args, desk: bool) -> tuple[ModelConfig, TrainConfig]:
    model = desk_model_config() if desk else ModelConfig()
    train = desk_train_config() if desk else TrainConfig()
    if getattr(args, "config", None):
        model, train = parse_config_text(Path(args.config).read_text(), model, train)
    model_kw, train_kw = {}, {}
    for name, ann in MODEL_FIELDS.items():
        raw = getattr(args, "cfg_" + name, None)
        if raw is not None:
            model_kw[name] = _convert(raw, ann, name)
    for name, ann in TRAIN_FIELDS.items():
        raw = getattr(args, "cfg_" + name, None)
        if raw is not None:
            train_kw[name] = _convert(raw, ann, name)
    if model_kw:
        model = model.with_overrides(**model_kw)
    if train_kw:
        train = train.with_overrides(**train_kw)
    return model, train


def _read_classes(path: str) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    classes = [ln for ln in lines if ln]
    if not classes:
        raise ValueError(f"no class labels in {path}")
    return classes


def _read_posterior_file(path: str):
    data = Path(path).read_bytes()
    if data.startswith(POSTERIOR_MAGIC):
        return parse_posteriors(data)
    return parse_posteriors_csv(data.decode("utf-8"))


def _scan_roster_labels(text: str) -> list[str]:
    """Class labels present in a roster TSV, header tolerated."""
    labels = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.rstrip("\n").split("\t")
        if not line.strip() or len(fields) != 4:
            continue
        try:
            float(fields[1]), float(fields[2])
        except ValueError:
            if lineno == 1:
                continue
            raise
        labels.add(fields[3])
    return sorted(labels)


def cmd_gen_data(args) -> int:
    spec = scaled_spec(args.scale, seed=args.seed, num_mel_bins=args.mel_bins)
    gen_dataset(spec, args.out)
    print(
        f"wrote dataset to {args.out}: "
        f"{spec.weak_count} weak / {spec.strong_count} strong / "
        f"{spec.unlabeled_count} unlabeled / {spec.eval_count} eval clips"
    )
    return 0


def cmd_train(args) -> int:
    model_base, train_config = _resolve_configs(args, args.desk)
    data = load_dataset(args.data)
    model_config = model_base.with_overrides(
        num_classes=len(data.classes),
        num_mel_bins=data.train.weak_features.shape[2],
    )
    log = None if args.quiet else print
    if log:
        log(
            f"training x={model_config.temporal_pool_layers} "
            f"seed={train_config.seed} for {train_config.epochs} epochs"
        )
    state, history = train_loop(data.train, model_config, train_config, log=log)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.tpmd", state.student, model_config)
    (out / "history.csv").write_text(serialize_history(history))
    posteriors, _ = eval_forward(state.student, model_config, data)
    (out / "posteriors.bin").write_bytes(serialize_posteriors(posteriors))
    print(f"wrote checkpoint.tpmd, history.csv, posteriors.bin to {out}")
    return 0


def cmd_postprocess(args) -> int:
    classes = _read_classes(args.classes)
    matrices = _read_posterior_file(args.posteriors)
    durations = (
        parse_duration_manifest(Path(args.durations).read_bytes())
        if args.durations
        else {}
    )
    decode = DecodeConfig(
        threshold=args.threshold,
        median_window=args.median_window,
        merge_gap=args.merge_gap,
    )
    rosters = [
        decode_posteriors(m, classes, decode, clip_duration=durations.get(m.clip_id))
        for m in matrices
    ]
    Path(args.out).write_bytes(serialize_roster(rosters))
    total = sum(len(r.events) for r in rosters)
    print(f"decoded {total} events from {len(rosters)} clips into {args.out}")
    return 0


def cmd_score(args) -> int:
    if (args.events is None) == (args.posteriors is None):
        raise ValueError("provide exactly one of --events and --posteriors")

    ref_text = Path(args.reference).read_text()
    if args.classes:
        classes = _read_classes(args.classes)
    else:
        classes = _scan_roster_labels(ref_text)
        if args.posteriors:
            raise ValueError("--posteriors scoring needs --classes to name columns")
    durations = (
        parse_duration_manifest(Path(args.durations).read_bytes())
        if args.durations
        else None
    )
    reference = {r.clip_id: r for r in parse_roster_file(ref_text, classes, durations)}
    if not reference:
        raise ValueError("reference roster is empty")

    decode = DecodeConfig(
        threshold=args.threshold,
        median_window=args.median_window,
        merge_gap=args.merge_gap,
    )
    ops = None
    if args.events:
        pred_rosters = {
            r.clip_id: r
            for r in parse_roster_file(Path(args.events).read_text(), classes)
        }
        extra = sorted(set(pred_rosters) - set(reference))
        if extra:
            raise ValueError(f"predictions name unknown clips: {', '.join(extra)}")
    else:
        matrices = _read_posterior_file(args.posteriors)
        extra = sorted({m.clip_id for m in matrices} - set(reference))
        if extra:
            raise ValueError(f"posteriors name unknown clips: {', '.join(extra)}")
        ref_durations = {cid: r.duration for cid, r in reference.items()}
        pred_rosters = {
            m.clip_id: decode_posteriors(
                m, classes, decode, clip_duration=ref_durations[m.clip_id]
            )
            for m in matrices
        }
        ops = build_operating_points(matrices, classes, ref_durations, decode)
    missing = sorted(set(reference) - set(pred_rosters))
    for cid in missing:
        print(f"warning: no prediction for clip {cid!r}, scoring as empty", file=sys.stderr)
        pred_rosters[cid] = EventRoster(cid, reference[cid].duration, ())

    available = ["clip_f1", "segment_f1", "event_f1"]
    if ops is not None:
        available += ["psds1", "psds2"]
    selected = [m.strip() for m in args.metrics.split(",")] if args.metrics else available
    unknown = [m for m in selected if m not in ("clip_f1", "segment_f1", "event_f1", "psds1", "psds2")]
    if unknown:
        raise ValueError(f"unknown metrics: {', '.join(unknown)}")
    needs_ops = [m for m in selected if m.startswith("psds") and ops is None]
    if needs_ops:
        raise ValueError(f"{', '.join(needs_ops)} require --posteriors")

    rows: list[tuple[str, str, float]] = []
    values: dict[str, float] = {}
    per_class: dict[str, dict[str, float]] = {}
    if "clip_f1" in selected:
        ref_tags = {cid: {e.class_label for e in r.events} for cid, r in reference.items()}
        pred_tags = {cid: {e.class_label for e in r.events} for cid, r in pred_rosters.items()}
        res = clip_f1(pred_tags, ref_tags, classes)
        values["clip_f1"], per_class["clip_f1"] = res.value, res.per_class
    if "segment_f1" in selected:
        res = segment_f1(pred_rosters, reference, classes)
        values["segment_f1"], per_class["segment_f1"] = res.value, res.per_class
    if "event_f1" in selected:
        res = event_f1(pred_rosters, reference, classes)
        values["event_f1"], per_class["event_f1"] = res.value, res.per_class
    for name, params in (("psds1", PSDS1), ("psds2", PSDS2)):
        if name in selected:
            values[name] = psds(ops, reference, classes, params).score
            per_class[name] = psds_classwise(ops, reference, classes, params)
    for name in selected:
        rows.append((name, "ALL", values[name]))
    for name in selected:
        for label in sorted(per_class.get(name, {})):
            rows.append((name, label, per_class[name][label]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if set(selected) == {"clip_f1", "segment_f1", "event_f1", "psds1", "psds2"}:
        report = MetricReport(
            clip_f1=values["clip_f1"],
            segment_f1=values["segment_f1"],
            event_f1_macro=values["event_f1"],
            psds1=values["psds1"],
            psds2=values["psds2"],
            per_class=per_class,
        )
        (out / "report.csv").write_text(serialize_report(report))
        text = format_report(report)
    else:
        csv_lines = ["metric,class,value"] + [f"{m},{c},{v:.12g}" for m, c, v in rows]
        (out / "report.csv").write_text("\n".join(csv_lines) + "\n")
        width = max(len(m) for m, _, _ in rows)
        width_c = max(len(c) for _, c, _ in rows)
        text = (
            "\n".join(f"{m.ljust(width)}  {c.rjust(width_c)}  {v:.4f}" for m, c, v in rows)
            + "\n"
        )
    (out / "report.txt").write_text(text)
    print(text, end="")
    print(f"wrote report.csv, report.txt to {out}")
    return 0


def cmd_sweep(args) -> int:
    model, train = _resolve_configs(args, desk=True)
    spec = SweepSpec(
        out_dir=args.out,
        data_dir=args.data,
        x_values=tuple(int(v) for v in args.x_values.split(",")),
        seeds=tuple(int(v) for v in args.seeds.split(",")),
        scale=args.scale,
        data_seed=args.data_seed,
        model=model,
        train=train,
    )
    log = None if args.quiet else print
    result = run_sweep(spec, log=log)
    print(f"sweep finished; results in {result['out_dir']}")
    for x, res, metric, mean, std in result["results"]:
        if metric == "event_f1_macro":
            print(f"  x={x} ({res:7.1f} ms): event F1 {mean:.3f} +- {std:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempsed",
        description="Temporal-resolution study toolkit for sound event detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scale", type=float, default=1.0, help="pool-size scale factor (0.01 = desk)")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--mel-bins", type=int, default=32, help="mel bins per frame")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--desk", action="store_true", help="start from desk-scale defaults instead of full-scale")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("postprocess", help="decode posteriors into an event roster TSV")
    p.add_argument("--posteriors", required=True, help="posterior file (binary or CSV)")
    p.add_argument("--classes", required=True, help="text file with one class label per line")
    p.add_argument("--out", required=True, help="output roster TSV path")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--median-window", type=float, default=0.5, help="median smoothing window (s)")
    p.add_argument("--merge-gap", type=float, default=0.2, help="merge events closer than this (s)")
    p.add_argument("--durations", help="clip_id<TAB>duration manifest to clip offsets")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("score", help="score predictions against reference rosters")
    p.add_argument("--reference", required=True, help="reference roster TSV")
    p.add_argument("--events", help="predicted roster TSV (F1 metrics only)")
    p.add_argument("--posteriors", help="posterior file; enables PSDS via 50 thresholds")
    p.add_argument("--classes", help="class inventory file; default: classes in the reference")
    p.add_argument("--durations", help="clip_id<TAB>duration manifest")
    p.add_argument("--metrics", help="comma list among clip_f1,segment_f1,event_f1,psds1,psds2")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--threshold", type=float, default=0.5, help="decode threshold (posteriors path)")
    p.add_argument("--median-window", type=float, default=0.5, help="median smoothing window (s)")
    p.add_argument("--merge-gap", type=float, default=0.2, help="merge gap (s)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="run the temporal-resolution sweep")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--data", help="existing dataset directory; default: generate under --out")
    p.add_argument("--x-values", default="1,2,3,4,5", help="comma list of temporal pooling depths")
    p.add_argument("--seeds", default="1,2,3", help="comma list of training seeds")
    p.add_argument("--scale", type=float, default=0.01, help="dataset scale when generating")
    p.add_argument("--data-seed", type=int, default=0, help="dataset generation seed")
    p.add_argument("--config", help="key = value config file applied over desk defaults")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RosterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
