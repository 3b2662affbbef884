"""Evaluation measures: clip F1, segment F1, event F1, and PSDS.

Clip and segment F1 are micro-averaged (counts pooled over classes), event F1
is macro-averaged with onset/offset collars, and PSDS follows the
intersection-criterion procedure: DTC validates detections, GTC scores
references, cross-triggers optionally inflate the effective FP rate, and the
final score is the normalized area under the effective-TPR staircase up to
max_efpr, with a class-instability penalty alpha_st on the across-class std.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .events import EventRoster, TimeInterval, intersection_duration, rasterize_events

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class PsdsParams:
    dtc: float
    gtc: float
    cttc: float | None
    alpha_st: float
    alpha_ct: float
    max_efpr: float

    def __post_init__(self) -> None:
        for name, value in (("dtc", self.dtc), ("gtc", self.gtc)):
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if self.cttc is not None and not 0.0 < self.cttc <= 1.0:
            raise ValueError(f"cttc must be in (0, 1] or absent, got {self.cttc}")
        if self.alpha_st < 0 or self.alpha_ct < 0:
            raise ValueError("alpha_st and alpha_ct must be non-negative")
        if self.max_efpr <= 0:
            raise ValueError(f"max_efpr must be positive, got {self.max_efpr}")


PSDS1 = PsdsParams(dtc=0.7, gtc=0.7, cttc=None, alpha_st=1.0, alpha_ct=0.0, max_efpr=100.0)
PSDS2 = PsdsParams(dtc=0.1, gtc=0.1, cttc=0.3, alpha_st=1.0, alpha_ct=0.5, max_efpr=100.0)


def default_thresholds(count: int = 50, lo: float = 0.01, hi: float = 0.99) -> np.ndarray:
    return np.linspace(lo, hi, count)


@dataclass(frozen=True)
class OperatingPointSet:
    """Decoded rosters per decision threshold, thresholds strictly increasing."""

    thresholds: tuple[float, ...]
    rosters: tuple[Mapping[str, EventRoster], ...]

    def __post_init__(self) -> None:
        if len(self.thresholds) != len(self.rosters):
            raise ValueError("one roster mapping per threshold required")
        if not self.thresholds:
            raise ValueError("need at least one operating point")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        object.__setattr__(self, "rosters", tuple(self.rosters))


@dataclass(frozen=True)
class F1Result:
    value: float
    per_class: dict[str, float]
    counts: dict[str, tuple[int, int, int]]  # class -> (tp, fp, fn)


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def clip_f1(
    predicted: Mapping[str, frozenset[str] | set[str]],
    reference: Mapping[str, frozenset[str] | set[str]],
    classes: Sequence[str],
) -> F1Result:
    """Micro-averaged tagging F1 over clip x class decisions.

    Arguments map clip_id to the set of predicted/annotated classes; the clip
    sets must coincide.
    """
    if set(predicted) != set(reference):
        raise ValueError("predicted and reference clip sets differ")
    counts = {c: [0, 0, 0] for c in classes}
    for clip_id, ref_tags in reference.items():
        pred_tags = predicted[clip_id]
        for label in classes:
            got, want = label in pred_tags, label in ref_tags
            if got and want:
                counts[label][0] += 1
            elif got:
                counts[label][1] += 1
            elif want:
                counts[label][2] += 1
    tp, fp, fn = (sum(c[i] for c in counts.values()) for i in range(3))
    return F1Result(
        _f1_from_counts(tp, fp, fn),
        {c: _f1_from_counts(*counts[c]) for c in classes},
        {c: tuple(counts[c]) for c in classes},
    )


def segment_f1(
    predicted: Mapping[str, EventRoster],
    reference: Mapping[str, EventRoster],
    classes: Sequence[str],
    segment: float = 1.0,
) -> F1Result:
    """Micro F1 over fixed 1 s segments; the final partial segment is scored.

    A segment is active for a class iff some event overlaps it by a strictly
    positive duration. Clips missing from the predictions count as empty.
    """
    extra = set(predicted) - set(reference)
    if extra:
        raise ValueError(f"predictions contain unknown clips: {sorted(extra)}")
    counts = {c: [0, 0, 0] for c in classes}
    for clip_id in sorted(reference):
        ref = reference[clip_id]
        num_segments = max(1, math.ceil(ref.duration / segment))
        ref_grid = rasterize_events(ref, segment, num_segments, classes)
        pred = predicted.get(clip_id)
        if pred is None or not pred.events:
            pred_grid = np.zeros_like(ref_grid)
        else:
            pred_grid = rasterize_events(pred, segment, num_segments, classes)
        for c, label in enumerate(classes):
            got, want = pred_grid[:, c] > 0, ref_grid[:, c] > 0
            counts[label][0] += int(np.sum(got & want))
            counts[label][1] += int(np.sum(got & ~want))
            counts[label][2] += int(np.sum(~got & want))
    tp, fp, fn = (sum(c[i] for c in counts.values()) for i in range(3))
    return F1Result(
        _f1_from_counts(tp, fp, fn),
        {c: _f1_from_counts(*counts[c]) for c in classes},
        {c: tuple(counts[c]) for c in classes},
    )


def _match_events(
    preds: list[TimeInterval],
    refs: list[TimeInterval],
    onset_collar: float,
    offset_collar: float,
    offset_fraction: float,
) -> int:
    """Greedy one-to-one matching in onset order; returns the TP count."""
    refs = sorted(refs, key=lambda iv: (iv.onset, iv.offset))
    matched = [False] * len(refs)
    tp = 0
    for p in sorted(preds, key=lambda iv: (iv.onset, iv.offset)):
        for i, r in enumerate(refs):
            if matched[i]:
                continue
            allowed_offset = max(offset_collar, offset_fraction * r.length)
            if abs(p.onset - r.onset) <= onset_collar and abs(p.offset - r.offset) <= allowed_offset:
                matched[i] = True
                tp += 1
                break
    assert sum(matched) == tp  # no reference is ever double-assigned
    return tp


def event_f1(
    predicted: Mapping[str, EventRoster],
    reference: Mapping[str, EventRoster],
    classes: Sequence[str],
    onset_collar: float = 0.2,
    offset_collar: float = 0.2,
    offset_fraction: float = 0.2,
) -> F1Result:
    """Macro-averaged event F1 with collars.

    A prediction matches a reference of its class iff |onset difference| <=
    onset_collar and |offset difference| <= max(offset_collar,
    offset_fraction * reference length). Matching is greedy in onset order and
    one-to-one. Classes absent from both references and predictions are
    excluded from the macro mean; the F1 of the remaining classes pools counts
    over all clips.
    """
    extra = set(predicted) - set(reference)
    if extra:
        raise ValueError(f"predictions contain unknown clips: {sorted(extra)}")
    counts = {c: [0, 0, 0] for c in classes}
    present = set()
    for clip_id in sorted(reference):
        ref = reference[clip_id]
        pred = predicted.get(clip_id)
        pred_events = pred.events if pred is not None else ()
        for label in classes:
            p = [e.interval for e in pred_events if e.class_label == label]
            r = [e.interval for e in ref.events if e.class_label == label]
            if not p and not r:
                continue
            present.add(label)
            tp = _match_events(p, r, onset_collar, offset_collar, offset_fraction)
            counts[label][0] += tp
            counts[label][1] += len(p) - tp
            counts[label][2] += len(r) - tp
    per_class = {c: _f1_from_counts(*counts[c]) for c in classes if c in present}
    macro = float(np.mean([per_class[c] for c in per_class])) if per_class else 0.0
    return F1Result(macro, per_class, {c: tuple(counts[c]) for c in present})


@dataclass(frozen=True)
class PsdsResult:
    score: float
    # class -> (efpr support points ascending, best achievable TPR at each)
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _operating_point_rates(
    ops: OperatingPointSet,
    reference: Mapping[str, EventRoster],
    classes: Sequence[str],
    params: PsdsParams,
    total_duration: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per (operating point, class): TPR and effective FPR in per-hour units.

    Returns (tpr, efpr, evaluated) where evaluated marks classes with at
    least one reference event.
    """
    ref_by_clip: dict[str, dict[str, list[TimeInterval]]] = {}
    ref_totals = {c: 0 for c in classes}
    for clip_id, roster in reference.items():
        per_class = ref_by_clip.setdefault(clip_id, {})
        for ev in roster.events:
            if ev.class_label not in ref_totals:
                raise ValueError(f"reference class {ev.class_label!r} not in inventory")
            per_class.setdefault(ev.class_label, []).append(ev.interval)
            ref_totals[ev.class_label] += 1

    n_ops, n_cls = len(ops.thresholds), len(classes)
    tpr = np.zeros((n_ops, n_cls))
    efpr = np.zeros((n_ops, n_cls))
    hours = total_duration / SECONDS_PER_HOUR
    for k, rosters in enumerate(ops.rosters):
        extra = set(rosters) - set(reference)
        if extra:
            raise ValueError(f"operating point {k} predicts unknown clips: {sorted(extra)}")
        fp = {c: 0 for c in classes}
        ct = {c: {o: 0 for o in classes} for c in classes}
        hits = {c: 0 for c in classes}
        for clip_id in sorted(reference):
            clip_refs = ref_by_clip.get(clip_id, {})
            pred = rosters.get(clip_id)
            valid: dict[str, list[TimeInterval]] = {}
            pred_events = pred.events if pred is not None else ()
            for ev in pred_events:
                label = ev.class_label
                if label not in ref_totals:
                    raise ValueError(f"predicted class {label!r} not in inventory")
                same = clip_refs.get(label, [])
                inter = sum(intersection_duration(ev.interval, r) for r in same)
                if inter / ev.interval.length >= params.dtc:
                    valid.setdefault(label, []).append(ev.interval)
                else:
                    fp[label] += 1
                    if params.cttc is not None:
                        for other in classes:
                            if other == label:
                                continue
                            cross = clip_refs.get(other, [])
                            inter_ct = sum(
                                intersection_duration(ev.interval, r) for r in cross
                            )
                            if inter_ct / ev.interval.length >= params.cttc:
                                ct[label][other] += 1
            for label, refs in clip_refs.items():
                dets = valid.get(label, [])
                for r in refs:
                    covered = sum(intersection_duration(d, r) for d in dets)
                    if covered / r.length >= params.gtc:
                        hits[label] += 1
        for c, label in enumerate(classes):
            if ref_totals[label]:
                tpr[k, c] = hits[label] / ref_totals[label]
            rate = fp[label] / hours
            if params.cttc is not None and n_cls > 1:
                ct_rates = [ct[label][o] / hours for o in classes if o != label]
                rate += params.alpha_ct * float(np.mean(ct_rates))
            efpr[k, c] = rate
    evaluated = np.array([ref_totals[c] > 0 for c in classes])
    return tpr, efpr, evaluated


def _staircase(efpr: np.ndarray, tpr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Support points of e -> max{tpr : efpr <= e}: efprs ascending with the
    running best TPR; anchored at 0 below the first point."""
    order = np.argsort(efpr, kind="stable")
    xs = efpr[order]
    ys = np.maximum.accumulate(tpr[order])
    return xs, ys


def _tpr_at(xs: np.ndarray, ys: np.ndarray, budget: float) -> float:
    idx = np.searchsorted(xs, budget, side="right") - 1
    return float(ys[idx]) if idx >= 0 else 0.0


def psds(
    ops: OperatingPointSet,
    reference: Mapping[str, EventRoster],
    classes: Sequence[str],
    params: PsdsParams,
    total_duration: float | None = None,
) -> PsdsResult:
    """Polyphonic sound detection score in [0, 1].

    total_duration defaults to the summed reference clip durations. Classes
    with zero reference events are excluded from the across-class mean/std.
    """
    if total_duration is None:
        total_duration = sum(r.duration for r in reference.values())
    if total_duration <= 0:
        raise ValueError("total duration must be positive")
    tpr, efpr, evaluated = _operating_point_rates(
        ops, reference, classes, params, total_duration
    )
    if not evaluated.any():
        raise ValueError("no reference events in any class")

    curves = {}
    stairs = []
    for c, label in enumerate(classes):
        if not evaluated[c]:
            continue
        xs, ys = _staircase(efpr[:, c], tpr[:, c])
        curves[label] = (xs, ys)
        stairs.append((xs, ys))

    breakpoints = np.unique(
        np.concatenate(
            [np.array([0.0, params.max_efpr])]
            + [xs[xs <= params.max_efpr] for xs, _ in stairs]
        )
    )
    area = 0.0
    for left, right in zip(breakpoints[:-1], breakpoints[1:]):
        values = np.array([_tpr_at(xs, ys, left) for xs, ys in stairs])
        etpr = max(0.0, float(values.mean() - params.alpha_st * values.std()))
        area += etpr * float(right - left)
    return PsdsResult(area / params.max_efpr, curves)


def psds_classwise(
    ops: OperatingPointSet,
    reference: Mapping[str, EventRoster],
    classes: Sequence[str],
    params: PsdsParams,
    total_duration: float | None = None,
) -> dict[str, float]:
    """Per-class PSDS: each class on its own with alpha_st forced to 0 (the
    instability penalty is across classes); cross-trigger handling unchanged."""
    if total_duration is None:
        total_duration = sum(r.duration for r in reference.values())
    if total_duration <= 0:
        raise ValueError("total duration must be positive")
    tpr, efpr, evaluated = _operating_point_rates(
        ops, reference, classes, params, total_duration
    )
    scores = {}
    for c, label in enumerate(classes):
        if not evaluated[c]:
            continue
        xs, ys = _staircase(efpr[:, c], tpr[:, c])
        points = np.unique(np.concatenate([[0.0, params.max_efpr], xs[xs <= params.max_efpr]]))
        area = sum(
            float(_tpr_at(xs, ys, left)) * float(right - left)
            for left, right in zip(points[:-1], points[1:])
        )
        scores[label] = area / params.max_efpr
    return scores


@dataclass(frozen=True)
class MetricReport:
    """All headline scores plus per-class breakdowns, every value in [0, 1]."""

    clip_f1: float
    segment_f1: float
    event_f1_macro: float
    psds1: float
    psds2: float
    per_class: dict[str, dict[str, float]]  # metric -> class -> value

    def __post_init__(self) -> None:
        for name, value in self.headline().items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {value}")
        for metric, values in self.per_class.items():
            for label, value in values.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{metric}[{label}] out of [0, 1]: {value}")

    def headline(self) -> dict[str, float]:
        return {
            "clip_f1": self.clip_f1,
            "segment_f1": self.segment_f1,
            "event_f1_macro": self.event_f1_macro,
            "psds1": self.psds1,
            "psds2": self.psds2,
        }


def serialize_report(report: MetricReport) -> str:
    """CSV rows of (metric, class-or-ALL, value)."""
    lines = ["metric,class,value"]
    for name, value in report.headline().items():
        lines.append(f"{name},ALL,{value:.12g}")
    for metric in sorted(report.per_class):
        for label in sorted(report.per_class[metric]):
            lines.append(f"{metric},{label},{report.per_class[metric][label]:.12g}")
    return "\n".join(lines) + "\n"


# Per-class breakdowns are stored under the plain metric name; only the
# headline macro differs.
_PER_CLASS_KEY = {"event_f1_macro": "event_f1"}


def format_report(report: MetricReport) -> str:
    """Human-readable table: headline row after per-class columns."""
    metrics = list(report.headline())
    labels = sorted({label for values in report.per_class.values() for label in values})
    width = max([len(x) for x in labels + ["class"]]) if labels else 5
    header = "class".ljust(width) + "".join(f"{m:>18}" for m in metrics)
    rows = [header]
    for label in labels:
        cells = []
        for m in metrics:
            value = report.per_class.get(_PER_CLASS_KEY.get(m, m), {}).get(label)
            cells.append(f"{value:>18.4f}" if value is not None else " " * 17 + "-")
        rows.append(label.ljust(width) + "".join(cells))
    rows.append(
        "ALL".ljust(width)
        + "".join(f"{report.headline()[m]:>18.4f}" for m in metrics)
    )
    return "\n".join(rows) + "\n"
