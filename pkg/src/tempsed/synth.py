"""Synthetic band-pattern corpus generation and dataset loading.

Each class occupies a distinct mel-bin band; an event adds band-limited energy
over its time span (edge frames scaled by their overlap fraction) on top of
exponential background noise, then everything is log-compressed like a real
spectrogram. Half the classes emit short events, half long ones, which is the
contrast the resolution sweep needs. Pools mirror the weak / strong /
unlabeled / eval split; generation is byte-deterministic per seed.

On-disk layout of a dataset directory:
    classes.txt      one class name per line
    durations.tsv    clip_id <TAB> duration, every clip
    pools.tsv        clip_id <TAB> weak|strong|unlabeled|eval
    weak.tsv         clip_id <TAB> comma-joined tags (possibly empty)
    strong.tsv       event roster TSV for the strong pool
    eval.tsv         event roster TSV for the evaluation split
    stats.tsv        per-bin standardization stats fitted on the train pools
    features/*.feat  raw (unstandardized) log-mel maps, magic TPFT1
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .events import (
    DEFAULT_CLASSES,
    Event,
    EventRoster,
    RosterError,
    TimeInterval,
    parse_duration_manifest,
    parse_roster_file,
    serialize_duration_manifest,
    serialize_roster,
)
from .features import LOG_EPS, StandardizationStats, fit_standardization, parse_stats, serialize_stats
from .training import TrainingData

FEATURE_MAGIC = b"TPFT1"

# Full-corpus pool sizes that --scale multiplies down.
FULL_WEAK = 1578
FULL_STRONG = 10000
FULL_UNLABELED = 14412
FULL_EVAL = 1168


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    clip_duration: float = 10.0
    num_frames: int = 608
    num_mel_bins: int = 32
    weak_count: int = 16
    strong_count: int = 100
    unlabeled_count: int = 144
    eval_count: int = 12
    events_min: int = 1
    events_max: int = 3
    noise_level: float = 0.05
    event_power: float = 1.0
    # Short events sit below one coarse frame yet above the median filter's
    # fine-resolution cutoff (~0.26 s at 33 ms frames), so the resolution
    # contrast shows up instead of the filter erasing them everywhere.
    short_length: tuple[float, float] = (0.2, 0.3)
    long_length: tuple[float, float] = (3.0, 5.0)
    num_short_classes: int = 5
    min_same_class_gap: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ValueError("need at least two distinct classes")
        counts = (self.weak_count, self.strong_count, self.unlabeled_count, self.eval_count)
        if any(c < 1 for c in counts):
            raise ValueError(f"every pool needs at least one clip, got {counts}")
        if self.num_mel_bins < len(self.classes):
            raise ValueError("need at least one mel bin per class for distinct bands")
        if not 0 < self.events_min <= self.events_max:
            raise ValueError("invalid events-per-clip range")
        if self.noise_level < 0 or self.event_power <= 0:
            raise ValueError("noise_level must be >= 0 and event_power > 0")
        if not 0 <= self.num_short_classes <= len(self.classes):
            raise ValueError("num_short_classes out of range")
        for lo, hi in (self.short_length, self.long_length):
            if not 0 < lo <= hi or hi > self.clip_duration:
                raise ValueError("event length ranges must fit the clip")

    @property
    def frame_duration(self) -> float:
        return self.clip_duration / self.num_frames

    def class_band(self, class_index: int) -> tuple[int, int]:
        """Disjoint mel-bin range [lo, hi) owned by one class."""
        width = self.num_mel_bins // len(self.classes)
        return class_index * width, (class_index + 1) * width

    def length_range(self, class_index: int) -> tuple[float, float]:
        if class_index < self.num_short_classes:
            return self.short_length
        return self.long_length


def scaled_spec(scale: float, seed: int = 0, **overrides) -> SyntheticSpec:
    """Pool sizes as round(scale * full counts), at least one clip each."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    counts = dict(
        weak_count=max(1, round(FULL_WEAK * scale)),
        strong_count=max(1, round(FULL_STRONG * scale)),
        unlabeled_count=max(1, round(FULL_UNLABELED * scale)),
        eval_count=max(1, round(FULL_EVAL * scale)),
    )
    counts.update(overrides)
    return SyntheticSpec(seed=seed, **counts)


def _place_events(spec: SyntheticSpec, rng: np.random.Generator) -> list[Event]:
    """Sample 1..3 events; same-class events keep a minimum gap, placements
    that cannot satisfy it after a few tries are dropped."""
    count = int(rng.integers(spec.events_min, spec.events_max + 1))
    events: list[Event] = []
    for _ in range(count):
        class_index = int(rng.integers(len(spec.classes)))
        label = spec.classes[class_index]
        lo, hi = spec.length_range(class_index)
        length = float(rng.uniform(lo, hi))
        for _ in range(10):
            onset = float(rng.uniform(0.0, spec.clip_duration - length))
            offset = onset + length
            clear = all(
                onset >= e.interval.offset + spec.min_same_class_gap
                or offset <= e.interval.onset - spec.min_same_class_gap
                for e in events
                if e.class_label == label
            )
            if clear:
                events.append(
                    Event(label, TimeInterval(round(onset, 6), round(offset, 6)))
                )
                break
    return events


def _synth_map(
    spec: SyntheticSpec, events: Iterable[Event], rng: np.random.Generator
) -> np.ndarray:
    """Power-domain synthesis, then log compression; float32 (T, F)."""
    fd = spec.frame_duration
    power = spec.noise_level * rng.exponential(
        size=(spec.num_frames, spec.num_mel_bins)
    )
    index = {label: i for i, label in enumerate(spec.classes)}
    for ev in events:
        amp = spec.event_power * float(rng.uniform(0.8, 1.2))
        b_lo, b_hi = spec.class_band(index[ev.class_label])
        onset, offset = ev.interval.onset, ev.interval.offset
        lo = max(0, int(math.floor(onset / fd)))
        hi = min(spec.num_frames, int(math.ceil(offset / fd)))
        t = np.arange(lo, hi)
        frac = (np.minimum(offset, (t + 1) * fd) - np.maximum(onset, t * fd)) / fd
        power[lo:hi, b_lo:b_hi] += amp * np.maximum(frac, 0.0)[:, None]
    return np.log(power + LOG_EPS).astype(np.float32)


def serialize_feature_map(clip_id: str, frames: np.ndarray, frame_hop: float) -> bytes:
    """TPFT1 block, same framing as posteriors but without the [0,1] bound."""
    cid = clip_id.encode("utf-8")
    frames = np.asarray(frames)
    header = struct.pack("<I", len(cid)) + cid + struct.pack(
        "<IId", frames.shape[0], frames.shape[1], frame_hop
    )
    return FEATURE_MAGIC + header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def parse_feature_map(data: bytes) -> tuple[str, np.ndarray, float]:
    if data[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise RosterError(f"bad feature magic {data[:len(FEATURE_MAGIC)]!r}")
    pos = len(FEATURE_MAGIC)
    (cid_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    clip_id = data[pos : pos + cid_len].decode("utf-8")
    pos += cid_len
    frames, bins, hop = struct.unpack_from("<IId", data, pos)
    pos += 16
    expected = pos + frames * bins * 4
    if len(data) != expected:
        raise RosterError(f"feature payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", count=frames * bins, offset=pos)
    return clip_id, values.reshape(frames, bins).copy(), hop


def serialize_weak_tags(tags: Mapping[str, frozenset[str]]) -> bytes:
    lines = [f"{clip}\t{','.join(sorted(tags[clip]))}\n" for clip in sorted(tags)]
    return "".join(lines).encode("utf-8")


def parse_weak_tags(data: bytes | str) -> dict[str, frozenset[str]]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    tags: dict[str, frozenset[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise RosterError(f"line {lineno}: expected 2 tab-separated fields")
        labels = [t for t in fields[1].split(",") if t]
        tags[fields[0]] = frozenset(labels)
    return tags


_POOLS = ("weak", "strong", "unlabeled", "eval")


def gen_dataset(spec: SyntheticSpec, out_dir) -> None:
    """Generate the corpus on disk; byte-identical for a fixed spec."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    durations: dict[str, float] = {}
    pools: dict[str, str] = {}
    weak_tags: dict[str, frozenset[str]] = {}
    strong_rosters: list[EventRoster] = []
    eval_rosters: list[EventRoster] = []
    train_maps: list[np.ndarray] = []

    counts = {
        "weak": spec.weak_count,
        "strong": spec.strong_count,
        "unlabeled": spec.unlabeled_count,
        "eval": spec.eval_count,
    }
    for pool in _POOLS:
        for i in range(counts[pool]):
            clip_id = f"synth_{pool}_{i:05d}"
            events = _place_events(spec, rng)
            frames = _synth_map(spec, events, rng)
            (out / "features" / f"{clip_id}.feat").write_bytes(
                serialize_feature_map(clip_id, frames, spec.frame_duration)
            )
            durations[clip_id] = spec.clip_duration
            pools[clip_id] = pool
            roster = EventRoster(clip_id, spec.clip_duration, tuple(events))
            if pool == "weak":
                weak_tags[clip_id] = frozenset(e.class_label for e in events)
            elif pool == "strong":
                strong_rosters.append(roster)
            elif pool == "eval":
                eval_rosters.append(roster)
            if pool != "eval":
                train_maps.append(frames)

    stats = fit_standardization(train_maps)
    (out / "classes.txt").write_bytes("".join(f"{c}\n" for c in spec.classes).encode())
    (out / "durations.tsv").write_bytes(serialize_duration_manifest(durations))
    # eval-scoped manifest so `score --durations` does not pull train clips
    # into the reference
    (out / "eval_durations.tsv").write_bytes(
        serialize_duration_manifest(
            {cid: d for cid, d in durations.items() if pools[cid] == "eval"}
        )
    )
    (out / "pools.tsv").write_bytes(
        "".join(f"{clip}\t{pools[clip]}\n" for clip in sorted(pools)).encode()
    )
    (out / "weak.tsv").write_bytes(serialize_weak_tags(weak_tags))
    (out / "strong.tsv").write_bytes(serialize_roster(strong_rosters))
    (out / "eval.tsv").write_bytes(serialize_roster(eval_rosters))
    (out / "stats.tsv").write_bytes(serialize_stats(stats))


@dataclass(frozen=True)
class LoadedDataset:
    """A dataset directory pulled into memory, features standardized."""

    classes: tuple[str, ...]
    clip_duration: float
    frame_hop: float
    stats: StandardizationStats
    train: TrainingData
    eval_features: dict[str, np.ndarray]
    eval_rosters: dict[str, EventRoster]
    eval_tags: dict[str, frozenset[str]]
    durations: dict[str, float]


def load_dataset(path) -> LoadedDataset:
    root = Path(path)
    classes = tuple(
        line.strip()
        for line in (root / "classes.txt").read_text().splitlines()
        if line.strip()
    )
    durations = parse_duration_manifest((root / "durations.tsv").read_bytes())
    stats = parse_stats((root / "stats.tsv").read_bytes())

    pool_of: dict[str, str] = {}
    for lineno, line in enumerate((root / "pools.tsv").read_text().splitlines(), 1):
        if not line.strip():
            continue
        clip_id, _, pool = line.partition("\t")
        if pool not in _POOLS:
            raise RosterError(f"pools.tsv line {lineno}: unknown pool {pool!r}")
        pool_of[clip_id] = pool

    features: dict[str, np.ndarray] = {}
    hop = None
    for clip_id in sorted(pool_of):
        cid, frames, frame_hop = parse_feature_map(
            (root / "features" / f"{clip_id}.feat").read_bytes()
        )
        if cid != clip_id:
            raise RosterError(f"feature file for {clip_id} declares clip {cid}")
        features[clip_id] = (
            ((frames - stats.mean) / stats.std).astype(np.float32)
        )
        if hop is None:
            hop = frame_hop
        elif hop != frame_hop:
            raise RosterError("feature files disagree on the frame hop")

    weak_tags = parse_weak_tags((root / "weak.tsv").read_bytes())
    strong = {
        r.clip_id: r
        for r in parse_roster_file((root / "strong.tsv").read_bytes(), classes, durations)
        if pool_of.get(r.clip_id) == "strong"
    }
    evaluation = {
        r.clip_id: r
        for r in parse_roster_file((root / "eval.tsv").read_bytes(), classes, durations)
        if pool_of.get(r.clip_id) == "eval"
    }

    by_pool = {p: sorted(c for c, q in pool_of.items() if q == p) for p in _POOLS}
    # Strong/eval clips with no surviving events appear only via the manifest.
    for clip_id in by_pool["strong"]:
        strong.setdefault(clip_id, EventRoster(clip_id, durations[clip_id]))
    for clip_id in by_pool["eval"]:
        evaluation.setdefault(clip_id, EventRoster(clip_id, durations[clip_id]))

    clip_durations = {durations[c] for c in pool_of}
    if len(clip_durations) != 1:
        raise RosterError("training requires a uniform clip duration")
    clip_duration = clip_durations.pop()

    tag_matrix = np.zeros((len(by_pool["weak"]), len(classes)), dtype=np.float32)
    col = {label: i for i, label in enumerate(classes)}
    for i, clip_id in enumerate(by_pool["weak"]):
        for label in weak_tags.get(clip_id, frozenset()):
            if label not in col:
                raise RosterError(f"weak tag {label!r} of {clip_id} not in inventory")
            tag_matrix[i, col[label]] = 1.0

    train = TrainingData(
        classes=classes,
        weak_features=np.stack([features[c] for c in by_pool["weak"]]),
        weak_targets=tag_matrix,
        strong_features=np.stack([features[c] for c in by_pool["strong"]]),
        strong_rosters=tuple(strong[c] for c in by_pool["strong"]),
        unlabeled_features=np.stack([features[c] for c in by_pool["unlabeled"]]),
        clip_duration=clip_duration,
    )
    return LoadedDataset(
        classes=classes,
        clip_duration=clip_duration,
        frame_hop=hop,
        stats=stats,
        train=train,
        eval_features={c: features[c] for c in by_pool["eval"]},
        eval_rosters=evaluation,
        eval_tags={c: frozenset(e.class_label for e in evaluation[c].events) for c in by_pool["eval"]},
        durations=durations,
    )
