"""Core event types and bit-exact interchange formats.

Times are seconds. Event rosters travel as DCASE-style TSV, posterior matrices
as a little-endian binary stream (magic ``TPRS1``) or a CSV fallback. All types
are immutable after construction and safe to share across workers; the
operations here are pure functions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_CLASSES = (
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
)

POSTERIOR_MAGIC = b"TPRS1"


class RosterError(ValueError):
    """Malformed roster, manifest, or posterior data."""


class AnnotationKind(Enum):
    """How a training clip is annotated. Exactly one kind per clip."""

    WEAK = "weak"
    STRONG = "strong"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class TimeInterval:
    """Time span in seconds. Zero-length and inverted spans are rejected."""

    onset: float
    offset: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise ValueError(f"non-finite interval ({self.onset}, {self.offset})")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.onset >= self.offset:
            raise ValueError(f"empty or inverted interval ({self.onset}, {self.offset})")

    @property
    def length(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class Event:
    """One labeled occurrence. Inventory membership of the label is checked
    wherever the class inventory is in scope (parsing, rasterization)."""

    class_label: str
    interval: TimeInterval


@dataclass(frozen=True)
class EventRoster:
    """All events of one clip. Events are kept sorted by (class, onset);
    overlaps across classes are permitted (multi-label)."""

    clip_id: str
    duration: float
    events: tuple[Event, ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.duration) or self.duration <= 0:
            raise ValueError(f"invalid clip duration {self.duration}")
        ordered = tuple(
            sorted(
                self.events,
                key=lambda e: (e.class_label, e.interval.onset, e.interval.offset),
            )
        )
        object.__setattr__(self, "events", ordered)
        for ev in ordered:
            if ev.interval.offset > self.duration:
                raise ValueError(
                    f"event {ev.class_label}@({ev.interval.onset}, {ev.interval.offset}) "
                    f"exceeds clip duration {self.duration}"
                )


@dataclass(frozen=True)
class ClipTags:
    """Clip-level (weak) annotation: the set of classes present."""

    clip_id: str
    tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tags", frozenset(self.tags))


@dataclass(frozen=True)
class PosteriorMatrix:
    """Frame-level class probabilities for one clip, shape (T, C) float32."""

    clip_id: str
    frame_duration: float
    values: np.ndarray

    def __post_init__(self) -> None:
        if not math.isfinite(self.frame_duration) or self.frame_duration <= 0:
            raise ValueError(f"invalid frame duration {self.frame_duration}")
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"posterior matrix must be (T, C) with T, C >= 1, got {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError("posterior values outside [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


def intersection_duration(a: TimeInterval, b: TimeInterval) -> float:
    """Overlap of two intervals in seconds; disjoint intervals give 0."""
    return max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))


def _decode(data: bytes | str) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def _is_header(fields: Sequence[str], float_cols: Sequence[int]) -> bool:
    # A first line whose numeric columns do not parse is taken as a header.
    for i in float_cols:
        try:
            float(fields[i])
        except ValueError:
            return True
    return False


def parse_roster_file(
    data: bytes | str,
    classes: Sequence[str] = DEFAULT_CLASSES,
    durations: Mapping[str, float] | None = None,
) -> list[EventRoster]:
    """Parse a TSV roster (clip_id, onset, offset, class_label per line).

    An optional single header line is skipped. ``durations`` declares clip
    lengths and may introduce clips with no events; clips absent from it get
    the maximum event offset as their duration. Rosters come back sorted by
    clip_id. Malformed lines raise RosterError with a 1-based line number.
    """
    known = set(classes)
    events: dict[str, list[Event]] = {}
    for lineno, raw in enumerate(_decode(data).splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise RosterError(
                f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        if lineno == 1 and _is_header(fields, (1, 2)):
            continue
        clip_id, onset_s, offset_s, label = fields
        try:
            onset, offset = float(onset_s), float(offset_s)
        except ValueError:
            raise RosterError(f"line {lineno}: non-numeric onset/offset") from None
        if onset >= offset:
            raise RosterError(
                f"line {lineno}: inverted or empty interval ({onset}, {offset})"
            )
        if label not in known:
            raise RosterError(
                f"line {lineno}: unknown class {label!r}; inventory: "
                + ", ".join(classes)
            )
        events.setdefault(clip_id, []).append(Event(label, TimeInterval(onset, offset)))

    clip_ids = set(events)
    if durations is not None:
        clip_ids |= set(durations)
    rosters = []
    for clip_id in sorted(clip_ids):
        evs = events.get(clip_id, [])
        if durations is not None and clip_id in durations:
            duration = durations[clip_id]
        else:
            duration = max(ev.interval.offset for ev in evs)
        try:
            rosters.append(EventRoster(clip_id, duration, tuple(evs)))
        except ValueError as exc:
            raise RosterError(f"clip {clip_id!r}: {exc}") from None
    return rosters


def serialize_roster(rosters: Iterable[EventRoster]) -> bytes:
    """TSV bytes, 6-decimal times, deterministic (clip_id, class, onset) order.

    Round-trips through parse_roster_file whenever times carry at most six
    decimals. Clips without events contribute no lines; persist their
    durations through the manifest instead.
    """
    lines = []
    for roster in sorted(rosters, key=lambda r: r.clip_id):
        for ev in roster.events:
            lines.append(
                f"{roster.clip_id}\t{ev.interval.onset:.6f}"
                f"\t{ev.interval.offset:.6f}\t{ev.class_label}\n"
            )
    return "".join(lines).encode("utf-8")


def parse_duration_manifest(data: bytes | str) -> dict[str, float]:
    """Parse `clip_id<TAB>duration` lines into a dict; duplicates are errors."""
    durations: dict[str, float] = {}
    for lineno, raw in enumerate(_decode(data).splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise RosterError(
                f"line {lineno}: expected 2 tab-separated fields, got {len(fields)}"
            )
        if lineno == 1 and _is_header(fields, (1,)):
            continue
        clip_id, dur_s = fields
        try:
            duration = float(dur_s)
        except ValueError:
            raise RosterError(f"line {lineno}: non-numeric duration") from None
        if duration <= 0 or not math.isfinite(duration):
            raise RosterError(f"line {lineno}: invalid duration {duration}")
        if clip_id in durations:
            raise RosterError(f"line {lineno}: duplicate clip {clip_id!r}")
        durations[clip_id] = duration
    return durations


def serialize_duration_manifest(durations: Mapping[str, float]) -> bytes:
    lines = [f"{clip}\t{durations[clip]:.6f}\n" for clip in sorted(durations)]
    return "".join(lines).encode("utf-8")


def rasterize_events(
    roster: EventRoster,
    frame_duration: float,
    frame_count: int,
    classes: Sequence[str] = DEFAULT_CLASSES,
) -> np.ndarray:
    """Binary (frame_count, len(classes)) float32 activity matrix.

    Cell (t, c) is 1 iff some event of class c overlaps the frame interval
    [t*fd, (t+1)*fd) by a strictly positive duration. With this rule,
    OR-pooling the matrix over 2^k consecutive frames equals rasterizing
    directly at frame_duration * 2^k.
    """
    if frame_duration <= 0 or frame_count < 1:
        raise ValueError("frame_duration must be positive and frame_count >= 1")
    if frame_count * frame_duration < roster.duration - frame_duration:
        raise ValueError(
            f"frame grid ({frame_count} x {frame_duration}s) does not cover "
            f"clip duration {roster.duration}s"
        )
    column = {label: i for i, label in enumerate(classes)}
    grid = np.zeros((frame_count, len(classes)), dtype=np.float32)
    for ev in roster.events:
        if ev.class_label not in column:
            raise ValueError(
                f"unknown class {ev.class_label!r}; inventory: " + ", ".join(classes)
            )
        c = column[ev.class_label]
        onset, offset = ev.interval.onset, ev.interval.offset
        lo = max(0, int(math.floor(onset / frame_duration)) - 1)
        hi = min(frame_count, int(math.ceil(offset / frame_duration)) + 1)
        for t in range(lo, hi):
            overlap = min(offset, (t + 1) * frame_duration) - max(onset, t * frame_duration)
            if overlap > 0:
                grid[t, c] = 1.0
    return grid


def serialize_posteriors(matrices: Iterable[PosteriorMatrix]) -> bytes:
    """Concatenated binary blocks, one per matrix, little-endian.

    Block layout: magic ``TPRS1``, u32 clip_id byte length, clip_id bytes,
    u32 T, u32 C, f64 frame_duration, then T*C f32 values row-major.
    """
    chunks = []
    for m in matrices:
        cid = m.clip_id.encode("utf-8")
        chunks.append(POSTERIOR_MAGIC)
        chunks.append(struct.pack("<I", len(cid)))
        chunks.append(cid)
        chunks.append(struct.pack("<IId", m.num_frames, m.num_classes, m.frame_duration))
        chunks.append(np.ascontiguousarray(m.values, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_posteriors(data: bytes) -> list[PosteriorMatrix]:
    """Inverse of serialize_posteriors; validates magic and block sizes."""
    matrices = []
    pos = 0
    n = len(data)
    while pos < n:
        magic = data[pos : pos + len(POSTERIOR_MAGIC)]
        if magic != POSTERIOR_MAGIC:
            raise RosterError(f"bad posterior magic {magic!r} at byte {pos}")
        pos += len(POSTERIOR_MAGIC)

        def take(count: int) -> bytes:
            nonlocal pos
            if pos + count > n:
                raise RosterError(f"truncated posterior block at byte {pos}")
            out = data[pos : pos + count]
            pos += count
            return out

        (cid_len,) = struct.unpack("<I", take(4))
        clip_id = take(cid_len).decode("utf-8")
        frames, ncls, fd = struct.unpack("<IId", take(16))
        values = np.frombuffer(take(frames * ncls * 4), dtype="<f4").reshape(frames, ncls)
        matrices.append(PosteriorMatrix(clip_id, fd, values))
    return matrices


def serialize_posteriors_csv(matrices: Iterable[PosteriorMatrix]) -> str:
    """CSV fallback: clip_id,frame_duration,frame,p0..p{C-1}. All matrices in
    one file must share the class count. Floats are printed with enough digits
    to round-trip exactly."""
    mats = list(matrices)
    if not mats:
        return ""
    ncls = mats[0].num_classes
    if any(m.num_classes != ncls for m in mats):
        raise ValueError("all posterior matrices in one CSV must share the class count")
    lines = ["clip_id,frame_duration,frame," + ",".join(f"p{c}" for c in range(ncls))]
    for m in mats:
        fd = f"{m.frame_duration:.17g}"
        for t in range(m.num_frames):
            row = ",".join(f"{v:.9g}" for v in m.values[t])
            lines.append(f"{m.clip_id},{fd},{t},{row}")
    return "\n".join(lines) + "\n"


def parse_posteriors_csv(text: str) -> list[PosteriorMatrix]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return []
    body = lines[1:]  # header is mandatory in this fallback format
    matrices: list[PosteriorMatrix] = []
    current_id: str | None = None
    current_fd = 0.0
    rows: list[list[float]] = []

    def flush() -> None:
        if current_id is not None:
            matrices.append(
                PosteriorMatrix(current_id, current_fd, np.array(rows, dtype=np.float32))
            )

    for lineno, line in enumerate(body, start=2):
        fields = line.split(",")
        if len(fields) < 4:
            raise RosterError(f"line {lineno}: expected at least 4 comma-separated fields")
        clip_id, fd_s, frame_s = fields[0], fields[1], fields[2]
        if clip_id != current_id:
            flush()
            current_id, current_fd, rows = clip_id, float(fd_s), []
        if int(frame_s) != len(rows):
            raise RosterError(f"line {lineno}: frames of clip {clip_id!r} out of order")
        rows.append([float(v) for v in fields[3:]])
    flush()
    return matrices
