"""Posterior-to-event decoding: threshold, median smoothing, run merging.

The chain is fixed across classes and operating points: binarize at a
threshold (ties activate), median-filter each class track with a window
derived from the frame duration, turn runs of ones into events, and merge
same-class events separated by at most 0.2 s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import Event, EventRoster, PosteriorMatrix, TimeInterval

# Tolerance for comparing gaps assembled from frame-grid arithmetic.
_GAP_EPS = 1e-12


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    median_window: float = 0.5  # seconds, realized per resolution, see median_smooth
    merge_gap: float = 0.2  # seconds

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.median_window <= 0 or self.merge_gap < 0:
            raise ValueError("median_window must be positive, merge_gap non-negative")


def binarize(values: np.ndarray | PosteriorMatrix, threshold: float = 0.5) -> np.ndarray:
    """value >= threshold -> 1 else 0; works on frame matrices and clip vectors."""
    if isinstance(values, PosteriorMatrix):
        values = values.values
    return (np.asarray(values) >= threshold).astype(np.float32)


def median_window_frames(frame_duration: float, target: float = 0.5) -> int:
    """W = 2*floor((target/2) / frame_duration) + 1, odd by construction.

    Aims at "about 500 ms" and degrades to the identity (W = 1) once frames
    are longer than the half-window.
    """
    if frame_duration <= 0:
        raise ValueError(f"invalid frame duration {frame_duration}")
    return 2 * int(target / 2.0 / frame_duration) + 1


def median_smooth(
    binary: np.ndarray, frame_duration: float, target_window: float = 0.5
) -> np.ndarray:
    """Per-class binary median filter; window shrinks symmetrically at edges.

    A window of length 2h+1 at index i becomes 2*min(h, i, T-1-i)+1, so the
    filtered value is always the majority of an odd count.
    """
    binary = np.asarray(binary)
    squeeze = binary.ndim == 1
    cols = binary[:, None] if squeeze else binary
    window = median_window_frames(frame_duration, target_window)
    if window <= 1 or cols.shape[0] == 1:
        out = cols.astype(np.float32, copy=True)
        return out[:, 0] if squeeze else out
    t = cols.shape[0]
    half = (window - 1) // 2
    idx = np.arange(t)
    shrink = np.minimum(half, np.minimum(idx, t - 1 - idx))
    lo, hi = idx - shrink, idx + shrink + 1
    csum = np.vstack([np.zeros((1, cols.shape[1])), np.cumsum(cols, axis=0, dtype=np.float64)])
    ones = csum[hi] - csum[lo]
    out = (2.0 * ones > (hi - lo)[:, None]).astype(np.float32)
    return out[:, 0] if squeeze else out


def decode_events(
    binary: np.ndarray,
    frame_duration: float,
    classes: Sequence[str],
    clip_id: str = "",
    clip_duration: float | None = None,
    merge_gap: float = 0.2,
) -> EventRoster:
    """Turn a (T, C) binary matrix into an EventRoster.

    A maximal run of ones over frames [s, e] becomes the event
    [s*fd, (e+1)*fd]; same-class events whose gap is <= merge_gap are merged
    transitively left to right; offsets are clipped to the clip duration
    (default: the grid length T*fd).
    """
    binary = np.asarray(binary)
    if binary.ndim != 2 or binary.shape[1] != len(classes):
        raise ValueError(
            f"expected (T, {len(classes)}) binary matrix, got shape {binary.shape}"
        )
    t = binary.shape[0]
    if clip_duration is None:
        clip_duration = t * frame_duration
    events = []
    for c, label in enumerate(classes):
        track = binary[:, c] > 0
        if not track.any():
            continue
        edges = np.flatnonzero(np.diff(np.concatenate([[False], track, [False]])))
        raw = [
            (start * frame_duration, min(end * frame_duration, clip_duration))
            for start, end in zip(edges[::2], edges[1::2])
        ]
        merged = [list(raw[0])]
        for onset, offset in raw[1:]:
            if onset - merged[-1][1] <= merge_gap + _GAP_EPS:
                merged[-1][1] = max(merged[-1][1], offset)
            else:
                merged.append([onset, offset])
        events.extend(Event(label, TimeInterval(on, off)) for on, off in merged)
    return EventRoster(clip_id, clip_duration, tuple(events))


def decode_posteriors(
    matrix: PosteriorMatrix,
    classes: Sequence[str],
    config: DecodeConfig = DecodeConfig(),
    clip_duration: float | None = None,
) -> EventRoster:
    """The full chain of binarize -> median_smooth -> decode_events."""
    if matrix.num_classes != len(classes):
        raise ValueError(
            f"posterior has {matrix.num_classes} classes, inventory has {len(classes)}"
        )
    binary = binarize(matrix.values, config.threshold)
    smooth = median_smooth(binary, matrix.frame_duration, config.median_window)
    return decode_events(
        smooth,
        matrix.frame_duration,
        classes,
        clip_id=matrix.clip_id,
        clip_duration=clip_duration,
        merge_gap=config.merge_gap,
    )
