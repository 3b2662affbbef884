"""Shared fixtures-by-hand: random metric instances and tiny corpora."""

import numpy as np

from tempsed.events import Event, EventRoster, TimeInterval
from tempsed.metrics import OperatingPointSet

LABELS = ("alpha", "beta", "gamma", "delta")


def random_roster(rng, clip_id, duration, classes, max_events):
    events = []
    for _ in range(int(rng.integers(0, max_events + 1))):
        label = classes[int(rng.integers(len(classes)))]
        onset = float(rng.uniform(0, duration - 0.05))
        length = float(rng.uniform(0.05, duration - onset))
        events.append(Event(label, TimeInterval(onset, min(onset + length, duration))))
    return EventRoster(clip_id, duration, tuple(events))


def random_instance(rng, max_clips=5, max_events=10):
    """(pred, ref, classes): one randomized scoring problem."""
    classes = LABELS[: int(rng.integers(2, len(LABELS) + 1))]
    num_clips = int(rng.integers(1, max_clips + 1))
    ref, pred = {}, {}
    for i in range(num_clips):
        clip_id = f"clip{i}"
        duration = float(rng.uniform(3.0, 12.0))
        ref[clip_id] = random_roster(rng, clip_id, duration, classes, max_events)
        pred[clip_id] = random_roster(rng, clip_id, duration, classes, max_events)
    return pred, ref, classes


def random_operating_points(rng, ref, classes, max_events=10, max_ops=6):
    """An OperatingPointSet over the reference's clips with random rosters."""
    num_ops = int(rng.integers(2, max_ops + 1))
    thresholds = tuple(sorted(float(t) for t in rng.uniform(0.01, 0.99, num_ops)))
    while len(set(thresholds)) != num_ops:
        thresholds = tuple(sorted(float(t) for t in rng.uniform(0.01, 0.99, num_ops)))
    rosters = tuple(
        {
            cid: random_roster(rng, cid, ref[cid].duration, classes, max_events)
            for cid in ref
        }
        for _ in range(num_ops)
    )
    return OperatingPointSet(thresholds, rosters)


def tags_from_rosters(rosters):
    return {cid: {e.class_label for e in r.events} for cid, r in rosters.items()}
