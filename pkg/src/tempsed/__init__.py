"""Temporal-resolution study toolkit for sound event detection.

A from-scratch convolutional recurrent tagger/detector whose temporal output
resolution is configurable, a mean-teacher trainer, the decoding chain from
frame probabilities to timestamped events, and the metric suite (clip F1,
segment F1, event F1, PSDS) used to study how resolution affects each metric.
"""

from .events import (
    AnnotationKind,
    ClipTags,
    Event,
    EventRoster,
    PosteriorMatrix,
    RosterError,
    TimeInterval,
    parse_duration_manifest,
    parse_posteriors,
    parse_roster_file,
    rasterize_events,
    serialize_posteriors,
    serialize_roster,
)
from .features import (
    SpectralMap,
    StandardizationStats,
    Waveform,
    fit_standardization,
    log_mel,
    read_wav,
    standardize,
)
from .metrics import (
    PSDS1,
    PSDS2,
    MetricReport,
    OperatingPointSet,
    clip_f1,
    event_f1,
    psds,
    psds_classwise,
    segment_f1,
)
from .model import (
    ModelConfig,
    forward,
    forward_batch,
    init_parameters,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .postprocess import DecodeConfig, decode_events, decode_posteriors, median_smooth
from .sweep import SweepSpec, run_sweep
from .synth import SyntheticSpec, gen_dataset, load_dataset, scaled_spec
from .training import MeanTeacherState, TrainConfig, TrainingData, train_loop, train_step

__version__ = "0.1.0"
