from .behavior import WritingBehaviorModel, fit_behavior_model
from .filter2d import track_stroke_2d
from .knn import KnnModel, knn_fit, knn_track
from .particles import (
    DegenerateWeightsError,
    ParticleSet,
    ParticleState,
    TrackerConfig,
    TrackResult,
    compute_weight,
    init_particles,
    kld_sample_size,
    resample,
    track_stroke,
    transition,
)

__all__ = [
    "DegenerateWeightsError",
    "KnnModel",
    "ParticleSet",
    "ParticleState",
    "TrackResult",
    "TrackerConfig",
    "WritingBehaviorModel",
    "compute_weight",
    "fit_behavior_model",
    "init_particles",
    "kld_sample_size",
    "knn_fit",
    "knn_track",
    "resample",
    "track_stroke",
    "track_stroke_2d",
    "transition",
]
