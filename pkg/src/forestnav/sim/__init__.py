from .world import ForestWorld, WorldParams, generate_world, step_dynamics
from .lidar import (
    LabeledScan,
    LidarPattern,
    SemanticLabel,
    TRAVERSABILITY_SCORES,
    oracle_traversability,
    score_to_logit,
    simulate_lidar,
)
from .odometry import DriftModel, DriftingOdometry, ate_after_alignment, drifting_odometry, measure_rpe

__all__ = [
    "ForestWorld", "WorldParams", "generate_world", "step_dynamics",
    "LabeledScan", "LidarPattern", "SemanticLabel", "TRAVERSABILITY_SCORES",
    "oracle_traversability", "score_to_logit", "simulate_lidar",
    "DriftModel", "DriftingOdometry", "ate_after_alignment", "drifting_odometry", "measure_rpe",
]
