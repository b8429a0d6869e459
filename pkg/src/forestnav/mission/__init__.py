from .supervisor import (
    GraspModel,
    Mission,
    MissionConfig,
    MissionMetrics,
    Phase,
    compute_metrics,
    parse_script,
)
from .telemetry import TelemetryServer, decode_message, encode_message, read_message

__all__ = [
    "GraspModel", "Mission", "MissionConfig", "MissionMetrics", "Phase",
    "compute_metrics", "parse_script",
    "TelemetryServer", "decode_message", "encode_message", "read_message",
]
