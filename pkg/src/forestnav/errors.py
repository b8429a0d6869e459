"""Exception types shared across the stack."""


class ForestNavError(Exception):
    """Base class for package-specific errors."""


class DegenerateTarget(ForestNavError):
    """Target point coincides with the vehicle reference point."""


class InfeasibleConfig(ForestNavError):
    """Primitive generation settings yield no feasible trajectories."""


class VersionMismatch(ForestNavError):
    """Stored artifact was produced with an incompatible config or vehicle."""


class CorruptFile(ForestNavError):
    """Artifact container failed structural validation."""


class NoFeasiblePrimitive(ForestNavError):
    """Every candidate trajectory collides with an obstacle."""


class EmptyMap(ForestNavError):
    """No voxels stored in the queried window."""


class NoCorrespondences(ForestNavError):
    """Too few scan-to-map pairs to constrain a registration."""


class LocalizationRejected(ForestNavError):
    """Registration result failed the inlier-fraction gate."""


class InfeasibleWorld(ForestNavError):
    """Procedural world failed its connectivity check."""


class MissionBlocked(ForestNavError):
    """Mission cannot proceed (persistent blockage or retries exhausted)."""


class RetryLimitExceeded(MissionBlocked):
    """Grasp reposition retries exhausted."""


class RejectedCommand(ForestNavError):
    """Operator command not valid in the current mission phase."""


class MalformedCommand(ForestNavError):
    """Operator command failed schema validation."""
