"""Exception types shared across the package.

Every domain error carries a short machine-readable ``code`` so the CLI
and the streaming service can surface errors as structured JSON.
"""

from __future__ import annotations


class SpineNavError(Exception):
    """Base class for all domain errors."""

    code = "error"

    def to_json(self) -> dict:
        return {"error": self.code, "message": str(self)}


class NoPathError(SpineNavError):
    """Two frames are not connected in the transform graph."""

    code = "no_path"


class InsufficientDataError(SpineNavError):
    """Too few samples to solve the requested problem."""

    code = "insufficient_data"


class DegenerateMotionError(SpineNavError):
    """Calibration motions do not constrain the unknown transform."""

    code = "degenerate_motion"


class MixedFramesError(SpineNavError):
    """Point clouds passed together carry different frame labels."""

    code = "mixed_frames"


class EmptyCloudError(SpineNavError):
    code = "empty_cloud"


class EmptyMeshError(SpineNavError):
    code = "empty_mesh"


class NoCliquesError(SpineNavError):
    """Correspondence compatibility graph has no clique of usable size."""

    code = "no_cliques"


class JointLimitError(SpineNavError):
    code = "joint_limit"


class BadParamsError(SpineNavError):
    code = "bad_params"


class IllegalPhaseError(SpineNavError):
    """Command not legal in the session's current phase."""

    code = "illegal_phase"


class UnknownTargetError(SpineNavError):
    code = "unknown_target"


class StageError(SpineNavError):
    """Wraps an error raised inside a named pipeline stage."""

    code = "stage_error"

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause

    def to_json(self) -> dict:
        doc = super().to_json()
        doc["stage"] = self.stage
        if isinstance(self.cause, SpineNavError):
            doc["cause"] = self.cause.code
        return doc
