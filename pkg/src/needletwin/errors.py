"""Exception types shared across the package."""


class NeedleTwinError(Exception):
    """Base class for all package-specific errors."""


class FrameError(NeedleTwinError):
    """Frame labels do not chain, or an unknown frame symbol was used."""


class InvalidInput(NeedleTwinError):
    """An argument violates a documented precondition."""


class DegenerateInput(NeedleTwinError):
    """Input is singular/collinear and the operation has no unique answer."""


class OutOfBounds(NeedleTwinError):
    """A sample point lies outside the volume bounding box."""


class InvalidSpec(NeedleTwinError):
    """A phantom specification is internally inconsistent."""


class EmptySurface(NeedleTwinError):
    """The volume never crosses the requested isovalue."""


class DegenerateMotion(NeedleTwinError):
    """A calibration pose set does not constrain the solution."""


class InsufficientMarkers(NeedleTwinError):
    """Too few marker balls detected to estimate the grid pose."""


class NoCandidates(NeedleTwinError):
    """Candidate generation produced an empty set."""


class ContextMissing(NeedleTwinError):
    """A planning operation was called without a robot context."""


class InvalidTrajectory(NeedleTwinError):
    """A needle trajectory violates its invariants."""


class PlanningFailed(NeedleTwinError):
    """Plan construction failed; `stage` names the failing pipeline stage."""

    def __init__(self, message, stage=""):
        super().__init__(message)
        self.stage = stage


class NoPuncture(NeedleTwinError):
    """The observed needle axis never intersects the skin mesh."""


class ProtocolError(NeedleTwinError):
    """A wire frame or envelope is malformed."""
