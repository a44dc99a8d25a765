"""Exception types shared across the package."""


class MuonEfError(Exception):
    """Base class for all package errors."""


class InvalidMatrixError(MuonEfError):
    """Input contains NaN/Inf or has an illegal shape."""


class SvdConvergenceError(MuonEfError):
    """The SVD routine failed to converge."""


class UnsupportedNormError(MuonEfError):
    """The requested norm kind is not supported by this operation."""


class ZeroInputError(MuonEfError):
    """Operation is undefined for a zero input."""


class NoAnalyticAlphaError(MuonEfError):
    """No closed-form contraction parameter exists for this (compressor, norm) pair."""


class MalformedPayloadError(MuonEfError):
    """A compressed message payload fails its structural invariants."""


class MissingConstantError(MuonEfError):
    """A theory calculator is missing a required constant."""

    def __init__(self, missing):
        self.missing = tuple(missing) if not isinstance(missing, str) else (missing,)
        super().__init__(f"missing constants: {', '.join(self.missing)}")


class DegenerateTrajectoryError(MuonEfError):
    """All sampled trajectory pairs coincide; nothing to fit."""


class MissingWorkerError(MuonEfError):
    """Aggregation received the wrong number of worker uplinks."""


class UnknownAxisError(MuonEfError):
    """Sweep axis does not name a config field."""


class InsufficientDataError(MuonEfError):
    """Not enough recorded points for the requested fit."""


class UnknownObjectiveError(MuonEfError):
    """Objective value/gradient requested for an unknown quantity (e.g. f* not analytic)."""


class RoundExecutionError(MuonEfError):
    """An objective/optimizer error raised during a specific round; chains the cause."""


class ConfigError(MuonEfError):
    """Config file or override is invalid; message names the offending key."""
