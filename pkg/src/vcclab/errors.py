"""Exception types raised across the package."""


class VCCError(Exception):
    """Base class for all package errors."""


class ShapeError(VCCError, ValueError):
    pass


class ContractError(VCCError):
    """A function was called outside its documented contract."""


class InvalidBatchError(VCCError, ValueError):
    pass


class ConfigError(VCCError, ValueError):
    pass


class SpecError(VCCError, ValueError):
    """Invalid compressor spec (e.g. layer outside [1, N])."""


class PlanError(VCCError, ValueError):
    pass


class LengthError(VCCError, ValueError):
    pass


class ProbeError(VCCError):
    pass


class TrainingError(VCCError, RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
