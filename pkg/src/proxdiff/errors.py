"""Exception hierarchy shared across the package."""


class ProxDiffError(Exception):
    pass


class DomainError(ProxDiffError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ArgumentError(ProxDiffError, ValueError):
    pass


class ContractError(ProxDiffError, ValueError):
    """Call violates a documented precondition (e.g. a step index out of range)."""


class UnsupportedError(ProxDiffError, ValueError):
    pass


class StepSizeError(ProxDiffError, ValueError):
    """Step size outside the admissible range of a step rule."""


class NumericError(ProxDiffError, ArithmeticError):
    pass


class OracleFailure(ProxDiffError, RuntimeError):
    pass


class TrainingError(ProxDiffError, RuntimeError):
    pass


class ConfigError(ProxDiffError, ValueError):
    pass


class StageError(ProxDiffError, RuntimeError):
    def __init__(self, stage, seed, cause):
        super().__init__(f"stage {stage!r} failed (seed={seed}): {cause}")
        self.stage = stage
        self.seed = seed


class CheckpointError(ProxDiffError, IOError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(ChecksumError):
    pass


class DescriptorMismatchError(CheckpointError):
    pass
