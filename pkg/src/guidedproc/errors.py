"""Exception types shared across the package."""


class ParameterDomainError(ValueError):
    """Distribution parameters outside their valid domain."""


class TraceExhaustedError(RuntimeError):
    """Replay needed more choices than the trace contains."""


class StructuralMismatchError(RuntimeError):
    """Replay met a choice whose address or kind differs from the record."""


class ContractError(ValueError):
    """An API precondition was violated (dimension mismatch etc.)."""


class DegenerateConstraintError(ValueError):
    """Constraint cannot discriminate anything (e.g. all-empty target)."""


class DegeneratePopulationError(RuntimeError):
    """Every SMC particle reached -inf weight."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class CorpusLoadError(ValueError):
    """A corpus entry failed to load or validate."""


class CorruptExampleError(RuntimeError):
    """A training example's trace no longer replays against its program."""
