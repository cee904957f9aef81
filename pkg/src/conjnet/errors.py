"""Exception and warning types shared across the package."""


class ConjnetError(Exception):
    """Base class for all package errors."""


class DataError(ConjnetError):
    """Track or manifest data failed validation."""


class MalformedRow(DataError):
    pass


class MissingParent(DataError):
    pass


class DuplicateCellId(DataError):
    pass


class NonPositiveExtent(DataError):
    pass


class EmptyTrial(ConjnetError):
    pass


class CyclicGraph(ConjnetError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"cycle of length {len(self.cycle)}: {self.cycle}")


class UnknownQueryTarget(ConjnetError):
    pass


class DegenerateCDF(ConjnetError):
    pass


class NoCandidateEdges(ConjnetError):
    pass


class TooLarge(ConjnetError):
    pass


class ConfigError(ConjnetError):
    pass


class ArenaOverflow(ConjnetError):
    pass


class ClampWarning(UserWarning):
    """A normalized conjugation weight exceeded 1 and was clamped."""


class LabelWarning(UserWarning):
    """Input labels were changed by propagation or ingestion fixes."""
