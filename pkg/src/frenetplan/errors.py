"""Exception types raised across the planner."""


class PlannerError(Exception):
    pass


class DegenerateCenterLine(PlannerError, ValueError):
    pass


class OutOfCorridor(PlannerError, ValueError):
    pass


class OutOfRange(PlannerError, ValueError):
    pass


class InvalidBasisConfig(PlannerError, ValueError):
    pass


class DimensionMismatch(PlannerError, ValueError):
    pass


class RankDeficientConstraints(PlannerError, ValueError):
    pass


class SingularKkt(PlannerError, ValueError):
    pass


class EmptyBatch(PlannerError, ValueError):
    pass


class EmptyLog(PlannerError, ValueError):
    pass


class CorpusGenerationFailed(PlannerError, RuntimeError):
    pass


class KinkWarning(UserWarning):
    """The unrolled graph passed within tolerance of a clip or hinge boundary."""
