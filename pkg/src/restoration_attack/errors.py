"""Exception hierarchy shared by every stage of the toolkit."""


class RestorationAttackError(Exception):
    """Base class for all toolkit errors."""


# forecasting
class SeriesTooShort(RestorationAttackError):
    pass


class NonUniformSpacing(RestorationAttackError):
    pass


class EmptyDataset(RestorationAttackError):
    pass


class DivergedTraining(RestorationAttackError):
    pass


class ShapeMismatch(RestorationAttackError):
    pass


# attacks
class NonFiniteLoss(RestorationAttackError):
    pass


class MissingTargetFeature(RestorationAttackError):
    pass


class InvalidAttackConfig(RestorationAttackError):
    pass


# cold load pickup
class TimeBeforePickup(RestorationAttackError):
    pass


class IndexOutOfRange(RestorationAttackError):
    pass


# feeder
class SchemaError(RestorationAttackError):
    pass


class DanglingReference(SchemaError):
    pass


class PhaseMismatch(SchemaError):
    pass


class NonRadialCore(SchemaError):
    pass


class UnknownSwitch(RestorationAttackError):
    pass


class MissingBase(RestorationAttackError):
    pass


# optimization
class MalformedProblem(RestorationAttackError):
    pass


class NodeLimitReached(RestorationAttackError):
    """Branch and bound ran out of nodes; ``outcome`` holds the incumbent."""

    def __init__(self, message, outcome=None):
        super().__init__(message)
        self.outcome = outcome


class Infeasible(RestorationAttackError):
    """Raised by the planner; ``violations`` carries the elastic attribution."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = violations or []


class MalformedStage(RestorationAttackError):
    pass


class UnexpectedlyFeasible(RestorationAttackError):
    pass


class PlanFeederMismatch(RestorationAttackError):
    pass


class ConfigError(RestorationAttackError):
    pass


class StageFailure(RestorationAttackError):
    """A pipeline stage aborted; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
