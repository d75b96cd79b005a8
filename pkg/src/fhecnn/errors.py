"""Exception types shared by the simulator modules."""


class SimError(Exception):
    pass


class LevelMismatch(SimError):
    pass


class ScaleMismatch(SimError):
    """Operand still carries an unrescaled product."""


class ShapeMismatch(SimError):
    pass


class LevelExhausted(SimError):
    pass


class InvalidTarget(SimError):
    pass


class CapacityExceeded(SimError):
    pass


class GapMismatch(SimError):
    pass


class IndivisibleHeight(SimError):
    pass


class NonPowerOfTwoGroups(SimError):
    pass


class UnsupportedTransition(SimError):
    pass


class FormatMismatch(SimError):
    pass


class PlanViolation(SimError):
    pass


class InfeasibleBudget(SimError):
    pass


class UnsupportedAlgo(SimError):
    pass


class Unreachable(SimError):
    pass


class ConfigError(SimError):
    pass
