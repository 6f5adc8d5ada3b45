"""Exception hierarchy shared by every stage of the registration pipeline."""


class RegistrationError(Exception):
    """Base class. ``stage`` names the pipeline stage that raised, if known."""

    def __init__(self, message: str = "", stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        if self.stage:
            return f"[stage={self.stage}] {msg}"
        return msg


class DegenerateConfiguration(RegistrationError):
    pass


class EmptyCloud(RegistrationError):
    pass


class EmptyLevel(RegistrationError):
    pass


class TooSparse(RegistrationError):
    pass


class ShapeMismatch(RegistrationError, ValueError):
    pass


class StepFailure(RegistrationError):
    pass


class StabilityViolation(RegistrationError):
    pass


class NumericalUnderflow(RegistrationError):
    pass


class NoCorrespondence(RegistrationError):
    pass


class InsufficientPairs(RegistrationError):
    pass


class AllCandidatesDegenerate(RegistrationError):
    pass


class Divergence(RegistrationError):
    pass


class NoPositivePairs(RegistrationError):
    pass


class ZeroProbability(RegistrationError):
    pass


class MalformedFile(RegistrationError):
    pass


class IoFailure(RegistrationError, OSError):
    pass
