"""Exception hierarchy shared by every module.

Each class name doubles as the machine-readable error category printed by
the command-line driver.
"""


class MotifRLError(Exception):
    """Base class for all package errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


# parsing
class UnsupportedToken(MotifRLError):
    pass


class UnclosedRing(MotifRLError):
    pass


class UnbalancedParen(MotifRLError):
    pass


class MalformedRecord(MotifRLError):
    pass


# tokenizer
class EmptyCorpus(MotifRLError):
    pass


class VTooSmall(MotifRLError):
    pass


class UnknownElement(MotifRLError):
    pass


class UnknownUnit(MotifRLError):
    pass


class AttachOutOfRange(MotifRLError):
    pass


class AttachMissing(MotifRLError):
    pass


class TooManyNodes(MotifRLError):
    pass


class VersionMismatch(MotifRLError):
    pass


# diffusion / model
class BadStep(MotifRLError):
    pass


class UnnormalizedPrediction(MotifRLError):
    pass


class MissingFactorPrediction(MotifRLError):
    pass


class UnknownTask(MotifRLError):
    pass


class NotConvex(MotifRLError):
    pass


class NonFiniteLoss(MotifRLError):
    pass


class VocabMismatch(MotifRLError):
    pass


class CorruptFile(MotifRLError):
    pass


# rl
class MaskMismatch(MotifRLError):
    pass


class EmptyBatch(MotifRLError):
    pass


# oracle / metrics
class KindMismatch(MotifRLError):
    pass


class EmptySet(MotifRLError):
    pass


class LengthMismatch(MotifRLError):
    pass


# theory
class BadBeta(MotifRLError):
    pass


class SupportViolation(MotifRLError):
    pass


class StructureMismatch(MotifRLError):
    pass


class BadArgs(MotifRLError):
    pass


class BadSizes(MotifRLError):
    pass


class ConfigError(MotifRLError):
    pass
