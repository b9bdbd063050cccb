"""Exception hierarchy shared by all gsedit modules."""


class GseditError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GseditError):
    """Project configuration is missing, malformed, or references absent paths."""


class DegenerateRotation(GseditError):
    """Raw quaternion norm too small to normalize."""


class ShapeMismatch(GseditError):
    """Deformation field widths inconsistent with its declared attributes."""


class DimensionMismatch(GseditError):
    """Image/buffer dimensions do not agree."""


class MaskMisaligned(GseditError):
    """Edit mask length or id order differs from the Gaussian cloud."""


class IndexOutOfRange(GseditError):
    """Topology operation addressed a Gaussian index outside the cloud."""


class InvalidTemperature(GseditError):
    """Gumbel-Softmax temperature must be strictly positive."""


class NoTargets(GseditError):
    """Selector training requires at least one segmentation target."""


class NonFiniteLoss(GseditError):
    """An optimization loss became NaN or infinite."""


class EmptyRegion(GseditError):
    """A metric region contains no pixels (or no full windows)."""


class ServiceUnavailable(GseditError):
    """Remote service unreachable after exhausting retries."""


class MalformedResponse(GseditError):
    """Remote service answered with an invalid or mis-shaped payload."""


class Timeout(GseditError):
    """Remote service did not answer within the deadline, retries exhausted."""


class EmptyInstruction(GseditError):
    """Planner received an empty instruction."""


class NeedsLLM(GseditError):
    """Rule backend cannot ground this instruction; an LLM backend is required."""


class UnclassifiableClause(GseditError):
    """A clause matched no pattern in the task lexicon."""


class CyclicDependency(GseditError):
    """Task dependencies form a cycle; no valid ordering exists."""
