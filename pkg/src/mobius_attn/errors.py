"""Exception hierarchy shared by every module of the package."""


class MobiusAttnError(Exception):
    """Base class for all package errors."""


class IndeterminateForm(MobiusAttnError, ArithmeticError):
    """Raised for inf - inf, 0 * inf, 0 / 0 and inf / inf."""


class ShapeMismatch(MobiusAttnError, ValueError):
    pass


class InvalidMobius(MobiusAttnError, ValueError):
    """The 2x2 coefficient matrix is (numerically) singular."""


class IdentityMap(MobiusAttnError, ValueError):
    """Every point is fixed; the fixed-point set is not discrete."""


class ParabolicMap(MobiusAttnError, ValueError):
    """Eigenvalues coincide, so no characteristic constant exists."""


class UnknownOp(MobiusAttnError, KeyError):
    pass


class NotScalarLoss(MobiusAttnError, ValueError):
    pass


class OddHeadDim(MobiusAttnError, ValueError):
    pass


class ConfigError(MobiusAttnError, ValueError):
    pass


class OutOfVocab(MobiusAttnError, ValueError):
    pass


class SequenceTooLong(MobiusAttnError, ValueError):
    pass


class VersionMismatch(MobiusAttnError):
    pass


class CorruptFile(MobiusAttnError):
    pass


class DivergenceDetected(MobiusAttnError, FloatingPointError):
    pass


class InvertibilityViolation(MobiusAttnError):
    pass


class NoMobiusLayers(MobiusAttnError):
    pass
