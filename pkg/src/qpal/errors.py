"""Exception hierarchy shared by every qpal module.

Each error carries a short ``remedy`` string so the CLI can print the error
name plus a one-line hint without a lookup table.
"""


class QpalError(Exception):
    remedy = "check the inputs"

    def __init__(self, message: str = "", remedy: str | None = None):
        super().__init__(message)
        if remedy is not None:
            self.remedy = remedy

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidInput(QpalError, ValueError):
    remedy = "fix the offending argument or file field"


# tensor_store
class FormatError(QpalError):
    remedy = "regenerate the file with qpal"


class BadMagic(FormatError):
    remedy = "the file is not a qpal container of the expected kind"


class TruncatedPayload(FormatError):
    remedy = "the file was cut short; rewrite it"


class DimensionOverflow(FormatError):
    remedy = "header dimensions are implausible; the file is corrupt"


class UnsupportedVersion(FormatError):
    remedy = "upgrade qpal or rewrite the file with this version"


class CorruptContainer(FormatError):
    remedy = "packed payload length disagrees with the header; rewrite the file"


class UnsupportedWidth(QpalError, ValueError):
    remedy = "pick a bitwidth from the scheme's supported set (see `qpal --help`)"


# incoherence
class NonPowerOfTwoDim(QpalError, ValueError):
    remedy = "pad or reshape so the input dimension is a power of two"


class ZeroColumn(QpalError, ValueError):
    remedy = "drop all-zero output channels before gaussianizing"


# quant engines
class ConfigMismatch(QpalError, ValueError):
    remedy = "use the codebook that matches the scheme/bitwidth"


class LengthMismatch(QpalError, ValueError):
    remedy = "bit string length must equal s*T/V"


class PartitionMismatch(QpalError, ValueError):
    remedy = "matrix dimensions must be divisible by the scheme's partition unit"


class DimMismatch(QpalError, ValueError):
    remedy = "Hessian dimension must equal the number of matrix rows"


class NonPsdHessian(QpalError, ValueError):
    remedy = "add damping to the Hessian diagonal"


# allocation / solvers
class InfeasibleBudget(QpalError, ValueError):
    remedy = "raise the budget to at least eta * total parameter count"


class Infeasible(QpalError):
    remedy = "raise the budget or add cheaper options"


class DegenerateFit(QpalError, ValueError):
    remedy = "provide at least two measurements with distinct noise norms"


class MissingCost(QpalError, KeyError):
    remedy = "the cost table must cover every (group, quantizer) pair"

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0] if self.args else ""
