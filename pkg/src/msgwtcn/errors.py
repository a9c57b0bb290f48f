"""Exception types raised across the package.

Every error derives from :class:`MsgwtcnError` so callers (notably the CLI)
can map families of failures onto exit codes.
"""


class MsgwtcnError(Exception):
    """Base class for all package errors."""


class ConfigError(MsgwtcnError, ValueError):
    pass


class ShapeError(MsgwtcnError, ValueError):
    pass


class NonFinite(MsgwtcnError, ArithmeticError):
    pass


class NonScalarLoss(MsgwtcnError, ValueError):
    pass


# graph construction
class EmptyGraph(MsgwtcnError, ValueError):
    pass


class UnknownNode(MsgwtcnError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class DegreeZero(MsgwtcnError, ValueError):
    pass


class NonSquare(MsgwtcnError, ValueError):
    pass


# eigensolver
class NotSymmetric(MsgwtcnError, ValueError):
    pass


class NoConvergence(MsgwtcnError, ArithmeticError):
    pass


# data ingestion
class MalformedCsv(MsgwtcnError, ValueError):
    pass


class NonUniformSpacing(MsgwtcnError, ValueError):
    pass


class ConstantNode(MsgwtcnError, ValueError):
    pass


class TooShort(MsgwtcnError, ValueError):
    pass


class FractionError(MsgwtcnError, ValueError):
    pass


class EmptyDataset(MsgwtcnError, ValueError):
    pass


class EmptyInput(MsgwtcnError, ValueError):
    pass


# checkpoints
class VersionMismatch(MsgwtcnError, ValueError):
    pass


class ChecksumMismatch(MsgwtcnError, ValueError):
    pass
