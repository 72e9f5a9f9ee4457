"""Exception hierarchy shared across the package."""

import numpy as np


class SparseFAError(Exception):
    """Base class for every error raised by sparsefa."""


# input validation
class DuplicatePair(SparseFAError, ValueError):
    def __init__(self, user, item):
        super().__init__(f"duplicate rating for (user={user}, item={item})")
        self.user = user
        self.item = item


class IndexOutOfRange(SparseFAError, IndexError):
    pass


class InconsistentCovariateLength(SparseFAError, ValueError):
    pass


class DimensionMismatch(SparseFAError, ValueError):
    pass


class LengthMismatch(SparseFAError, ValueError):
    pass


class EmptyInput(SparseFAError, ValueError):
    pass


class NonFiniteInput(SparseFAError, ValueError):
    pass


class InvalidDimensions(SparseFAError, ValueError):
    pass


class InvalidVariant(SparseFAError, ValueError):
    pass


# file parsing
class MalformedLine(SparseFAError, ValueError):
    def __init__(self, lineno, line, reason=""):
        msg = f"line {lineno}: malformed record {line!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.lineno = lineno


class DuplicateUserId(SparseFAError, ValueError):
    pass


class WrongFlagCount(SparseFAError, ValueError):
    pass


class RatingOutOfRange(SparseFAError, ValueError):
    pass


class UnknownUser(SparseFAError, KeyError):
    pass


class UnknownItem(SparseFAError, KeyError):
    pass


class InvalidSplit(SparseFAError, ValueError):
    pass


# numerical failures
class SingularGram(SparseFAError, np.linalg.LinAlgError):
    pass


class SingularItemMoment(SparseFAError, np.linalg.LinAlgError):
    pass


class NonPositiveDefinite(SparseFAError, np.linalg.LinAlgError):
    pass


class SvdFailure(SparseFAError, np.linalg.LinAlgError):
    pass
