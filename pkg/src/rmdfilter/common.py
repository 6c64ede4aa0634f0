from __future__ import annotations
import enum
import re
from typing import Any, Iterator, Tuple

__all__ = (
    'ModelTag', 'Estimator', 'Mechanism',
    'RmdError', 'InvalidInputError', 'EmptySubsetError', 'DegenerateModelError',
    'UnderIdentifiedError', 'ConvergenceError', 'EstimationFailure',
    'FilterDegeneracyError', 'InvalidStateError', 'EvaluationFailure',
    'ConfigError', 'QuarterLabel', 'parse_quarter', 'format_quarter',
    'quarter_range',
)


class _StrEnum(enum.Enum):
    @classmethod
    def from_str(cls, s: str):
        """Return the member whose value matches the given string
        (case-insensitive, ``_`` and ``-`` are interchangeable)
        """
        if isinstance(s, cls):
            return s
        key = s.lower().replace('_', '-')
        for member in cls:
            if member.value == key:
                return member
        raise InvalidInputError(f'Unknown {cls.__name__}', s)

    def to_str(self) -> str:
        """The member value as used in CLI flags and config files"""
        return self.value

    @classmethod
    def all(cls) -> Iterator:
        """Iterate over all members"""
        yield from cls.__members__.values()

    def __str__(self):
        return self.value

    def __format__(self, format_spec):
        if format_spec == '':
            return str(self)
        return super().__format__(format_spec)


class ModelTag(_StrEnum):
    """Model family tags

    The values appear verbatim in CLI flags and config files

    >>> from rmdfilter import ModelTag
    >>> ModelTag.from_str('uc')
    <ModelTag.UC: 'uc'>
    >>> ModelTag.from_str('UC_T')
    <ModelTag.UC_T: 'uc-t'>
    >>> ModelTag.ARMF.to_str()
    'armf'
    """
    UC = 'uc'       #: Local level: random-walk state, Gaussian measurement
    AR = 'ar'       #: Mean-reverting state with estimated long-run mean
    ARMF = 'armf'   #: Mean-reverting state with the mean fixed (2% target)
    UC_T = 'uc-t'   #: Local level with scaled Student-t measurement


class Estimator(_StrEnum):
    """Estimation approach used by the evaluation harness

    >>> Estimator.from_str('rmd-n')
    <Estimator.RMD_N: 'rmd-n'>
    """
    RMD_X = 'rmd-x' #: Exogenous path randomization
    RMD_N = 'rmd-n' #: Endogenous (sequential Bayesian) randomization
    NONE = 'none'   #: Base model, all observations included


class Mechanism(_StrEnum):
    """Contamination mechanism for simulated data"""
    ADDITIVE_SHIFT = 'additive-shift'
    """Add ``±magnitude * obs_sd`` to the clean measurement"""

    PREDICTIVE_REPLACEMENT = 'predictive-replacement'
    """Replace the measurement by a draw from the one-step predictive
    density given past contaminated data, with its standard deviation
    inflated by ``magnitude``
    """


class RmdError(Exception):
    """Base class for errors raised by this package"""
    msg: str #: Error message
    value: Any #: The offending value (if any)
    def __init__(self, msg: str, value: Any = None):
        super().__init__(msg)
        self.msg = msg
        self.value = value
    def __str__(self):
        if self.value is None:
            return self.msg
        return f'{self.msg}: {self.value!r}'

class InvalidInputError(RmdError, ValueError):
    """Raised on invalid arguments (non-finite values, length mismatches, etc)
    """

class EmptySubsetError(InvalidInputError):
    """Raised when an inclusion probability of zero would leave no data"""

class DegenerateModelError(RmdError):
    """Raised when a measurement update has zero predictive variance"""

class UnderIdentifiedError(RmdError):
    """Raised when too few observations are included to fit a model family"""

class ConvergenceError(RmdError):
    """Raised when the optimizer fails to converge

    The best parameters seen so far are available as :attr:`best`
    """
    best: Any
    loglik: float
    def __init__(self, msg: str, best: Any = None, loglik: float = float('nan')):
        super().__init__(msg, best)
        self.best = best
        self.loglik = loglik

class EstimationFailure(RmdError):
    """Raised when an estimation run cannot produce a usable result"""

class FilterDegeneracyError(EstimationFailure):
    """Raised when all particle weights are numerically zero or the parameter
    particles collapse to a single value"""

class InvalidStateError(RmdError):
    """Raised when an operation is requested in the wrong filtering state"""

class EvaluationFailure(RmdError):
    """Raised when too many forecast origins fail during evaluation"""

class ConfigError(InvalidInputError):
    """Raised on invalid run configuration"""


QuarterLabel = Tuple[int, int]
"""A tuple of ``(year, quarter)``"""

_QUARTER_RE = re.compile(r'^(\d{4})[Qq]([1-4])$')

def parse_quarter(s: str) -> int:
    """Parse a ``YYYYQn`` label into a quarter ordinal

    >>> parse_quarter('1960Q1')
    7840
    >>> parse_quarter('1960Q2') - parse_quarter('1960Q1')
    1
    """
    m = _QUARTER_RE.match(s.strip())
    if m is None:
        raise InvalidInputError('Invalid quarter label', s)
    year, q = int(m.group(1)), int(m.group(2))
    return year * 4 + q - 1

def format_quarter(ordinal: int) -> str:
    """Inverse of :func:`parse_quarter`

    >>> format_quarter(parse_quarter('2015Q2'))
    '2015Q2'
    """
    year, q = divmod(ordinal, 4)
    return f'{year:04d}Q{q + 1}'

def quarter_range(start: str, n: int) -> list[str]:
    """Return ``n`` consecutive quarter labels beginning at ``start``

    >>> quarter_range('1999Q3', 3)
    ['1999Q3', '1999Q4', '2000Q1']
    """
    first = parse_quarter(start)
    return [format_quarter(first + i) for i in range(n)]
