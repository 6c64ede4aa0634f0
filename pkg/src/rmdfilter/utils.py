from __future__ import annotations
try:
    import loguru
    from loguru import logger
except ImportError: # pragma: no cover
    loguru = None
    import logging
    logger = logging.getLogger(__name__)
import functools

import numpy as np

__all__ = ('logger_catch', 'stream', 'round_half_away')

if loguru is not None:
    logger_catch = logger.catch
else: # pragma: no cover
    def logger_catch(f):
        @functools.wraps(f)
        def wrapper(*args, **kwargs):
            try:
                return f(*args, **kwargs)
            except Exception as exc:
                logger.error(f'Error in {f!r}', exc_info=True)
        return wrapper


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Create an independent random stream for the given seed and counter keys

    The stream is a :class:`~numpy.random.Philox` generator keyed from
    ``SeedSequence(seed, spawn_key=keys)``. Streams for different keys never
    share state, so work split across threads or reordered in any way draws
    the same numbers as a sequential run.

    >>> a = stream(7, 3).standard_normal(2)
    >>> b = stream(7, 3).standard_normal(2)
    >>> bool((a == b).all())
    True
    >>> bool((stream(7, 4).standard_normal(2) == a).any())
    False
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def round_half_away(x: float) -> int:
    """Round to the nearest integer with ties away from zero

    >>> round_half_away(0.45)
    0
    >>> round_half_away(2.5)
    3
    >>> round_half_away(-2.5)
    -3
    """
    if x >= 0:
        return int(np.floor(x + 0.5))
    return -int(np.floor(-x + 0.5))
