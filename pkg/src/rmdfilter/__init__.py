"""Randomized missing data (RMD) filtering, parameter estimation and
forecasting for scalar state-space models.

Observations are randomly treated as missing, either exogenously by averaging
over sampled inclusion paths (:mod:`~rmdfilter.rmdx`) or endogenously through
a sequential posterior over inclusion indicators (:mod:`~rmdfilter.rmdn`).
"""

try:
    import importlib.metadata
    __version__ = importlib.metadata.version('rmdfilter')
except Exception: # pragma: no cover
    __version__ = 'unknown'

try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logging.basicConfig(format='%(asctime)s\t%(levelname)s\t%(message)s', level=logging.INFO)
    logger = logging.getLogger(__name__)
from .common import *
from .statespace import *
from .models import *
from .mle import *
from .rmdx import *
from .rmdn import *
from .evaluation import *
from .data import *
