"""Price-index ingestion, inflation transforms and contaminated simulations
"""
from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
from dataclasses import dataclass
import json
import math
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd

from rmdfilter.common import (
    Mechanism, InvalidInputError, parse_quarter, quarter_range,
)
from rmdfilter.utils import stream
from rmdfilter.statespace import (
    TimeSeries, InclusionPath, LinearGaussianModel, kalman_step,
)

__all__ = (
    'PriceIndexSeries', 'ContaminationSpec', 'SimulationTruth', 'to_inflation',
    'read_price_csv', 'read_series_csv', 'write_series_csv',
    'simulate_contaminated',
)


@dataclass(frozen=True)
class PriceIndexSeries:
    """Quarterly price index levels"""
    index: Tuple[str, ...] #: Contiguous quarter labels
    level: np.ndarray #: Positive index levels

    def __post_init__(self):
        level = np.asarray(self.level, dtype=float)
        index = tuple(self.index)
        if level.ndim != 1 or len(level) != len(index):
            raise InvalidInputError('Index and levels must have equal length')
        if not np.isfinite(level).all() or (level <= 0).any():
            raise InvalidInputError('Price levels must be finite and positive')
        _check_contiguous(index)
        object.__setattr__(self, 'level', level)
        object.__setattr__(self, 'index', index)

    def __len__(self):
        return len(self.level)


def _check_contiguous(index: Sequence[str]):
    ordinals = [parse_quarter(s) for s in index]
    for a, b in zip(ordinals, ordinals[1:]):
        if b - a != 1:
            raise InvalidInputError('Quarters must be contiguous', (a, b))

def to_inflation(series: PriceIndexSeries, annualize: bool = True) -> TimeSeries:
    """Quarterly inflation from price levels

    ``400 * (ln P_t - ln P_{t-1})`` (annualized percent), or the raw log
    difference when ``annualize`` is ``False``. The result starts at the
    second quarter.

    >>> s = to_inflation(PriceIndexSeries(('2000Q1', '2000Q2'), [100., 101.]))
    >>> s.index, round(float(s.values[0]), 3)
    (('2000Q2',), 3.98)

    Raises:
        InvalidInputError: If fewer than two levels are given
    """
    if len(series) < 2:
        raise InvalidInputError('At least two price levels are required', len(series))
    diff = np.diff(np.log(series.level))
    if annualize:
        diff = 400 * diff
    return TimeSeries(series.index[1:], diff)

def _read_csv(filename: Union[str, Path]) -> Tuple[Tuple[str, ...], np.ndarray]:
    df = pd.read_csv(filename, dtype={'date': str}, encoding='utf-8')
    if list(df.columns) != ['date', 'value']:
        raise InvalidInputError('Expected the header "date,value"', list(df.columns))
    if df['value'].isna().any() or df['date'].isna().any():
        raise InvalidInputError('Missing values in input', str(filename))
    index = tuple(s.strip() for s in df['date'])
    _check_contiguous(index)
    return index, df['value'].to_numpy(dtype=float)

def read_price_csv(filename: Union[str, Path]) -> PriceIndexSeries:
    """Read price levels from a ``date,value`` CSV file"""
    index, values = _read_csv(filename)
    return PriceIndexSeries(index, values)

def read_series_csv(filename: Union[str, Path]) -> TimeSeries:
    """Read an observation series from a ``date,value`` CSV file"""
    index, values = _read_csv(filename)
    return TimeSeries(index, values)

def write_series_csv(series: TimeSeries, filename: Union[str, Path]):
    df = pd.DataFrame({'date': list(series.index), 'value': series.values})
    df.to_csv(filename, index=False, float_format='%.17g')


@dataclass(frozen=True)
class ContaminationSpec:
    """How simulated observations are contaminated
    """
    rate: float = 0. #: Probability that an observation is contaminated
    mechanism: Mechanism = Mechanism.ADDITIVE_SHIFT
    magnitude: float = 10.
    """Shift size in units of ``obs_sd`` or the standard deviation inflation
    of the replacement draw"""

    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'mechanism', Mechanism.from_str(self.mechanism))
        if not 0 <= self.rate < 1:
            raise InvalidInputError('rate must be in [0, 1)', self.rate)
        if not math.isfinite(self.magnitude) or self.magnitude < 0:
            raise InvalidInputError('magnitude must be nonnegative', self.magnitude)


@dataclass
class SimulationTruth:
    """Ground truth of a simulated dataset"""
    latent: np.ndarray #: The state path ``x_1..x_T``
    clean: np.ndarray #: Observations before contamination
    inclusion: InclusionPath #: ``True`` where the observation is clean
    model: LinearGaussianModel
    spec: ContaminationSpec

    def to_dict(self) -> dict:
        m = self.model
        return {
            'latent': self.latent.tolist(),
            'clean': self.clean.tolist(),
            'inclusion': [int(v) for v in self.inclusion.flags],
            'params': {
                'state_const': m.state_const, 'state_coef': m.state_coef,
                'state_sd': m.state_sd, 'obs_sd': m.obs_sd,
                'init_mean': m.init_mean, 'init_var': m.init_var,
            },
            'contamination': {
                'rate': self.spec.rate, 'mechanism': self.spec.mechanism.to_str(),
                'magnitude': self.spec.magnitude,
            },
            'seed': self.spec.seed,
        }

    def to_json(self, filename: Union[str, Path, None] = None) -> str:
        s = json.dumps(self.to_dict(), indent=2)
        if filename is not None:
            Path(filename).write_text(s)
        return s


def simulate_contaminated(model: LinearGaussianModel, T: int, spec: ContaminationSpec,
                          start: str = '1960Q2') -> Tuple[TimeSeries, SimulationTruth]:
    """Simulate the state-space model and contaminate a random subset

    Each observation is clean with probability ``1 - rate``. Contaminated
    observations either receive a shift of ``magnitude * obs_sd`` with random
    sign, or are replaced by a draw from the one-step predictive density given
    the past contaminated data, with its standard deviation multiplied by
    ``magnitude``.

    >>> from rmdfilter.statespace import LinearGaussianModel
    >>> model = LinearGaussianModel(0., 1., 0.35, 0.5, init_mean=2., init_var=0.)
    >>> s, truth = simulate_contaminated(model, 5, ContaminationSpec(seed=1))
    >>> bool((s.values == truth.clean).all()), truth.inclusion.count
    (True, 5)
    """
    if T < 2:
        raise InvalidInputError('T must be >= 2', T)
    rng = stream(spec.seed, 0)
    x = rng.normal(model.init_mean, math.sqrt(model.init_var))
    latent = np.empty(T)
    for t in range(T):
        x = model.state_const + model.state_coef * x + model.state_sd * rng.standard_normal()
        latent[t] = x
    clean = latent + model.obs_sd * rng.standard_normal(T)
    include = rng.random(T) >= spec.rate
    observed = clean.copy()
    crng = stream(spec.seed, 1)
    if spec.mechanism == Mechanism.ADDITIVE_SHIFT:
        signs = np.where(crng.random(T) < 0.5, -1., 1.)
        observed[~include] += (signs * spec.magnitude * model.obs_sd)[~include]
    else:
        belief = model.initial_belief
        z = crng.standard_normal(T)
        for t in range(T):
            pred, _ = kalman_step(belief, model)
            if not include[t]:
                sd = math.sqrt(pred.var + model.obs_sd ** 2)
                observed[t] = pred.mean + spec.magnitude * sd * z[t]
            belief, _ = kalman_step(belief, model, float(observed[t]))
    n_bad = int((~include).sum())
    logger.debug(f'simulated T={T} with {n_bad} contaminated observations')
    series = TimeSeries(tuple(quarter_range(start, T)), observed)
    truth = SimulationTruth(latent, clean, InclusionPath(include), model, spec)
    return series, truth
