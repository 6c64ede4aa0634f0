"""Recursive out-of-sample evaluation

Forecasts of the h-quarter average are produced at every origin using only
the data available at that origin. Point forecasts are scored by mean squared
error and density forecasts with a weighted likelihood ratio test against the
``beta = 1`` baseline.
"""
from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
from dataclasses import dataclass, field, asdict
import json
import math
from pathlib import Path
from typing import Optional, Sequence, Dict, Mapping, Tuple, Iterable, Union

import numpy as np
import pandas as pd
from scipy import stats

from pydispatch import Dispatcher

from rmdfilter.common import (
    Estimator, InvalidInputError, RmdError, EvaluationFailure,
)
from rmdfilter.utils import stream
from rmdfilter.statespace import TimeSeries
from rmdfilter.models import ModelFamily, naive_two_percent
from rmdfilter.mle import OptimizerSettings
from rmdfilter.rmdx import rmd_x_estimate, DEFAULT_N_PATHS
from rmdfilter.rmdn import RmdnConfig, ThetaParticleSystem, fit_rmd_n

__all__ = (
    'DEFAULT_BETA_GRID', 'DEFAULT_HORIZONS', 'UCSVO_REFERENCE_MSFE',
    'REPORT_COLUMNS', 'ForecastRecord', 'WlrResult', 'EvalConfig', 'EvalRow',
    'EvalReport', 'RecursiveEvaluator', 'msfe', 'wlr_test', 'select_beta',
    'run_recursive_evaluation',
)

DEFAULT_BETA_GRID: Tuple[float, ...] = (
    0.05, 0.10, 0.15, 0.20, 0.25, 0.35, 0.50, 0.70, 0.90, 1.00,
)
DEFAULT_HORIZONS: Tuple[int, ...] = (1, 4, 8, 12)

UCSVO_REFERENCE_MSFE: Dict[int, float] = {4: 1.09, 8: 0.81, 12: 0.69}
"""Published MSFE of the stochastic-volatility outlier model (not computed)"""

REPORT_COLUMNS: Tuple[str, ...] = (
    'model', 'estimator', 'beta_strategy', 'horizon', 'msfe', 'wlr', 'wlr_se',
    'wlr_t', 'wlr_p', 'n_forecasts',
)

BASELINE = 'beta=1'


@dataclass(frozen=True)
class ForecastRecord:
    """A forecast of the h-step average made at one origin
    """
    origin: int
    """Number of observations available when the forecast was made"""

    horizon: int
    point: float #: Point forecast
    log_density: float #: Predictive log density of :attr:`realized`
    realized: float #: Realized average of the next ``horizon`` observations
    beta: float = 1.


@dataclass(frozen=True)
class WlrResult:
    """Result of :func:`wlr_test`"""
    wlr_hat: float #: Mean log density difference
    sigma_hat: float #: HAC standard deviation of the differences
    t_stat: float
    p_right: float #: Standard normal CDF of :attr:`t_stat`
    n: int


def msfe(records: Iterable[ForecastRecord], horizon: int) -> float:
    """Mean squared forecast error of the records at ``horizon``

    >>> recs = [ForecastRecord(50, 4, p, 0., r) for p, r in [(3., 2.), (0., 2.), (1., 1.)]]
    >>> round(msfe(recs, 4), 12)
    1.666666666667

    Raises:
        InvalidInputError: If there are no records at the horizon
    """
    errors = [r.point - r.realized for r in records if r.horizon == horizon]
    if not errors:
        raise InvalidInputError('No forecast records at horizon', horizon)
    return float(np.mean(np.square(errors)))

def _newey_west_var(d: np.ndarray) -> float:
    n = len(d)
    lags = math.floor(4 * (n / 100) ** (2 / 9))
    e = d - d.mean()
    var = float(np.dot(e, e)) / n
    for j in range(1, lags + 1):
        var += 2 * (1 - j / (lags + 1)) * float(np.dot(e[j:], e[:-j])) / n
    return max(var, 0.)

def wlr_test(logdens_a: Sequence[float], logdens_b: Sequence[float]) -> WlrResult:
    """Weighted likelihood ratio test of two density forecasts (uniform weights)

    Positive statistics favor ``logdens_a``. The long-run variance of the
    differences uses Bartlett weights with ``floor(4 * (n/100)**(2/9))`` lags.

    >>> a = np.linspace(-1, 1, 10)
    >>> r = wlr_test(a, a)
    >>> r.wlr_hat, r.t_stat, r.p_right
    (0.0, 0.0, 0.5)

    Raises:
        InvalidInputError: On a length mismatch, fewer than 8 pairs or
            non-finite values
    """
    a = np.asarray(logdens_a, dtype=float)
    b = np.asarray(logdens_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError('Log density sequences must have equal length', (a.shape, b.shape))
    n = len(a)
    if n < 8:
        raise InvalidInputError('At least 8 pairs are required', n)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InvalidInputError('Log densities must be finite')
    d = a - b
    wlr_hat = float(d.mean())
    sigma = math.sqrt(_newey_west_var(d))
    if sigma <= 1e-14 * max(1., abs(wlr_hat)):
        if wlr_hat == 0:
            t_stat = 0.
        else:
            t_stat = math.copysign(math.inf, wlr_hat)
        sigma = 0.
    else:
        t_stat = math.sqrt(n) * wlr_hat / sigma
    return WlrResult(wlr_hat, sigma, t_stat, float(stats.norm.cdf(t_stat)), n)

def select_beta(history: Mapping[float, Sequence[ForecastRecord]], horizon: int,
                origin: Optional[int] = None, warm_start: float = 0.5,
                criterion: str = 'msfe') -> float:
    """Choose the grid value with the best past score at ``horizon``

    Only records whose realization is complete at ``origin``
    (``record.origin + horizon <= origin``) count. Ties go to the smaller
    ``beta``.

    Arguments:
        history: Forecast records keyed by ``beta``
        horizon: The horizon to optimize
        origin: The decision origin. If ``None``, every record counts
        warm_start: Returned (snapped to the nearest grid value) while any
            grid value has no completed record
        criterion: ``'msfe'`` (minimize) or ``'log_score'`` (maximize mean
            log predictive density)

    >>> hist = {
    ...     0.15: [ForecastRecord(40, 1, 2.5, -1., 2.)],
    ...     1.0: [ForecastRecord(40, 1, 2.9, -1.2, 2.)],
    ... }
    >>> select_beta(hist, 1)
    0.15
    """
    if criterion not in ('msfe', 'log_score'):
        raise InvalidInputError('Unknown criterion', criterion)
    grid = sorted(history)
    if not grid:
        raise InvalidInputError('Empty beta grid')
    scores = {}
    for beta in grid:
        done = [
            r for r in history[beta]
            if r.horizon == horizon and (origin is None or r.origin + r.horizon <= origin)
        ]
        if not done:
            return min(grid, key=lambda b: (abs(b - warm_start), b))
        if criterion == 'msfe':
            scores[beta] = msfe(done, horizon)
        else:
            scores[beta] = -float(np.mean([r.log_density for r in done]))
    best = grid[0]
    for beta in grid[1:]:
        if scores[beta] < scores[best]:
            best = beta
    return best


@dataclass(frozen=True)
class EvalConfig:
    """Settings for :func:`run_recursive_evaluation`"""
    eval_start: str = '1990Q1' #: Label of the first forecast origin
    horizons: Tuple[int, ...] = DEFAULT_HORIZONS
    grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    seed: int = 0
    n_paths: int = DEFAULT_N_PATHS #: RMD-X paths per fit
    rmdn: RmdnConfig = field(default_factory=RmdnConfig)
    opts: OptimizerSettings = field(default_factory=OptimizerSettings)
    threads: int = 1
    warm_start: float = 0.5
    criterion: str = 'msfe'
    min_train: int = 40 #: Fewest observations before the first origin
    max_failure_rate: float = 0.2

    def __post_init__(self):
        horizons = tuple(sorted(set(int(h) for h in self.horizons)))
        grid = tuple(sorted(set(float(b) for b in self.grid)))
        if not horizons or horizons[0] < 1:
            raise InvalidInputError('Horizons must be >= 1', self.horizons)
        if not grid or grid[0] <= 0 or grid[-1] > 1:
            raise InvalidInputError('Grid values must be in (0, 1]', self.grid)
        if self.criterion not in ('msfe', 'log_score'):
            raise InvalidInputError('Unknown criterion', self.criterion)
        object.__setattr__(self, 'horizons', horizons)
        object.__setattr__(self, 'grid', grid)


@dataclass
class EvalRow:
    """One row of an :class:`EvalReport`"""
    model: str
    estimator: str
    beta_strategy: str
    horizon: int
    msfe: float
    wlr: float
    wlr_se: float
    wlr_t: float
    wlr_p: float
    n_forecasts: int


@dataclass
class EvalReport:
    """Result of a recursive evaluation
    """
    rows: list[EvalRow]
    beta_schedule: list[dict]
    """Chosen ``beta`` per origin for each optimized horizon"""

    benchmarks: list[dict]
    """Naive 2% MSFE on the same origins and published reference values"""

    records: Dict[str, list[ForecastRecord]] = field(default_factory=dict)
    """Forecast records per strategy"""

    n_origins: int = 0
    n_failed: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(REPORT_COLUMNS))

    def schedule_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.beta_schedule, columns=['origin', 'label', 'horizon', 'beta'])

    def benchmarks_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.benchmarks, columns=['model', 'horizon', 'msfe', 'source'])

    def to_csv(self, filename: Union[str, Path]):
        self.to_frame().to_csv(filename, index=False, float_format='%.10g')

    def to_dict(self) -> dict:
        return {
            'rows': self.to_frame().to_dict(orient='records'),
            'beta_schedule': self.beta_schedule,
            'benchmarks': self.benchmarks,
            'n_origins': self.n_origins,
            'n_failed': self.n_failed,
        }

    def to_json(self, filename: Union[str, Path, None] = None) -> str:
        s = json.dumps(self.to_dict(), indent=2, default=_json_default)
        if filename is not None:
            Path(filename).write_text(s)
        return s


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f'Cannot serialize {obj!r}')


class RecursiveEvaluator(Dispatcher):
    """Runs the recursive (expanding window) forecast evaluation

    :Events:
        .. event:: on_origin(evaluator: RecursiveEvaluator, origin: int, label: str)

            Fired when an origin has been forecast for every ``beta``

        .. event:: on_origin_failed(evaluator: RecursiveEvaluator, origin: int, exc: Exception)

            Fired when estimation failed at an origin
    """
    _events_ = ['on_origin', 'on_origin_failed']

    def __init__(self, series: TimeSeries, family: ModelFamily,
                 estimator: Estimator = Estimator.RMD_N,
                 config: Optional[EvalConfig] = None):
        if config is None:
            config = EvalConfig()
        self.series = series
        self.family = family
        self.estimator = Estimator.from_str(estimator)
        self.config = config
        grid = set(config.grid) | {1.}
        if self.estimator == Estimator.NONE:
            grid = {1.}
        self.grid = tuple(sorted(grid))
        self.start = series.position(config.eval_start)
        if self.start < config.min_train:
            raise InvalidInputError(
                f'eval_start leaves fewer than {config.min_train} training observations',
                self.start,
            )
        self.origins = list(range(self.start, len(series)))
        self.history: Dict[float, list[ForecastRecord]] = {b: [] for b in self.grid}
        self.failed: Dict[int, Exception] = {}

    @property
    def strategies(self) -> list[str]:
        names = [f'beta={b:g}' for b in self.grid]
        if len(self.grid) > 1:
            names.extend(f'Q{q}' for q in self.config.horizons)
        return names

    def _record(self, beta: float, origin: int, h: int, mean: float, log_density: float):
        realized = float(self.series.values[origin:origin + h].mean())
        self.history[beta].append(ForecastRecord(
            origin=origin, horizon=h, point=float(mean),
            log_density=float(log_density), realized=realized, beta=beta,
        ))

    def _fail(self, origin: int, exc: Exception):
        if origin not in self.failed:
            self.failed[origin] = exc
            logger.warning(f'origin {self.series.index[origin - 1]} failed: {exc}')
            self.emit('on_origin_failed', self, origin, exc)

    def _run_rmdx(self):
        cfg = self.config
        h_max = max(cfg.horizons)
        for origin in self.origins:
            horizons = [h for h in cfg.horizons if origin + h <= len(self.series)]
            if not horizons:
                continue
            data = self.series.head(origin)
            for i, beta in enumerate(self.grid):
                seed = int(stream(cfg.seed, origin, i).integers(2 ** 63))
                try:
                    res = rmd_x_estimate(
                        self.family, data, beta, n_paths=cfg.n_paths, h_max=h_max,
                        seed=seed, threads=cfg.threads, horizons=horizons, opts=cfg.opts,
                    )
                except RmdError as exc:
                    self._fail(origin, exc)
                    continue
                for h in horizons:
                    mix = res.average_mixtures[h]
                    realized = float(self.series.values[origin:origin + h].mean())
                    self._record(beta, origin, h, mix.mean, mix.logpdf(realized))
            self.emit('on_origin', self, origin, self.series.index[origin - 1])

    def _run_rmdn(self):
        cfg = self.config
        origins = set(self.origins)
        T = len(self.series)
        rmdn_cfg = RmdnConfig(**{**_shallow_dict(cfg.rmdn), 'horizons': ()})
        for i, beta in enumerate(self.grid):
            system = ThetaParticleSystem.from_prior(
                self.family, beta, _with_seed(rmdn_cfg, cfg.seed, i),
                init_mean=float(self.series.values[0]), expected_length=T,
            )

            def on_step(system, t, beta=beta):
                if t not in origins:
                    return
                for h in cfg.horizons:
                    if t + h > T:
                        continue
                    mix = system.forecast_average(h)
                    realized = float(self.series.values[t:t + h].mean())
                    self._record(beta, t, h, mix.mean, mix.logpdf(realized))

            system.bind(on_step=on_step)
            try:
                fit_rmd_n(self.family, self.series, beta, system.config, system=system)
            except RmdError as exc:
                logger.warning(f'rmd-n beta={beta} stopped at t={system.t}: {exc}')
                for origin in self.origins:
                    if origin > system.t:
                        self._fail(origin, exc)
        for origin in self.origins:
            if origin not in self.failed:
                self.emit('on_origin', self, origin, self.series.index[origin - 1])

    def _strategy_records(self) -> Tuple[Dict[str, list[ForecastRecord]], list[dict]]:
        by_key = {
            (b, r.origin, r.horizon): r for b, recs in self.history.items() for r in recs
        }
        records = {f'beta={b:g}': list(self.history[b]) for b in self.grid}
        schedule = []
        if len(self.grid) > 1:
            for q in self.config.horizons:
                recs = []
                for origin in self.origins:
                    beta = select_beta(
                        self.history, q, origin=origin,
                        warm_start=self.config.warm_start, criterion=self.config.criterion,
                    )
                    schedule.append(dict(
                        origin=origin, label=self.series.index[origin - 1],
                        horizon=q, beta=beta,
                    ))
                    for h in self.config.horizons:
                        r = by_key.get((beta, origin, h))
                        if r is not None:
                            recs.append(r)
                records[f'Q{q}'] = recs
        return records, schedule

    def _rows(self, records: Dict[str, list[ForecastRecord]]) -> list[EvalRow]:
        rows = []
        base = {(r.origin, r.horizon): r for r in records[BASELINE]}
        for name in self.strategies:
            for h in self.config.horizons:
                recs = [r for r in records[name] if r.horizon == h]
                if not recs:
                    continue
                pairs = [(r, base[(r.origin, h)]) for r in recs if (r.origin, h) in base]
                wlr = _nan_wlr()
                if len(pairs) >= 8:
                    try:
                        wlr = wlr_test([a.log_density for a, _ in pairs],
                                       [b.log_density for _, b in pairs])
                    except InvalidInputError as exc:
                        logger.debug(f'wlr skipped for {name} h={h}: {exc}')
                rows.append(EvalRow(
                    model=str(self.family), estimator=self.estimator.to_str(),
                    beta_strategy=name, horizon=h, msfe=msfe(recs, h),
                    wlr=wlr.wlr_hat, wlr_se=wlr.sigma_hat, wlr_t=wlr.t_stat,
                    wlr_p=wlr.p_right, n_forecasts=len(recs),
                ))
        return rows

    def _benchmarks(self) -> list[dict]:
        out = []
        T = len(self.series)
        for h in self.config.horizons:
            recs = [
                ForecastRecord(o, h, naive_two_percent(h), math.nan,
                               float(self.series.values[o:o + h].mean()))
                for o in self.origins if o + h <= T
            ]
            if recs:
                out.append(dict(model='naive-2%', horizon=h, msfe=msfe(recs, h), source='computed'))
            if h in UCSVO_REFERENCE_MSFE:
                out.append(dict(model='ucsvo', horizon=h, msfe=UCSVO_REFERENCE_MSFE[h], source='reference'))
        return out

    def run(self) -> EvalReport:
        """Forecast every origin and assemble the report

        Raises:
            EvaluationFailure: If more than
                :attr:`EvalConfig.max_failure_rate` of the origins failed
        """
        logger.info(
            f'evaluating {self.family} {self.estimator} over {len(self.origins)} origins, '
            f'grid={self.grid}',
        )
        if self.estimator == Estimator.RMD_N:
            self._run_rmdn()
        else:
            self._run_rmdx()
        n_origins = len(self.origins)
        n_failed = len(self.failed)
        if n_failed > self.config.max_failure_rate * n_origins:
            raise EvaluationFailure(f'{n_failed} of {n_origins} origins failed', n_failed)
        for recs in self.history.values():
            recs.sort(key=lambda r: (r.origin, r.horizon))
        records, schedule = self._strategy_records()
        report = EvalReport(
            rows=self._rows(records), beta_schedule=schedule,
            benchmarks=self._benchmarks(), records=records,
            n_origins=n_origins, n_failed=n_failed,
        )
        logger.info(f'evaluation done: {len(report.rows)} rows, {n_failed} failed origins')
        return report


def _shallow_dict(obj) -> dict:
    return {name: getattr(obj, name) for name in obj.__dataclass_fields__}

def _with_seed(config: RmdnConfig, seed: int, i: int) -> RmdnConfig:
    sub = int(stream(seed, 2 ** 31, i).integers(2 ** 63))
    return RmdnConfig(**{**_shallow_dict(config), 'seed': sub})

def _nan_wlr() -> WlrResult:
    return WlrResult(math.nan, math.nan, math.nan, math.nan, 0)

def run_recursive_evaluation(series: TimeSeries, family: ModelFamily,
                             estimator: Union[Estimator, str] = Estimator.RMD_N,
                             grid: Optional[Sequence[float]] = None,
                             horizons: Optional[Sequence[int]] = None,
                             eval_start: Optional[str] = None,
                             config: Optional[EvalConfig] = None) -> EvalReport:
    """Recursive evaluation with per-origin re-estimation

    ``grid``, ``horizons`` and ``eval_start`` override the matching fields of
    ``config``. The ``beta = 1`` baseline is always part of the grid.
    """
    if config is None:
        config = EvalConfig()
    overrides = {}
    if grid is not None:
        overrides['grid'] = tuple(grid)
    if horizons is not None:
        overrides['horizons'] = tuple(horizons)
    if eval_start is not None:
        overrides['eval_start'] = eval_start
    if overrides:
        config = EvalConfig(**{**_shallow_dict(config), **overrides})
    return RecursiveEvaluator(series, family, estimator, config).run()
