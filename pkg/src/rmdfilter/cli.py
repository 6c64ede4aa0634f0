"""Command line interface

::

    rmdfilter simulate --seed 1 --output-dir data/
    rmdfilter fit --input data/series.csv --beta 0.15,1 --seed 1
    rmdfilter evaluate --config run.json --beta-grid 0.15,0.25,1 --eval-start 1990Q1
"""
from __future__ import annotations
try:
    from loguru import logger
except ImportError: # pragma: no cover
    import logging
    logger = logging.getLogger(__name__)
import argparse
import json
from pathlib import Path
import sys
from typing import Optional, Sequence, Dict, Any

import numpy as np
import pandas as pd

from rmdfilter.utils import logger_catch
from rmdfilter.common import (
    Estimator, RmdError, InvalidInputError, EstimationFailure,
    ConvergenceError, EvaluationFailure, UnderIdentifiedError,
)
from rmdfilter.statespace import TimeSeries
from rmdfilter.models import naive_two_percent
from rmdfilter.rmdx import rmd_x_estimate
from rmdfilter.rmdn import (
    ThetaParticleSystem, fit_rmd_n, flag_outliers, weighted_quantile,
)
from rmdfilter.evaluation import RecursiveEvaluator, select_beta
from rmdfilter.data import (
    read_series_csv, read_price_csv, to_inflation, write_series_csv,
    simulate_contaminated,
)
from rmdfilter.config import RunConfig

__all__ = (
    'main', 'cmd_simulate', 'cmd_fit', 'cmd_forecast', 'cmd_evaluate',
    'cmd_select_beta', 'build_parser', 'EXIT_OK', 'EXIT_CONFIG', 'EXIT_ESTIMATION', 'EXIT_IO',
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ESTIMATION = 3
EXIT_IO = 4

QUANTILES = (0.01, 0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975, 0.99)
BANDS = {'50': (0.25, 0.75), '90': (0.05, 0.95), '98': (0.01, 0.99)}


class CommaListAction(argparse.Action):
    """Parse a comma-separated list of values (``--beta-grid 0.15,0.25,1``)
    """
    def __init__(self, option_strings, dest, item_type=float, **kwargs):
        self.item_type = item_type
        super().__init__(option_strings, dest, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        try:
            items = tuple(self.item_type(s) for s in values.split(',') if s.strip())
        except ValueError:
            parser.error(f'invalid list for {option_string}: {values!r}')
        if not items:
            parser.error(f'empty list for {option_string}')
        setattr(namespace, self.dest, items)


def _load_series(config: RunConfig) -> TimeSeries:
    if config.input_prices:
        return to_inflation(read_price_csv(config.input))
    return read_series_csv(config.input)

def _output_dir(config: RunConfig) -> Path:
    p = Path(config.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p

def _write_json(filename: Path, data: Any):
    filename.write_text(json.dumps(data, indent=2, default=_json_default))
    logger.info(f'wrote {filename}')

def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f'Cannot serialize {obj!r}')

def _summarize(samples: np.ndarray, weights: np.ndarray) -> Dict[str, Any]:
    q = dict(zip(QUANTILES, weighted_quantile(samples, weights, QUANTILES)))
    return {
        'p2.5': float(q[0.025]), 'p50': float(q[0.5]), 'p97.5': float(q[0.975]),
        'bands': {k: [float(q[lo]), float(q[hi])] for k, (lo, hi) in BANDS.items()},
    }

@logger_catch
def _log_rmdn_resample(system, t, ess):
    logger.debug(f'beta={system.beta} t={t}: resampled (ess={ess:.1f}, n={system.n_resample})')

@logger_catch
def _log_origin(evaluator, origin, label):
    logger.debug(f'origin {label} done')

@logger_catch
def _log_origin_failed(evaluator, origin, exc):
    logger.debug(f'origin {origin} failed: {exc!r}')


def cmd_simulate(config: RunConfig) -> Dict[str, Path]:
    """Write a simulated UC series (``series.csv``) and its truth
    (``truth.json``)
    """
    config.validate('simulate')
    out = _output_dir(config)
    series, truth = simulate_contaminated(
        config.simulation_model(), config.T, config.contamination(), start=config.start,
    )
    files = {'series': out / 'series.csv', 'truth': out / 'truth.json'}
    write_series_csv(series, files['series'])
    truth.to_json(files['truth'])
    logger.info(f'simulated {len(series)} observations, {len(series) - truth.inclusion.count} contaminated')
    return files

def _fit_block(config: RunConfig, series: TimeSeries, beta: float) -> Dict[str, Any]:
    family = config.model_family()
    block: Dict[str, Any] = {
        'beta': beta, 'family': str(family), 'estimator': config.estimator.to_str(),
    }
    if config.estimator == Estimator.RMD_N:
        system, inclusion, _ = _fit_rmdn(config, series, beta)
        w = system.weights
        block['params'] = {
            name: _summarize(system.thetas[:, j], w) for j, name in enumerate(family.param_names)
        }
        block['log_evidence'] = system.log_evidence
        block['outliers'] = [series.index[i] for i in flag_outliers(inclusion)]
    else:
        if config.estimator == Estimator.NONE:
            beta = 1.
            block['beta'] = beta
        res = rmd_x_estimate(
            family, series, beta, n_paths=config.n_paths, h_max=max(config.horizons),
            seed=config.seed, theta_scale=config.theta_scale,
            threads=config.resolved_threads, opts=config.optimizer_settings(),
            keep_per_path=True,
        )
        thetas = np.stack([r.theta for r in res.per_path])
        w = np.full(len(thetas), 1 / len(thetas))
        block['theta_bar'] = dict(zip(family.param_names, res.theta_bar))
        block['params'] = {
            name: _summarize(thetas[:, j], w) for j, name in enumerate(family.param_names)
        }
        block['n_paths'] = res.n_paths
        block['n_failed'] = res.n_failed
    return block

def _fit_rmdn(config: RunConfig, series: TimeSeries, beta: float):
    system = ThetaParticleSystem.from_prior(
        config.model_family(), beta, config.rmdn_config(),
        init_mean=float(series.values[0]), expected_length=len(series),
    )
    system.bind(on_resample=_log_rmdn_resample)
    return fit_rmd_n(config.model_family(), series, beta, system.config, system=system)

def cmd_fit(config: RunConfig) -> Path:
    """Parameter report (``fit.json``) with one block per ``beta``"""
    config.validate('fit')
    series = _load_series(config)
    betas = (1.,) if config.estimator == Estimator.NONE else config.betas
    blocks = [_fit_block(config, series, beta) for beta in betas]
    filename = _output_dir(config) / 'fit.json'
    _write_json(filename, {'blocks': blocks})
    return filename

def cmd_forecast(config: RunConfig) -> Path:
    """Forecasts of the h-step averages from the end of the sample
    (``forecast.json``)
    """
    config.validate('forecast')
    series = _load_series(config)
    family = config.model_family()
    blocks = []
    for beta in config.betas:
        entry = {'beta': beta, 'origin': series.index[-1], 'horizons': {}}
        if config.estimator == Estimator.RMD_N:
            system, _, _ = _fit_rmdn(config, series, beta)
            mixtures = {h: system.forecast_average(h) for h in config.horizons}
        else:
            res = rmd_x_estimate(
                family, series, 1. if config.estimator == Estimator.NONE else beta,
                n_paths=config.n_paths, h_max=max(config.horizons), seed=config.seed,
                threads=config.resolved_threads, horizons=config.horizons,
                opts=config.optimizer_settings(),
            )
            mixtures = res.average_mixtures
        for h, mix in mixtures.items():
            entry['horizons'][str(h)] = {
                'mean': mix.mean, 'var': mix.var, 'naive': naive_two_percent(h),
            }
        blocks.append(entry)
    filename = _output_dir(config) / 'forecast.json'
    _write_json(filename, {'family': str(family), 'blocks': blocks})
    return filename

def _run_evaluator(config: RunConfig, series: TimeSeries):
    evaluator = RecursiveEvaluator(
        series, config.model_family(), config.estimator, config.eval_config(),
    )
    evaluator.bind(on_origin=_log_origin, on_origin_failed=_log_origin_failed)
    return evaluator, evaluator.run()

def _overlays(config: RunConfig, series: TimeSeries, beta: float):
    family = config.model_family()
    frame = pd.DataFrame({'date': list(series.index), 'value': series.values})
    inclusion = None
    for label, b in (('beta=1', 1.), ('selected', beta)):
        if config.estimator == Estimator.RMD_N:
            _, incl, steps = _fit_rmdn(config, series, b)
            frame[label] = [s.filtered_mean for s in steps]
            if label == 'selected':
                inclusion = incl
        else:
            res = rmd_x_estimate(
                family, series, b, n_paths=config.n_paths, h_max=1, seed=config.seed,
                threads=config.resolved_threads, opts=config.optimizer_settings(),
            )
            frame[label] = res.x_bar
    return frame, inclusion

def cmd_evaluate(config: RunConfig) -> Dict[str, Path]:
    """Recursive evaluation report and plot-ready series

    Writes ``report.csv``, ``report.json``, ``beta_schedule.csv``,
    ``benchmarks.csv``, ``filtered_means.csv`` and, for RMD-N,
    ``smoothed_inclusion.csv``
    """
    config.validate('evaluate')
    series = _load_series(config)
    evaluator, report = _run_evaluator(config, series)
    out = _output_dir(config)
    files = {
        'report': out / 'report.csv', 'json': out / 'report.json',
        'schedule': out / 'beta_schedule.csv', 'benchmarks': out / 'benchmarks.csv',
        'filtered': out / 'filtered_means.csv',
    }
    report.to_csv(files['report'])
    report.to_json(files['json'])
    report.schedule_frame().to_csv(files['schedule'], index=False)
    report.benchmarks_frame().to_csv(files['benchmarks'], index=False)
    schedule = report.schedule_frame()
    q = max(config.horizons)
    chosen = schedule[schedule['horizon'] == q]
    beta = float(chosen['beta'].iloc[-1]) if len(chosen) else evaluator.grid[0]
    frame, inclusion = _overlays(config, series, beta)
    frame.to_csv(files['filtered'], index=False, float_format='%.10g')
    if inclusion is not None:
        files['inclusion'] = out / 'smoothed_inclusion.csv'
        pd.DataFrame({
            'date': list(series.index), 'beta': beta, 'prob': inclusion.probs,
        }).to_csv(files['inclusion'], index=False, float_format='%.10g')
    logger.info(f'wrote evaluation outputs to {out}')
    return files

def cmd_select_beta(config: RunConfig) -> Path:
    """Run the recursive evaluation and report the ``beta`` chosen with all
    completed forecasts, per horizon (``beta_selection.json``)
    """
    config.validate('select-beta')
    series = _load_series(config)
    evaluator, report = _run_evaluator(config, series)
    out = _output_dir(config)
    report.schedule_frame().to_csv(out / 'beta_schedule.csv', index=False)
    chosen = {
        str(h): select_beta(
            evaluator.history, h, warm_start=config.warm_start, criterion=config.criterion,
        ) for h in config.horizons
    }
    filename = out / 'beta_selection.json'
    _write_json(filename, {'criterion': config.criterion, 'beta': chosen})
    return filename


COMMANDS = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'forecast': cmd_forecast,
    'evaluate': cmd_evaluate,
    'select-beta': cmd_select_beta,
}

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='rmdfilter')
    p.add_argument('command', choices=list(COMMANDS))
    p.add_argument('--config', dest='config_file', help='JSON configuration file')
    p.add_argument('--family', choices=['uc', 'ar', 'armf', 'uc-t'])
    p.add_argument('--estimator', choices=['rmd-x', 'rmd-n', 'none'])
    p.add_argument('--beta', action=CommaListAction, help='Comma-separated beta values')
    p.add_argument('--beta-grid', action=CommaListAction)
    p.add_argument('--horizons', action=CommaListAction, item_type=int)
    p.add_argument('--n-paths', type=int)
    p.add_argument('--n-theta', type=int)
    p.add_argument('--inner-cap', type=int)
    p.add_argument('--ess-threshold', type=float)
    p.add_argument('--fixed-lag', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--input')
    p.add_argument('--input-prices', action='store_const', const=True)
    p.add_argument('--output-dir')
    p.add_argument('--eval-start')
    p.add_argument('--threads', type=int)
    p.add_argument('--criterion', choices=['msfe', 'log_score'])
    p.add_argument('--theta-scale', choices=['log', 'natural'])
    p.add_argument('--T', dest='T', type=int)
    p.add_argument('--start')
    p.add_argument('--state-sd', type=float)
    p.add_argument('--obs-sd', type=float)
    p.add_argument('--contamination-rate', type=float)
    p.add_argument('--mechanism', choices=['additive-shift', 'predictive-replacement'])
    p.add_argument('--magnitude', type=float)
    return p

def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        k: v for k, v in vars(args).items() if k not in ('command', 'config_file')
    }
    try:
        if args.config_file is not None:
            config = RunConfig.from_json(args.config_file)
        else:
            config = RunConfig()
        config = config.merge(**overrides)
        COMMANDS[args.command](config)
    except InvalidInputError as exc:
        logger.error(f'invalid configuration: {exc}')
        return EXIT_CONFIG
    except (EstimationFailure, ConvergenceError, EvaluationFailure, UnderIdentifiedError) as exc:
        logger.error(f'estimation failed: {exc}')
        return EXIT_ESTIMATION
    except RmdError as exc:
        logger.error(f'{exc}')
        return EXIT_ESTIMATION
    except OSError as exc:
        logger.error(f'I/O error: {exc}')
        return EXIT_IO
    return EXIT_OK

if __name__ == '__main__':
    sys.exit(main())
