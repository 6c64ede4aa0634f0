from __future__ import annotations
import dataclasses
from dataclasses import dataclass
import json
import os
from pathlib import Path
from typing import Optional, Tuple, Union, Any, Dict

from rmdfilter.common import (
    ModelTag, Estimator, Mechanism, ConfigError, InvalidInputError,
)
from rmdfilter.models import ModelFamily
from rmdfilter.mle import OptimizerSettings
from rmdfilter.rmdn import RmdnConfig
from rmdfilter.data import ContaminationSpec
from rmdfilter.statespace import LinearGaussianModel
from rmdfilter.evaluation import EvalConfig, DEFAULT_BETA_GRID, DEFAULT_HORIZONS

__all__ = ('RunConfig', 'THREADS_ENV', 'STOCHASTIC_COMMANDS')

THREADS_ENV = 'RMD_THREADS'
"""Environment variable used when no thread count is configured"""

STOCHASTIC_COMMANDS = ('simulate', 'fit', 'forecast', 'evaluate', 'select-beta')


@dataclass(frozen=True)
class RunConfig:
    """Settings for a command line run

    Values are read from a JSON file with :meth:`from_json` (keys are the
    field names, ``-`` and ``_`` interchangeable) and overridden by command
    line flags with :meth:`merge`.
    """
    family: ModelTag = ModelTag.UC
    estimator: Estimator = Estimator.RMD_N
    beta: Optional[Tuple[float, ...]] = None
    """Inclusion probabilities for ``fit`` and ``forecast``"""

    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    horizons: Tuple[int, ...] = DEFAULT_HORIZONS
    n_paths: int = 200
    n_theta: int = 512
    inner_cap: int = 64
    ess_threshold: float = 0.5
    n_moves: int = 3
    fixed_lag: Optional[int] = None
    seed: Optional[int] = None
    input: Optional[str] = None #: Input ``date,value`` CSV file
    input_prices: bool = False
    """If ``True`` the input holds price levels and is converted to inflation"""

    output_dir: str = '.'
    eval_start: str = '1990Q1'
    threads: Optional[int] = None
    criterion: str = 'msfe'
    warm_start: float = 0.5
    theta_scale: str = 'log'
    max_iter: int = 500
    T: int = 221 #: Simulated length
    start: str = '1960Q2' #: First simulated quarter
    state_sd: float = 0.35
    obs_sd: float = 0.5
    init_mean: float = 2.
    contamination_rate: float = 0.
    mechanism: Mechanism = Mechanism.ADDITIVE_SHIFT
    magnitude: float = 10.

    def __post_init__(self):
        try:
            object.__setattr__(self, 'family', ModelTag.from_str(self.family))
            object.__setattr__(self, 'estimator', Estimator.from_str(self.estimator))
            object.__setattr__(self, 'mechanism', Mechanism.from_str(self.mechanism))
        except InvalidInputError as exc:
            raise ConfigError(exc.msg, exc.value)
        if self.beta is not None:
            object.__setattr__(self, 'beta', _float_tuple(self.beta))
        object.__setattr__(self, 'beta_grid', _float_tuple(self.beta_grid))
        object.__setattr__(self, 'horizons', tuple(int(h) for h in _as_tuple(self.horizons)))
        for b in self.beta_grid + (self.beta or ()):
            if not 0 <= b <= 1:
                raise ConfigError('beta values must be in [0, 1]', b)
        if any(h < 1 for h in self.horizons) or not self.horizons:
            raise ConfigError('horizons must be >= 1', self.horizons)
        if self.threads is not None and self.threads < 1:
            raise ConfigError('threads must be positive', self.threads)
        if self.criterion not in ('msfe', 'log_score'):
            raise ConfigError('Unknown criterion', self.criterion)
        if self.theta_scale not in ('log', 'natural'):
            raise ConfigError('Unknown theta_scale', self.theta_scale)
        if self.T < 2:
            raise ConfigError('T must be >= 2', self.T)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> RunConfig:
        names = set(cls.field_names())
        kw = {}
        for key, val in d.items():
            name = key.replace('-', '_')
            if name not in names:
                raise ConfigError('Unknown configuration key', key)
            kw[name] = val
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc))

    @classmethod
    def from_json(cls, filename: Union[str, Path]) -> RunConfig:
        try:
            d = json.loads(Path(filename).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError('Invalid JSON configuration', str(exc))
        if not isinstance(d, dict):
            raise ConfigError('Configuration must be a JSON object', filename)
        return cls.from_dict(d)

    def merge(self, **overrides) -> RunConfig:
        """Copy with the given (non-``None``) values replaced"""
        d = {k: getattr(self, k) for k in self.field_names()}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return self.from_dict(d)

    @property
    def resolved_threads(self) -> int:
        """:attr:`threads`, else :data:`THREADS_ENV`, else 1"""
        if self.threads is not None:
            return self.threads
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f'Invalid {THREADS_ENV}', env)
        if n < 1:
            raise ConfigError(f'Invalid {THREADS_ENV}', env)
        return n

    @property
    def betas(self) -> Tuple[float, ...]:
        """:attr:`beta` if set, otherwise :attr:`beta_grid`"""
        return self.beta if self.beta is not None else self.beta_grid

    def validate(self, command: str):
        """Check the settings required by a command

        Raises:
            ConfigError: If a seed is missing for a stochastic command or the
                input file does not exist
        """
        if command in STOCHASTIC_COMMANDS and self.seed is None:
            raise ConfigError(f'A seed is required for "{command}"')
        if command != 'simulate':
            if self.input is None:
                raise ConfigError(f'An input file is required for "{command}"')
            if not Path(self.input).exists():
                raise ConfigError('Input file does not exist', self.input)

    def model_family(self) -> ModelFamily:
        return ModelFamily.create(self.family)

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(max_iter=self.max_iter)

    def rmdn_config(self) -> RmdnConfig:
        return RmdnConfig(
            n_theta=self.n_theta, inner_cap=self.inner_cap,
            ess_threshold=self.ess_threshold, n_moves=self.n_moves,
            seed=self.seed or 0, fixed_lag=self.fixed_lag, horizons=self.horizons,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            eval_start=self.eval_start, horizons=self.horizons,
            grid=tuple(b for b in self.beta_grid if b > 0), seed=self.seed or 0,
            n_paths=self.n_paths, rmdn=self.rmdn_config(),
            opts=self.optimizer_settings(), threads=self.resolved_threads,
            warm_start=self.warm_start, criterion=self.criterion,
        )

    def simulation_model(self) -> LinearGaussianModel:
        """The UC model used by ``simulate``"""
        return LinearGaussianModel(
            state_const=0., state_coef=1., state_sd=self.state_sd,
            obs_sd=self.obs_sd, init_mean=self.init_mean, init_var=0.,
        )

    def contamination(self) -> ContaminationSpec:
        try:
            return ContaminationSpec(
                rate=self.contamination_rate, mechanism=self.mechanism,
                magnitude=self.magnitude, seed=self.seed or 0,
            )
        except InvalidInputError as exc:
            raise ConfigError(exc.msg, exc.value)


def _as_tuple(v) -> tuple:
    if isinstance(v, str):
        return tuple(s for s in v.split(',') if s.strip())
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return (v,)

def _float_tuple(v) -> Tuple[float, ...]:
    return tuple(float(x) for x in _as_tuple(v))
