from pathlib import Path
import numpy as np
import pytest

from rmdfilter import (
    LinearGaussianModel, TimeSeries, ModelFamily, ContaminationSpec,
    simulate_contaminated,
)
from rmdfilter.utils import stream

HERE = Path(__file__).resolve().parent
DATA_DIR = HERE / 'data'
PRICE_FILE = DATA_DIR / 'price_levels.csv'

@pytest.fixture
def price_file() -> Path:
    """Twelve quarters of price index levels beginning at 2000Q1"""
    return PRICE_FILE

@pytest.fixture
def uc_family() -> ModelFamily:
    return ModelFamily.create('uc')

@pytest.fixture
def uc_model() -> LinearGaussianModel:
    return LinearGaussianModel(
        state_const=0., state_coef=1., state_sd=0.35, obs_sd=0.5,
        init_mean=2., init_var=1.,
    )

@pytest.fixture
def short_series() -> TimeSeries:
    values = stream(1234).normal(2., 1., 8)
    return TimeSeries.from_values(values, start='2001Q1')

@pytest.fixture
def clean_uc_series(uc_model):
    series, truth = simulate_contaminated(uc_model, 120, ContaminationSpec(seed=11))
    return series, truth

@pytest.fixture
def contaminated_uc_series(uc_model):
    spec = ContaminationSpec(rate=0.1, magnitude=10., seed=5)
    return simulate_contaminated(uc_model, 120, spec)

def random_model(faker, state_coef=None) -> LinearGaussianModel:
    a = state_coef
    if a is None:
        a = faker.pyfloat(min_value=0.1, max_value=1.)
    return LinearGaussianModel(
        state_const=faker.pyfloat(min_value=-1., max_value=1.),
        state_coef=a,
        state_sd=faker.pyfloat(min_value=0.1, max_value=2.),
        obs_sd=faker.pyfloat(min_value=0.1, max_value=2.),
        init_mean=faker.pyfloat(min_value=-3., max_value=3.),
        init_var=faker.pyfloat(min_value=0.1, max_value=5.),
    )

@pytest.fixture
def model_factory(faker):
    def factory(**kwargs):
        return random_model(faker, **kwargs)
    return factory
