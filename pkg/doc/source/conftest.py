import pytest

collect_ignore = ['conf.py', 'ext']


@pytest.fixture(autouse=True)
def doctest_stuff(doctest_namespace):
    import numpy as np
    doctest_namespace['np'] = np
    yield
