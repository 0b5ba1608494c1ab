from functools import lru_cache

import pytest
from hypothesis import settings

from mplab.ensembles import build_operator

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@lru_cache(maxsize=4)
def _cached_operator(spec, n, seed_u, seed_v):
    return build_operator(spec, n, seed_u, seed_v)


@pytest.fixture(scope="session")
def operator_cache():
    """Memoised ``build_operator`` keyed on ``(spec, n, seed_u, seed_v)``."""
    return _cached_operator
