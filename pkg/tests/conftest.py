import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def compiled():
    """Memoised compile_model(ModelSpec(...), bits, rounding)."""
    from fhetrain.graph_ir import ModelSpec
    from fhetrain.trainer import compile_model

    cache = {}

    def get(kind="logistic", d=30, hidden=(), activation="sigmoid", batch=8, bits=4, rounding="truncate"):
        key = (kind, d, tuple(hidden), activation, batch, bits, rounding)
        if key not in cache:
            cache[key] = compile_model(ModelSpec(kind, d, tuple(hidden), activation, batch, 0), bits, rounding)
        return cache[key]

    return get
