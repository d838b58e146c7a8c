import numpy as np
import pytest

from bilevel_lab import build_csc, build_scsc
from bilevel_lab.presets import (
    benchmark_scsc_constants,
    mild_csc_constants,
    mild_scsc_constants,
)


@pytest.fixture(scope="session")
def mild_constants():
    return mild_scsc_constants()


@pytest.fixture(scope="session")
def benchmark_constants():
    return benchmark_scsc_constants(4.0)


@pytest.fixture(scope="session")
def csc_constants():
    return mild_csc_constants()


@pytest.fixture(scope="session")
def scsc_mild16(mild_constants):
    return build_scsc(16, mild_constants)


@pytest.fixture(scope="session")
def scsc_bench32(benchmark_constants):
    return build_scsc(32, benchmark_constants)


@pytest.fixture(scope="session")
def csc20(csc_constants):
    return build_csc(20, csc_constants, B=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
