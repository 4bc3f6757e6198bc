from importlib import resources

import numpy as np
import pytest

from specfim.basis import BasisSpec
from specfim.fim import build_forms
from specfim.model import MimoSystem, ParameterIndex, RationalTF, load_system


def data_path(name):
    return resources.files("specfim") / "data" / name


@pytest.fixture(scope="session")
def actual():
    return load_system(data_path("paper_actual.json"))


@pytest.fixture(scope="session")
def nominal():
    return load_system(data_path("paper_nominal.json"))


@pytest.fixture(scope="session")
def spec13():
    return BasisSpec("chebyshev", 13, 1.0)


@pytest.fixture(scope="session")
def forms13(nominal, spec13):
    return build_forms(nominal, ParameterIndex.from_system(nominal), spec13, 1000.0, 1000.0)


def random_stable_tf(rng, max_order=2):
    """Random strictly proper entry with stable real/complex poles and order 1..max_order."""
    n = int(rng.integers(1, max_order + 1))
    poles = []
    while len(poles) < n:
        if n - len(poles) >= 2 and rng.random() < 0.5:
            re, im = -rng.uniform(0.2, 1.5), rng.uniform(0.1, 1.5)
            poles += [complex(re, im), complex(re, -im)]
        else:
            poles.append(-rng.uniform(0.2, 1.5))
    den = np.real(np.poly(poles))[::-1]
    nb = int(rng.integers(0, n))
    num = rng.uniform(0.5, 3.0, nb + 1) * rng.choice([-1, 1], nb + 1)
    return RationalTF(num, den)


def random_system(rng, p=2, r=2, max_order=2):
    return MimoSystem([[random_stable_tf(rng, max_order) for _ in range(r)] for _ in range(p)], 1.0)
