import numpy as np
import pytest

from models.schemas import BoxDomain, GroupKind, GroupSpec, TestPoint
from services.algebra import make_rng
from services.energies import catalog_get, frobenius2


def identity_point(n: int) -> TestPoint:
    return TestPoint(F=tuple(tuple(1.0 if i == j else 0.0 for j in range(n)) for i in range(n)))


def as_point(F) -> TestPoint:
    return TestPoint(F=tuple(tuple(float(v) for v in row) for row in np.asarray(F)))


@pytest.fixture
def unit_square() -> BoxDomain:
    return BoxDomain.unit(2)


@pytest.fixture
def coarse_square() -> BoxDomain:
    return BoxDomain.unit(2, cells=4)


@pytest.fixture
def fine_square() -> BoxDomain:
    return BoxDomain.unit(2, cells=16)


@pytest.fixture
def unit_cube() -> BoxDomain:
    return BoxDomain.unit(3, cells=2)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def full_diff_2d() -> GroupSpec:
    return GroupSpec(kind=GroupKind.FULL_DIFF, n=2)


@pytest.fixture
def volume_preserving_2d() -> GroupSpec:
    return GroupSpec(kind=GroupKind.VOLUME_PRESERVING, n=2)


@pytest.fixture
def frobenius_2d():
    return frobenius2(2)


@pytest.fixture
def stvk_2d():
    return catalog_get("stvk", {"lam": 1.0, "mu": 1.0}, 2)


@pytest.fixture(autouse=True)
def _isolate_environment(monkeypatch, tmp_path):
    # log files and env overrides stay per test
    monkeypatch.delenv("VARINV_SEED", raising=False)
    monkeypatch.delenv("VARINV_JOBS", raising=False)
    monkeypatch.chdir(tmp_path)
