import pytest

from actlm import autodiff as ad


@pytest.fixture(autouse=True)
def _restore_precision():
    yield
    ad.set_precision("train")


@pytest.fixture
def verify_mode():
    ad.set_precision("verify")
    yield
    ad.set_precision("train")
