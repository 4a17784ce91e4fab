import numpy as np
import pytest
import torch

from crnas import genome as gn
from crnas.data import synthetic_dataset
from crnas.supernet import Network, NetConfig, TrainConfig, accuracy, train_model, train_supernet

torch.set_num_threads(1)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def toy_data():
    train = synthetic_dataset(0, classes=10, size=1024, resolution=16)
    test = synthetic_dataset(1, classes=10, size=256, resolution=16, split="test")
    return train, test


TOY_GENOME = gn.parse("4,0,3,1,4,1,2,0,6,2,3,0,5,3,4,0,1,0,4,1,4,1,3,2,6,0,4,3,2,1,5,4")


@pytest.fixture(scope="session")
def toy_model(toy_data):
    """A standalone network trained to high clean accuracy on the synthetic set."""
    train, test = toy_data
    torch.manual_seed(0)
    model = Network(TOY_GENOME, NetConfig())
    train_model(model, train, TrainConfig(epochs=5, lr=0.05, seed=0))
    model.eval()
    model.requires_grad_(False)
    return model, accuracy(model, test)


@pytest.fixture(scope="session")
def small_supernet(toy_data):
    train, _ = toy_data
    net, history = train_supernet(train.subset(512), TrainConfig(epochs=2, seed=0, calibration=128))
    return net, history


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
