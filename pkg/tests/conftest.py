import numpy as np
import pytest

from cumix.losses import Batch
from cumix.model import ModelConfig, init_model


def micro_model(seed, input_dim=5, hidden=(4,), embed_dim=3, n_classes=4, trainable=False, scale=1.0):
    rng = np.random.default_rng(seed)
    emb = None if trainable else rng.standard_normal((n_classes, embed_dim))
    cfg = ModelConfig(input_dim, embed_dim, n_classes, hidden, trainable, init_seed=seed)
    params = init_model(cfg, emb)
    # biases start at zero; randomize them so their gradients are exercised
    for name, t in params.tensors.items():
        if name.endswith("bias"):
            params.tensors[name] = rng.standard_normal(t.shape) * 0.3
        elif name != "omega" or trainable:
            params.tensors[name] = t * scale
    return params


def micro_batch(seed, n=4, input_dim=5, n_classes=4, domains=(0, 0, 1, 1)):
    rng = np.random.default_rng(seed + 1000)
    return Batch(
        rng.standard_normal((n, input_dim)),
        rng.integers(0, n_classes, size=n),
        np.asarray(domains[:n]),
    )


@pytest.fixture
def make_model():
    return micro_model


@pytest.fixture
def make_batch():
    return micro_batch


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
