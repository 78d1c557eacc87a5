import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from simcat.encoders import BaseClassifier, ConvBackbone, Encoder, LinearBackbone  # noqa: E402
from simcat.heads import LinearHead  # noqa: E402

SHAPE = (8, 8, 3)


def random_conv_encoder(seed=0, shape=SHAPE, widths=(4, 6), embed_dim=5, dtype=torch.float64):
    """Small frozen conv encoder with non-trivial batch-norm statistics."""
    torch.manual_seed(seed)
    module = ConvBackbone(shape[2], widths, embed_dim).to(dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    for block in module.blocks:
        bn = block[1]
        bn.running_mean.copy_(torch.randn(bn.num_features, generator=gen, dtype=dtype) * 0.1)
        bn.running_var.copy_(torch.rand(bn.num_features, generator=gen, dtype=dtype) + 0.5)
        bn.weight.data.copy_(torch.rand(bn.num_features, generator=gen, dtype=dtype) + 0.5)
        bn.bias.data.copy_(torch.randn(bn.num_features, generator=gen, dtype=dtype) * 0.1)
    return Encoder(module, shape, frozen=True)


def linear_encoder(A, c, shape):
    """``phi(x) = A x + c`` where ``x`` is the image flattened in channel-major (C, H, W) order."""
    module = LinearBackbone(int(np.prod(shape)), A.shape[0]).to(torch.float64)
    module.linear.weight.data.copy_(torch.as_tensor(A))
    module.linear.bias.data.copy_(torch.as_tensor(c))
    return Encoder(module, shape, frozen=True)


def random_classifier(encoder, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return BaseClassifier(encoder, LinearHead(rng.normal(size=(k, encoder.embed_dim)) * 3, rng.normal(size=k)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def conv_encoder():
    return random_conv_encoder()


@pytest.fixture(scope="session")
def classifier(conv_encoder):
    return random_classifier(conv_encoder)


@pytest.fixture(scope="session")
def images():
    return np.random.default_rng(7).uniform(0.05, 0.95, size=(6,) + SHAPE)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(criterion number, passed, detail)``; ``passed=None`` marks a skipped criterion.

    The summary is printed at the end of the session.
    """
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, passed, detail):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        lines[number] = f"criterion {number:>2}: {status}  {detail}"
        print(lines[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
