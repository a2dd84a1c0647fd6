from __future__ import annotations

import sys

import numpy as np
import pytest

from stylevec.checkpoint import Checkpoint
from stylevec.tensor import Dtype, Tensor

DTYPES = [Dtype.F32, Dtype.F16, Dtype.BF16]


def random_tensor(gen: np.random.Generator, shape, dtype: Dtype, scale: float = 1.0) -> Tensor:
    return Tensor.from_values(gen.standard_normal(shape) * scale, dtype)


def random_checkpoint(gen: np.random.Generator, dtype: Dtype = Dtype.F32, n_keys: int = 4) -> Checkpoint:
    entries = {}
    for i in range(n_keys):
        rank = int(gen.integers(0, 4))
        shape = tuple(int(s) for s in gen.integers(1, 6, size=rank))
        entries[f"layer{i}.weight"] = random_tensor(gen, shape, dtype)
    return Checkpoint(entries)


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
