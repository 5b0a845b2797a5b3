import sys

import pytest
import torch

from eosfm.bands import RGB, S1, S2, default_rules
from eosfm.ensemble import build_ensemble
from eosfm.synthetic import TaskSpec
from eosfm.zoo import EncoderConfig, build_encoder

TINY = EncoderConfig(depths=(1, 1, 1, 1), dims=(4, 8, 12, 16), kernel_size=3)
SEG = TaskSpec("segmentation", 3)


def toy_encoders(n, specs=(S2, RGB, S1), config=TINY, seed=0):
    """n randomly initialised encoders cycling through ``specs``."""
    return [build_encoder(config, specs[i % len(specs)], seed + i, f"enc{i}") for i in range(n)]


def toy_ensemble(n=3, input_spec=S2, task=SEG, seed=0, **kw):
    return build_ensemble(toy_encoders(n), default_rules(), input_spec, task, seed=seed, **kw)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
