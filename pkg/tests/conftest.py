import re

import numpy as np
import pytest
import torch

from dimshrink.decoder import DecoderConfig, build_model
from dimshrink.shrink_encoder import ShrinkConfig

TOY_CONFIG = {
    "crop": [32, 32, 12],
    "shrink": {"factors": [2, 2], "channels": [16, 16], "groups": 4},
    "decoder": {"channels_2d": [16, 16], "channels_3d": [16, 16], "bridge_channels": 8, "groups": 4},
    "backbone": "toy",
    "lr": 1e-4,
    "max_epochs": 500,
    "max_steps": 500,
    "seed": 0,
}


def tiny_model(depth=12, factors=(2, 2), seed=0, dtype=torch.float32, backbone="toy"):
    shrink = ShrinkConfig(factors=factors, channels=(4,) * len(factors), groups=2, input_depth=depth)
    dec = DecoderConfig(
        channels_2d=(4, 4), channels_3d=(4,) * len(factors), bridge_channels=2, groups=2
    )
    return build_model(shrink, dec, backbone=backbone, seed=seed).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config_dict():
    return {k: (dict(v) if isinstance(v, dict) else v) for k, v in TOY_CONFIG.items()}


_results = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.failed):
        _results[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_results.items()):
        m = re.search(r"test_criterion_(\d+)_(\w+)", nodeid)
        label = f"criterion {int(m.group(1)):2d} ({m.group(2)})" if m else nodeid
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {label}")
