from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dualmode.encoder import EncoderConfig
from dualmode.lm import LMConfig

ROOT = Path(__file__).resolve().parent.parent
TOY_CFG = ROOT / "configs" / "toy.cfg"
COST_CFG = ROOT / "configs" / "cost_8b.cfg"

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")


@pytest.fixture
def tiny_enc() -> EncoderConfig:
    return EncoderConfig(depth=3, hidden_dim=16, heads=2, grid_h=4, grid_w=4, n_vit=8,
                         temporal_depth=2, temporal_window=3, mlp_dim=24, pixel_dim=6, llm_dim=8)


@pytest.fixture
def tiny_lm() -> LMConfig:
    return LMConfig(depth=1, hidden=8, heads=2, ffn=16, vocab=6)


def randomize_new(params, seed: int, scale: float = 0.3) -> None:
    """Push every new parameter away from its initial value."""
    rng = np.random.default_rng(seed)
    for p in params:
        if p.group == "new":
            params.set_value(p.id, p.value + scale * rng.standard_normal(p.value.shape))
