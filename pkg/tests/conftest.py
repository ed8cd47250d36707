import numpy as np
import pytest
import torch

from maskdiff.config import ModelConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    """8 tokens of width 8, D=16, one block per stage."""
    base = dict(height=8, width=4, channels=2, patch=2, num_classes=3, cond_len=2, dim=16,
                depth_stage1=1, depth_stage2=1, heads=2, head_width=32, head_depth=1,
                time_freq_dim=16, max_diffusion_steps=100)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report: one PASS/FAIL line per criterion -------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        if rep.failed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1][:200]
        _criteria[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
