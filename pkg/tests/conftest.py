import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {"train.steps": 6, "train.delta": 3, "train.demos": 2, "train.num_views": 4,
        "train.render_views_per_step": 1, "scene.image_size": 24, "scene.gt_samples": 300,
        "network.D": 8, "network.d": [3, 3, 3], "network.fps_sample_num": 128, "network.channels": 8,
        "network.pixel_channels": 6, "network.fusion_hidden": 4, "network.num_points": 4,
        "network.hidden": 16, "eval.held_out_views": 2, "policy.steps": 12, "policy.demos": 2,
        "policy.num_latents": 8, "policy.channels": 8, "policy.patch": 2, "policy.trajectory_steps": 5}


@pytest.fixture
def tiny_cfg():
    from geoprior.config import TrainConfig
    return TrainConfig(TINY)


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    def _report(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        request.config._criteria.append((number, line))
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config._criteria):
            terminalreporter.write_line(line)
