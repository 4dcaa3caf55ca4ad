import numpy as np
import pytest

from retina_grader.model import ModelConfig, build_model, head_group
from retina_grader.severity import TASKS


def one_hot_model(grades, cfg=None, logit=30.0):
    """Model whose heads ignore the input and put ~all mass on ``grades``."""
    model = build_model(cfg or ModelConfig(input_side=16), 0)
    for task, cls in zip(TASKS, grades):
        out_w = model.params[f"{head_group(task)}/out/w"]
        out_b = model.params[f"{head_group(task)}/out/b"]
        out_w.data = np.zeros_like(out_w.data)
        bias = np.zeros_like(out_b.data)
        bias[cls] = logit
        out_b.data = bias
    return model


@pytest.fixture
def small_cfg():
    return ModelConfig(input_side=16, base_width=4, trunk_dense_dim=16, head_dense_dims=(8, 8))


def pytest_terminal_summary(terminalreporter):
    import benchmark_runs

    if benchmark_runs.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(benchmark_runs.VERDICTS):
            terminalreporter.write_line(line)
