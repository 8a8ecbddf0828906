import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from taskcal.core import answer_abstain_space, categorical_space, ordinal_space, product_space  # noqa: E402
from taskcal.losses import LossSpec, build_loss_matrix  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def em3():
    return build_loss_matrix(categorical_space(["a", "b", "c"]), LossSpec("exact_match"))


@pytest.fixture
def em2():
    return build_loss_matrix(categorical_space(["a", "b"]), LossSpec("exact_match"))


@pytest.fixture
def bas25():
    return build_loss_matrix(answer_abstain_space(), LossSpec("bas", 0.25))


@pytest.fixture
def l1_5():
    return build_loss_matrix(ordinal_space(range(5)), LossSpec("l1"))


@pytest.fixture
def grid5x5():
    f = ordinal_space(range(5))
    return product_space([f, f])


def pytest_terminal_summary(terminalreporter):
    lines = []
    for mod in list(sys.modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda s: int(s.split("AC")[1].split()[0])):
            terminalreporter.write_line(line)
