import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from anocon import synthdata  # noqa: E402


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    # bitwise determinism across runs is only promised for one intra-op thread
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    synthdata.make_benchmark(root, seed=0, n_train=4, n_val=2, n_test=2, slices=4, size=32)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
