import numpy as np
import pytest

from aslora import kernels
from aslora import tensor as T


@pytest.fixture(autouse=True)
def _clean_state():
    """Each test starts with an empty tape, 32-bit default and the import-time backend."""
    backend = kernels.BACKEND
    T.reset_tape()
    T.set_default_dtype(np.float32)
    yield
    T.reset_tape()
    T.set_default_dtype(np.float32)
    kernels.use_backend(backend)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("ASLORA_RUN_ROOT", str(root))
    return root


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    kernels.use_backend(request.param)
    return request.param


TINY = {
    "num_layers": 4, "model_dim": 16, "num_heads": 2, "ffn_dim": 32, "vocab_size": 32, "max_seq_len": 8,
    "seq_len": 8, "rank": 2, "total_steps": 60, "merge_start": 20, "merge_interval": 5, "merge_budget": 3,
    "warmup_steps": 5, "batch_size": 8, "num_train": 64, "num_eval": 32, "eval_every": 20,
    "compare_pairs": [[2, 2]],
}


@pytest.fixture
def tiny_cfg():
    """Materialized config for a seconds-long run; call with overrides."""
    from aslora.config import materialize

    def make(**over):
        return materialize({**TINY, **over})

    return make


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[str, dict] = {}


@pytest.fixture
def criterion(request):
    """Records the measured values of one acceptance criterion for the summary."""
    entry = _CRITERIA.setdefault(request.node.nodeid, {
        "name": request.node.function.__doc__.strip().splitlines()[0], "detail": [], "outcome": None,
    })

    def note(detail: str) -> None:
        entry["detail"].append(detail)
        print(f"{entry['name']}: {detail}")

    return note


def pytest_runtest_logreport(report):
    entry = _CRITERIA.get(report.nodeid)
    if entry is not None and (report.when == "call" or report.failed) and entry["outcome"] != "failed":
        entry["outcome"] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for entry in _CRITERIA.values():
        mark = "PASS" if entry["outcome"] == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {entry['name']}  [{'; '.join(entry['detail'])}]")
