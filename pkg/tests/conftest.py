import numpy as np
import pytest

from cyclelife.dataset import CellRecord, CycleCurve
from cyclelife.synth import SynthSpec, generate_dataset, write_synth


def make_cell(cell_id="c0", group_id="g0", nominal=1.1, fade=None, curves=None):
    """Small hand-built cell: linear Q(V) curves on 3.6 V -> 1.9 V."""
    if curves is None:
        v = np.linspace(3.6, 1.9, 50)
        curves = {
            10: CycleCurve(10, v, 1.08 * (3.6 - v) / 1.7),
            100: CycleCurve(100, v, 1.05 * (3.6 - v) / 1.7),
        }
    if fade is None:
        fade = ([1, 100, 200, 300], [1.08, 1.0, 0.9, 0.85])
    return CellRecord(cell_id, group_id, nominal, curves, fade[0], fade[1])


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(n_cells=40, groups=8, seed=11)


@pytest.fixture(scope="session")
def small_synth(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, small_spec):
    out = tmp_path_factory.mktemp("synth")
    write_synth(small_spec, out)
    return out


# ---------------------------------------------------------------------------
# Acceptance report: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


@pytest.fixture()
def criterion(request):
    """Record the outcome of an acceptance criterion under the test's docstring title."""
    notes = []
    yield notes.append
    rep = getattr(request.node, "rep_call", None)
    status = "FAIL" if rep is None or rep.failed else ("SKIP" if rep.skipped else "PASS")
    title = (request.node.function.__doc__ or request.node.name).strip().splitlines()[0]
    ACCEPTANCE_RESULTS[title] = (status, "; ".join(notes))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for title, (status, note) in sorted(ACCEPTANCE_RESULTS.items()):
        line = f"{status}  {title}"
        terminalreporter.write_line(f"{line}  ({note})" if note else line)
