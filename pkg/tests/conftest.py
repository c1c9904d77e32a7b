import pytest

from cfalab import KeyPair, build_itl, compute_dominators, load_program, plan_instrumentation

TEST_KEYS = KeyPair.from_bytes(bytes(range(48)))
NONCE = bytes(range(16))


class Built:
    def __init__(self, source: str):
        self.cfg = load_program(source)
        self.dom = compute_dominators(self.cfg)
        self.plan = plan_instrumentation(self.cfg, self.dom)
        self.itl = build_itl(self.cfg)

    def addr(self, block_id: str) -> int:
        return self.cfg.blocks[block_id].start_addr


@pytest.fixture
def keys():
    return TEST_KEYS


@pytest.fixture
def build():
    return Built


# Acceptance tests record one line per criterion; printed after the run.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def detail(request):
    """Attach a one-line summary to the current acceptance test."""

    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    if rep.passed:
        text = "; ".join(v for k, v in item.user_properties if k == "detail")
    else:
        text = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else ""
    ACCEPTANCE_RESULTS[marker.args[0]] = (rep.passed, text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
