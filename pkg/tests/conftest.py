import pytest

# criterion number -> (title, [outcome per test], [detail lines])
_VERDICTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance line of the current test."""

    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed = report.failed
    if report.when == "call" or (report.when == "setup" and (report.failed or report.skipped)):
        number, title = mark.args
        entry = _VERDICTS.setdefault(number, [title, [], []])
        entry[1].append("skip" if report.skipped else ("fail" if failed else "pass"))
        entry[2].extend(text for key, text in item.user_properties if key == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, outcomes, notes = _VERDICTS[number]
        if "fail" in outcomes:
            verdict = "FAIL"
        elif "pass" in outcomes and "skip" not in outcomes:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        extra = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}{extra}")
