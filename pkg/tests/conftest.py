import logging
from pathlib import Path

import pytest

from trunkrepro.config import load_config

PACKAGE = Path(__file__).resolve().parents[1] / "src" / "trunkrepro"
FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

_acceptance_results: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): one acceptance criterion")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _acceptance_results.get(marker, "PASS")
        now = "PASS" if report.outcome == "passed" else "FAIL"
        _acceptance_results[marker] = "FAIL" if "FAIL" in (prev, now) else "PASS"


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            item.user_properties.append(("acceptance", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _acceptance_results.items():
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING, logger="trunkrepro")


def desk_config(**overrides):
    config = load_config(PACKAGE / "configs" / "synthetic.yaml")
    if overrides:
        from trunkrepro.config import apply_overrides
        import json

        config = apply_overrides(config, [f"{k}={json.dumps(v)}" for k, v in overrides.items()])
    return config


@pytest.fixture(scope="session")
def desk_build(tmp_path_factory):
    """One full desk-scale build shared by the tests that only read it."""
    from trunkrepro.trainer import build_and_train

    config = desk_config()
    build_dir = tmp_path_factory.mktemp("desk") / "build"
    report = build_and_train(config, build_dir)
    return config, build_dir, report


@pytest.fixture(scope="session")
def desk_eval(desk_build):
    from trunkrepro.evaluator import evaluate_build

    config, build_dir, report = desk_build
    return evaluate_build(build_dir, config)
