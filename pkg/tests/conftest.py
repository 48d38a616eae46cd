import pytest

from phasetopo.mesh import all_wall_spec, diffuser_spec, generate_rect_mesh, plug_flow_spec


@pytest.fixture
def square2():
    return generate_rect_mesh((0, 1), (0, 1), 2, 2, all_wall_spec())


@pytest.fixture
def plug_mesh():
    return generate_rect_mesh((0, 1), (0, 1), 4, 4, plug_flow_spec())


@pytest.fixture(scope="session")
def diffuser16():
    return generate_rect_mesh((0, 1), (0, 1), 16, 16, diffuser_spec())


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and echo it."""
    term = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(key, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}"
        _CRITERIA[key] = line
        if term is not None:
            term.write_line("")
            term.write_line(line)
        else:
            print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_CRITERIA, key=str):
            terminalreporter.write_line(_CRITERIA[key])
