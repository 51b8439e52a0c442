import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from archive_fixture import ArchiveFixture  # noqa: E402


@pytest.fixture
def archive():
    with ArchiveFixture() as fx:
        yield fx


@pytest.fixture
def client(archive):
    from hacs.ingest import ArchiveClient

    return ArchiveClient(archive.endpoint, archive.replay_base, delay=0.0, retries=0, backoff=0.0)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
