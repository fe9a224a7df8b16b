import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))

from fixtures import minicontainer  # noqa: E402


@pytest.fixture
def mini_rootfs(tmp_path):
    root = tmp_path / "rootfs"
    minicontainer.build_rootfs(root)
    return root


@pytest.fixture
def mini_trace_path():
    return TESTS_DIR / "fixtures" / "mini_trace.log"


@pytest.fixture
def mini_vuln_path():
    return TESTS_DIR / "fixtures" / "mini_vuln.json"
