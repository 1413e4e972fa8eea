import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src.utils.config import load_config  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: multi-seed statistical checks (set GMC_RUN_SLOW=1)')


def pytest_collection_modifyitems(config, items):
    if load_config()['run_slow_tests']:
        return
    skip = pytest.mark.skip(reason='set GMC_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)
