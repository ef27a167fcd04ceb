import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _experiment import run_experiment_cli  # noqa: E402


@pytest.fixture(scope="session")
def experiment_dir(tmp_path_factory):
    return run_experiment_cli(tmp_path_factory.mktemp("csvs"))
