import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from fedhcdr.dataset import load_scenario
from fedhcdr.synthetic import SyntheticSpec, generate_synthetic


def make_scenario(tmp_path, seed=0, n_domains=3, n_users=30, items=40, per_user=8):
    spec = SyntheticSpec(n_domains=n_domains, n_users=n_users, items_per_domain=items,
                         interactions_per_user=per_user, seed=seed)
    files = generate_synthetic(spec, tmp_path / f"syn{seed}_{n_domains}")
    return load_scenario(files, min_user_inter=5, min_item_inter=1, name="tiny", seed=seed)


@pytest.fixture
def tiny_scenario(tmp_path):
    return make_scenario(tmp_path)


# acceptance criteria outcomes, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {status} - {detail}")
