"""Shared fixtures. The heavyweight acceptance runs manage their own
artifacts under a session tmp dir so they can be inspected after a run."""

import pytest


@pytest.fixture(scope="session")
def acceptance_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")
