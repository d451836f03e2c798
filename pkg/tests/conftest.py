# tests/conftest.py

import tempfile
from pathlib import Path

import pytest

from lrclone.config import get_preset


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def tiny():
    return get_preset("tiny-debug")


class RecordingReporter:
    def __init__(self):
        self.tasks: list[str] = []
        self.infos: list[str] = []
        self.warnings: list[str] = []

    def task(self, label: str):
        self.tasks.append(label)
        return self

    def __enter__(self):
        return self

    def __exit__(self, *args):
        pass

    def info(self, msg: str):
        self.infos.append(msg)

    def warn(self, msg: str):
        self.warnings.append(msg)


@pytest.fixture
def reporter():
    return RecordingReporter()
