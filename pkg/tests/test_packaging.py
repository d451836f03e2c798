# tests/test_packaging.py

import ast
import re
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
IMPORT_NAMES = {"PyYAML": "yaml"}


def declared_modules():
    project = tomllib.loads((ROOT / "pyproject.toml").read_text())["project"]
    names = (re.split(r"[<>=!~\[ ]", dep, maxsplit=1)[0] for dep in project["dependencies"])
    return {IMPORT_NAMES.get(n, n).lower() for n in names}


def imported_modules():
    found = set()
    for path in (ROOT / "src" / "lrclone").glob("*.py"):
        for node in ast.walk(ast.parse(path.read_text())):
            if isinstance(node, ast.Import):
                found.update(alias.name.split(".")[0] for alias in node.names)
            elif isinstance(node, ast.ImportFrom) and node.level == 0 and node.module:
                found.add(node.module.split(".")[0])
    return found


@pytest.mark.unit
class TestPackaging:
    def test_third_party_imports_are_declared(self):
        third_party = {m for m in imported_modules() if m not in sys.stdlib_module_names and m != "lrclone"}
        assert "click" in third_party
        assert third_party <= declared_modules()

    def test_console_script(self):
        scripts = tomllib.loads((ROOT / "pyproject.toml").read_text())["project"]["scripts"]
        assert scripts["lrclone"] == "lrclone.cli:main"
