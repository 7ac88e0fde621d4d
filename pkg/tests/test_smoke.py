from pathlib import Path
import re

import pytest

import mkdvlab
from mkdvlab.cli import run_cli

PYPROJECT = Path(__file__).resolve().parents[1] / "pyproject.toml"


def test_version_matches_project_metadata() -> None:
    declared = re.search(r'^version = "([^"]+)"', PYPROJECT.read_text(encoding="utf-8"), re.MULTILINE)
    assert declared is not None
    assert mkdvlab.__version__ == declared.group(1)


@pytest.mark.parametrize("experiment", ["sample", "evolve", "estar", "decay", "invariance", "converge"])
def test_every_experiment_has_a_subcommand(experiment: str, capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as excinfo:
        run_cli([experiment, "--help"])
    assert excinfo.value.code == 0
    assert "--config" in capsys.readouterr().out
