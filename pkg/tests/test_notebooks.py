import runpy
from pathlib import Path

import pytest

NOTEBOOKS = Path(__file__).resolve().parents[1] / "notebooks"


@pytest.mark.parametrize("name", ["01_signal_features.py", "02_mixed_model.py"])
def test_notebook_runs(name, capsys):
    runpy.run_path(str(NOTEBOOKS / name), run_name="__main__")
    assert capsys.readouterr().out.strip()
