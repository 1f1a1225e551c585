import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


def run(script, *args):
    proc = subprocess.run([sys.executable, str(ROOT / "scripts" / script), *args], capture_output=True, text=True,
                          cwd=ROOT)
    return proc.returncode, list(csv.reader(io.StringIO(proc.stdout)))


def test_refinement_sweep():
    code, rows = run("refinement_sweep.py", "configs/ou.yaml", "--levels", "16", "32")
    assert code == 0
    assert rows[0] == ["suite", "quantity", "N", "value"]
    assert {r[2] for r in rows[1:]} == {"16", "32"}


def test_fbm_variance_table():
    code, rows = run("fbm_variance.py", "--N", "16", "--H", "0.75", "--times", "1.0")
    assert code == 0
    assert rows[0] == ["H", "N", "t", "ratio", "c_H"]
    assert float(rows[1][3]) == pytest.approx(1.0, abs=0.1)


def test_heat_snapshot(tmp_path):
    out = tmp_path / "snap.csv"
    code, _ = run("heat_field_snapshot.py", "--N", "4", "--cells", "8", "--every", "2", "--out", str(out))
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "x1", "value"] and len(rows) == 1 + 2 * 8
