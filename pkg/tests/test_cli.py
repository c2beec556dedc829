import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from krdiv.cli import main
from krdiv.measures import GaussianMixture, measure_to_dict, standard_gaussian


def write_spec(path, measure):
    path.write_text(json.dumps(measure_to_dict(measure)))
    return str(path)


@pytest.fixture
def pair_1d(tmp_path):
    return (
        write_spec(tmp_path / "nu0.json", standard_gaussian(1)),
        write_spec(tmp_path / "nu1.json", GaussianMixture.single([0.4], [[1.0]])),
    )


@pytest.fixture
def pair_2d(tmp_path):
    return (
        write_spec(tmp_path / "a.json", standard_gaussian(2)),
        write_spec(tmp_path / "b.json", GaussianMixture.single([0.3, 0.2], np.eye(2))),
    )


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestVerifyOperators:
    def test_defaults_pass(self, capsys):
        code, out, _ = run(["verify-operators", "--dim", "2", "--degree", "4"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["passed"] is True
        for c in report["checks"]:
            assert set(c) == {"name", "value", "bound_or_reference", "tolerance", "relation", "pass"}

    @pytest.mark.parametrize("kind", ["adjointness", "id_equals_l", "representation", "contraction", "mehler"])
    def test_corruption_is_detected(self, kind, capsys):
        code, out, err = run(["verify-operators", "--dim", "2", "--degree", "4", "--corrupt", kind], capsys)
        assert code == 1
        failed = [c["name"] for c in json.loads(out)["checks"] if not c["pass"]]
        assert failed and all(name in err for name in failed)

    def test_csv(self, capsys):
        code, out, _ = run(["verify-operators", "--dim", "1", "--degree", "5", "--format", "csv"], capsys)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert rows and set(rows[0]) == {"name", "value", "bound_or_reference", "tolerance", "relation", "pass"}


class TestUsage:
    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(["w1", "--spec0", str(tmp_path / "nope.json"),
                            "--spec1", str(tmp_path / "nope.json"), "--seed", "0"], capsys)
        assert code == 2
        assert "Traceback" not in err and "nope.json" in err

    def test_bad_spec_names_field(self, tmp_path, pair_1d, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dim": 1, "components": [{"weight": 1.0, "mean": [0.0], "cov": [[-1.0]]}]}))
        code, _, err = run(["w1", "--spec0", pair_1d[0], "--spec1", str(bad), "--seed", "0"], capsys)
        assert code == 2
        assert "components[0].cov" in err

    def test_seed_required(self, pair_1d, capsys):
        code, _, err = run(["w1", "--spec0", pair_1d[0], "--spec1", pair_1d[1]], capsys)
        assert code == 2 and "--seed" in err

    def test_out_of_range(self, pair_1d, capsys):
        code, _, err = run(["theorem", "--spec0", pair_1d[0], "--spec1", pair_1d[1],
                            "--seed", "0", "--epsilon", "0"], capsys)
        assert code == 2 and "--epsilon" in err

    def test_unknown_command(self, capsys):
        assert run(["bogus"], capsys)[0] == 2

    def test_unwritable_out(self, tmp_path, capsys):
        code, _, err = run(["verify-operators", "--dim", "1", "--degree", "3",
                            "--out", str(tmp_path / "missing" / "r.json")], capsys)
        assert code == 2 and "Traceback" not in err


class TestCommands:
    def test_w1_reproducible_and_atomic(self, tmp_path, pair_1d, capsys):
        out = tmp_path / "r.json"
        argv = ["w1", "--spec0", pair_1d[0], "--spec1", pair_1d[1], "--seed", "3",
                "--samples", "200", "--reps", "5", "--out", str(out)]
        assert run(argv, capsys)[0] == 0
        first = out.read_bytes()
        assert run(argv, capsys)[0] == 0
        assert out.read_bytes() == first
        assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".krdiv-")] == []
        names = {c["name"] for c in json.loads(first)["checks"]}
        assert "lp_vs_exact" in names

    def test_w1_smoothing_check(self, pair_1d, capsys):
        code, out, _ = run(["w1", "--spec0", pair_1d[0], "--spec1", pair_1d[1], "--seed", "0",
                            "--samples", "100", "--reps", "3", "--t", "0.2"], capsys)
        assert code == 0
        assert any(c["name"].startswith("smoothing") for c in json.loads(out)["checks"])

    def test_theorem(self, pair_1d, capsys):
        code, out, _ = run(["theorem", "--spec0", pair_1d[0], "--spec1", pair_1d[1],
                            "--seed", "0", "--degree", "8"], capsys)
        assert code == 0
        assert json.loads(out)["passed"]

    def test_flow(self, pair_1d, capsys):
        code, out, _ = run(["flow", "--spec0", pair_1d[0], "--spec1", pair_1d[1], "--seed", "1",
                            "--degree", "8", "--m", "8", "--tests", "2"], capsys)
        assert code == 0
        names = {c["name"] for c in json.loads(out)["checks"]}
        assert "f0.taylor_halving_ratio" in names

    def test_projection(self, pair_2d, capsys):
        code, out, _ = run(["projection", "--spec0", pair_2d[0], "--spec1", pair_2d[1], "--seed", "2",
                            "--samples", "100", "--reps", "4", "--degree", "3"], capsys)
        assert code == 0
        assert json.loads(out)["passed"]


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "krdiv.cli", "verify-operators", "--dim", "1",
                           "--degree", "3"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "verify-operators"
