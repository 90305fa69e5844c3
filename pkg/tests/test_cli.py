import csv
import json
import shutil

import numpy as np
import pytest

from robustcp import conformal as C
from robustcp.cli import main
from robustcp.data import Dataset, load_csv, write_csv
from robustcp.models import save_params


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def pipeline(tmp_path):
    """Generated blobs, split, and a standard model."""
    assert run("gen-data", "--out", tmp_path / "d.csv", "--classes", 4, "--dim", 3,
               "--n-per-class", 60, "--spread", 0.15, "--seed", 1) == 0
    assert run("split", "--data", tmp_path / "d.csv", "--out", tmp_path / "s", "--seed", 1) == 0
    assert run("train", "--data", tmp_path / "s/train.csv", "--out", tmp_path / "m.json",
               "--epochs", 8, "--batch", 16, "--lr", 0.2, "--seed", 1) == 0
    return tmp_path


def read_json(path):
    return json.loads(path.read_text())


class TestGenData:
    def test_writes_csv_and_sidecar(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d.csv", "--classes", 4, "--n-per-class", 10) == 0
        meta = read_json(tmp_path / "d.csv.meta.json")
        assert meta["num_classes"] == 4 and meta["n"] == 40
        assert len((tmp_path / "d.csv").read_text().splitlines()) == 41

    def test_invalid_spread(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "d.csv", "--spread", -1) == 2
        assert "spread" in capsys.readouterr().err
        assert not (tmp_path / "d.csv").exists()

    def test_byte_identical(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            run("gen-data", "--out", tmp_path / name, "--seed", 7)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestTrain:
    def test_standard(self, pipeline):
        assert (pipeline / "m.json").exists()
        report = read_json(pipeline / "m.json.report.json")
        losses = [e["mean_loss"] for e in report["epochs"]]
        assert losses[-1] < losses[0]
        assert report["seed"] == 1 and report["fingerprint"]

    def test_opsa_at_needs_a_starting_model(self, pipeline, capsys):
        code = run("train", "--data", pipeline / "s/train.csv", "--out", pipeline / "o.json",
                   "--mode", "opsa-at", "--pretrain-epochs", 0)
        assert code == 2
        assert "pretrain" in capsys.readouterr().err

    def test_opsa_at_with_pretraining(self, pipeline):
        assert run("train", "--data", pipeline / "s/train.csv", "--out", pipeline / "o.json",
                   "--mode", "opsa-at", "--epochs", 1, "--batch", 40, "--steps", 2) == 0
        report = read_json(pipeline / "o.json.report.json")
        assert report["mode"] == "opsa-at" and len(report["pretrain"]["epochs"]) == 5

    def test_pgd_at_zero_budget_matches_standard(self, pipeline):
        args = ["--data", pipeline / "s/train.csv", "--epochs", 3, "--batch", 16, "--seed", 2]
        run("train", *args, "--out", pipeline / "a.json")
        run("train", *args, "--out", pipeline / "b.json", "--mode", "pgd-at", "--r", 0)
        a, b = read_json(pipeline / "a.json.report.json"), read_json(pipeline / "b.json.report.json")
        assert a["epochs"] == b["epochs"]
        assert (pipeline / "a.json").read_text() == (pipeline / "b.json").read_text()

    def test_divergence_exit_code(self, tmp_path, capsys):
        path = tmp_path / "wild.csv"
        path.write_text("x0,label\n" + "".join(f"{v}e150,{v % 2}\n" for v in range(1, 21)))
        code = run("train", "--data", path, "--no-box", "--out", tmp_path / "m.json", "--lr", 1e200,
                   "--batch", 4, "--epochs", 3)
        assert code == 3
        assert "runtime failure" in capsys.readouterr().err


class TestAttack:
    def test_fixture_moves_to_boundary(self, tmp_path):
        from conftest import linear_params
        save_params(linear_params([[-1.0], [1.0], [0.5], [-0.2]], [5.0, 3.0, 2.0, 1.0]), tmp_path / "f.json")
        write_csv(Dataset([[2.0]], [0], 4, box=None), tmp_path / "x.csv")
        code = run("attack", "--data", tmp_path / "x.csv", "--model", tmp_path / "f.json", "--no-box",
                   "--r", 0.5, "--eta", 0.1, "--steps", 20, "--out", tmp_path / "adv.csv")
        assert code == 0
        adv = load_csv(tmp_path / "adv.csv")
        assert adv.X[0, 0] == pytest.approx(2.5, abs=1e-3)
        log = read_json(tmp_path / "adv.csv.log.json")
        assert log["samples"][0]["objective_trace"]

    def test_zero_budget_identity(self, pipeline):
        run("attack", "--data", pipeline / "s/test.csv", "--model", pipeline / "m.json", "--r", 0,
            "--out", pipeline / "adv.csv")
        assert load_csv(pipeline / "adv.csv").equals(load_csv(pipeline / "s/test.csv"))

    @pytest.mark.parametrize("method", ["fgsm", "pgd", "opsa"])
    def test_rows_stay_in_box(self, pipeline, method):
        assert run("attack", "--data", pipeline / "s/test.csv", "--model", pipeline / "m.json",
                   "--method", method, "--r", 0.2, "--out", pipeline / "adv.csv") == 0
        X = load_csv(pipeline / "adv.csv").X
        assert X.min() >= 0.0 and X.max() <= 1.0

    def test_class_count_mismatch(self, pipeline, capsys):
        (pipeline / "x.csv").write_text("x0,x1,x2,label\n0.5,0.5,0.5,a\n")
        assert run("attack", "--data", pipeline / "x.csv", "--model", pipeline / "m.json",
                   "--out", pipeline / "adv.csv") == 2
        assert "K=2" in capsys.readouterr().err

    def test_rejects_out_of_box_rows(self, tmp_path, capsys):
        from conftest import linear_params
        save_params(linear_params([[1.0], [-1.0]], [0.0, 0.0]), tmp_path / "f.json")
        (tmp_path / "x.csv").write_text("x0,label\n0.5,0\n1.5,1\n")
        assert run("attack", "--data", tmp_path / "x.csv", "--model", tmp_path / "f.json",
                   "--out", tmp_path / "adv.csv") == 2
        assert ":3:" in capsys.readouterr().err


class TestEvaluate:
    def test_aggregates_recomputable(self, pipeline):
        out = pipeline / "ev"
        assert run("evaluate", "--model", pipeline / "m.json", "--cal", pipeline / "s/cal.csv",
                   "--test", pipeline / "s/test.csv", "--out", out, "--attack", "opsa", "--repeats", 2) == 0
        summary = read_json(out / "summary.json")
        with open(out / "samples.csv") as fh:
            rows = list(csv.DictReader(fh))
        K = summary["num_classes"]
        for rep in summary["repeats"]:
            mine = [r for r in rows if int(r["repeat"]) == rep["repeat"]]
            sets = [{int(k) for k in r["set"].split()} for r in mine]
            labels = [int(r["label"]) for r in mine]
            assert rep["coverage"] == C.coverage(sets, labels)
            assert rep["size"] == C.avg_size(sets)
            assert rep["sscv"] == C.sscv(sets, labels, summary["alpha"], C.SizeStrata.default(K))
        sizes = [rep["size"] for rep in summary["repeats"]]
        assert summary["aggregate"]["size"]["mean"] == pytest.approx(np.mean(sizes))
        assert summary["aggregate"]["size"]["stderr"] == pytest.approx(np.std(sizes, ddof=1) / np.sqrt(2))

    def test_rerun_reproduces(self, pipeline):
        args = ["evaluate", "--model", pipeline / "m.json", "--cal", pipeline / "s/cal.csv",
                "--test", pipeline / "s/test.csv", "--attack", "opsa", "--seed", 3]
        run(*args, "--out", pipeline / "e1")
        run(*args, "--out", pipeline / "e2")
        a, b = read_json(pipeline / "e1/summary.json"), read_json(pipeline / "e2/summary.json")
        assert a["aggregate"] == b["aggregate"] and a["fingerprint"] == b["fingerprint"]
        assert a["seed"] == 3

    def test_tiny_calibration_predicts_everything(self, pipeline):
        lines = (pipeline / "s/cal.csv").read_text().splitlines()
        (pipeline / "one.csv").write_text("\n".join(lines[:2]) + "\n")
        shutil.copy(pipeline / "s/cal.csv.meta.json", pipeline / "one.csv.meta.json")
        run("evaluate", "--model", pipeline / "m.json", "--cal", pipeline / "one.csv",
            "--test", pipeline / "s/test.csv", "--out", pipeline / "ev")
        rep = read_json(pipeline / "ev/summary.json")["repeats"][0]
        assert rep["predicts_all"] and rep["tau"] is None
        assert rep["size"] == 4.0 and rep["coverage"] == 1.0

    def test_empty_calibration(self, pipeline, capsys):
        header = (pipeline / "s/cal.csv").read_text().splitlines()[0]
        (pipeline / "empty.csv").write_text(header + "\n")
        shutil.copy(pipeline / "s/cal.csv.meta.json", pipeline / "empty.csv.meta.json")
        assert run("evaluate", "--model", pipeline / "m.json", "--cal", pipeline / "empty.csv",
                   "--test", pipeline / "s/test.csv", "--out", pipeline / "ev") == 2
        assert "empty" in capsys.readouterr().err

    def test_twenty_seed_coverage(self, tmp_path):
        covs = []
        for seed in range(20):
            d = tmp_path / str(seed)
            run("gen-data", "--out", d / "d.csv", "--classes", 4, "--dim", 2, "--n-per-class", 200,
                "--spread", 0.15, "--seed", seed)
            run("split", "--data", d / "d.csv", "--out", d, "--fractions", 0.25, 0.25, 0.5, "--seed", seed)
            run("train", "--data", d / "train.csv", "--out", d / "m.json", "--epochs", 3, "--seed", seed)
            run("evaluate", "--model", d / "m.json", "--cal", d / "cal.csv", "--test", d / "test.csv",
                "--out", d / "ev")
            covs.append(read_json(d / "ev/summary.json")["aggregate"]["coverage"]["mean"])
        assert 0.87 <= np.mean(covs) <= 0.93


class TestSweep:
    def test_rows_and_dedup(self, pipeline, capsys):
        code = run("sweep-t1", "--model", pipeline / "m.json", "--cal", pipeline / "s/cal.csv",
                   "--test", pipeline / "s/test.csv", "--out", pipeline / "sw",
                   "--t1-values", 0.001, 1, 1000, 1)
        assert code == 0
        assert "duplicate" in capsys.readouterr().err
        with open(pipeline / "sw/sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["T1"]) for r in rows] == [0.001, 1.0, 1000.0]
        # 60 test rows: allow a generous Monte-Carlo band around 1 - alpha
        assert all(0.75 <= float(r["coverage"]) <= 1.0 for r in rows)

    def test_empty_list(self, pipeline, capsys):
        assert run("sweep-t1", "--model", pipeline / "m.json", "--cal", pipeline / "s/cal.csv",
                   "--test", pipeline / "s/test.csv", "--out", pipeline / "sw", "--t1-values") == 2
        assert "empty" in capsys.readouterr().err


class TestConfigFile:
    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"bogus": 1}')
        assert run("evaluate", "--config", tmp_path / "c.json") == 2
        assert "bogus" in capsys.readouterr().err

    def test_values_used_and_flags_win(self, pipeline):
        cfg = {"model": str(pipeline / "m.json"), "cal": str(pipeline / "s/cal.csv"),
               "test": str(pipeline / "s/test.csv"), "alpha": 0.2, "out": str(pipeline / "ev")}
        (pipeline / "c.json").write_text(json.dumps(cfg))
        assert run("evaluate", "--config", pipeline / "c.json") == 0
        assert read_json(pipeline / "ev/summary.json")["alpha"] == 0.2
        assert run("evaluate", "--config", pipeline / "c.json", "--alpha", 0.3) == 0
        assert read_json(pipeline / "ev/summary.json")["alpha"] == 0.3

    def test_bad_value(self, tmp_path):
        (tmp_path / "c.json").write_text('{"alpha": 2}')
        assert run("evaluate", "--config", tmp_path / "c.json") == 2


def test_bad_flag_value_exit_code(capsys):
    assert run("evaluate", "--alpha", "1.5") == 2
