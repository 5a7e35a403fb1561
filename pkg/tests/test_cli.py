import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from extremalforest.archive import ArchiveError, load_model, save_model
from extremalforest.cli import main
from extremalforest.forest import ForestParams, TrainingSet
from extremalforest.model import erf_fit, predict_extreme_quantile


def run_cli(argv):
    return main(argv)


def simulate(tmp_path, name="train.csv", n=300, p=2, seed=0, family="example1"):
    path = tmp_path / name
    code = run_cli(
        [
            "simulate",
            "--family",
            family,
            "--n",
            str(n),
            "--p",
            str(p),
            "--seed",
            str(seed),
            "--out",
            str(path),
        ]
    )
    assert code == 0
    return path


class TestSimulate:
    def test_byte_identical_reruns(self, tmp_path):
        a = simulate(tmp_path, "a.csv", seed=4)
        b = simulate(tmp_path, "b.csv", seed=4)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_family_exit_2(self, tmp_path, capsys):
        code = run_cli(
            ["simulate", "--family", "bogus", "--n", "10", "--p", "2", "--out", str(tmp_path / "x.csv")]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "example1" in err and "gpd_step" in err

    def test_family_with_surface(self, tmp_path):
        path = simulate(tmp_path, "s.csv", family="sensitivity_pareto:smooth")
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "x2", "y"]
        assert len(rows) == 301

    def test_experiment2_with_shape(self, tmp_path):
        path = simulate(tmp_path, "e2.csv", family="experiment2:0.0", p=3)
        assert path.exists()


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    train = simulate(tmp_path, n=400, p=2, seed=1)
    model_path = tmp_path / "model.json"
    code = run_cli(
        [
            "fit",
            "--data",
            str(train),
            "--trees",
            "40",
            "--kappa",
            "20",
            "--out",
            str(model_path),
        ]
    )
    assert code == 0
    return tmp_path, train, model_path


class TestFitPredictEval:
    def test_predict_happy_path(self, fitted):
        tmp_path, train, model_path = fitted
        test = simulate(tmp_path, "test.csv", n=50, p=2, seed=2)
        out = tmp_path / "preds.csv"
        code = run_cli(
            [
                "predict",
                "--model",
                str(model_path),
                "--test",
                str(test),
                "--tau",
                "0.99,0.995",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 100
        assert set(rows[0]) == {
            "x1",
            "x2",
            "tau",
            "q_intermediate",
            "sigma_hat",
            "xi_hat",
            "q_extreme",
        }

    def test_predict_monotone_over_taus(self, fitted):
        tmp_path, train, model_path = fitted
        test = simulate(tmp_path, "mono.csv", n=10, p=2, seed=3)
        out = tmp_path / "mono_preds.csv"
        assert (
            run_cli(
                [
                    "predict",
                    "--model",
                    str(model_path),
                    "--test",
                    str(test),
                    "--tau",
                    "0.99,0.995,0.999,0.9995",
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        by_point = {}
        for row in rows:
            key = (row["x1"], row["x2"])
            by_point.setdefault(key, []).append(
                (float(row["tau"]), float(row["q_extreme"]))
            )
        for series in by_point.values():
            series.sort()
            qs = [q for _, q in series]
            assert all(a < b for a, b in zip(qs, qs[1:]))

    def test_predict_tau_at_or_below_threshold_exit_2(self, fitted, capsys):
        tmp_path, train, model_path = fitted
        test = simulate(tmp_path, "low.csv", n=5, p=2, seed=4)
        code = run_cli(
            [
                "predict",
                "--model",
                str(model_path),
                "--test",
                str(test),
                "--tau",
                "0.5",
                "--out",
                str(tmp_path / "low_preds.csv"),
            ]
        )
        assert code == 2
        assert "tau_n" in capsys.readouterr().err

    def test_predict_dimension_mismatch_exit_2(self, fitted, tmp_path):
        _, train, model_path = fitted
        bad = tmp_path / "bad.csv"
        bad.write_text("x1,x2,x3,x4\n0.1,0.2,0.3,0.4\n")
        code = run_cli(
            [
                "predict",
                "--model",
                str(model_path),
                "--test",
                str(bad),
                "--tau",
                "0.99",
                "--out",
                str(tmp_path / "bad_preds.csv"),
            ]
        )
        assert code == 2

    def test_eval_reports_wang_loss(self, fitted, capsys):
        tmp_path, train, model_path = fitted
        test = simulate(tmp_path, "eval_test.csv", n=200, p=2, seed=5)
        preds = tmp_path / "eval_preds.csv"
        assert (
            run_cli(
                [
                    "predict",
                    "--model",
                    str(model_path),
                    "--test",
                    str(test),
                    "--tau",
                    "0.99",
                    "--out",
                    str(preds),
                ]
            )
            == 0
        )
        out = tmp_path / "scores.json"
        code = run_cli(
            [
                "eval",
                "--predictions",
                str(preds),
                "--data",
                str(test),
                "--family",
                "example1",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        scores = json.loads(out.read_text())
        assert "wang_loss@tau=0.99" in scores
        assert "ise@tau=0.99" in scores
        assert abs(scores["wang_loss@tau=0.99"]) < 10

    def test_fit_with_cv_grid(self, tmp_path, capsys):
        train = simulate(tmp_path, "cv_train.csv", n=150, p=2, seed=6)
        out = tmp_path / "cv_model.json"
        code = run_cli(
            [
                "fit",
                "--data",
                str(train),
                "--trees",
                "20",
                "--kappa",
                "10",
                "--kappa-grid",
                "5,10",
                "--lambda-grid",
                "0.0",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "selected kappa=" in stdout
        assert out.exists()


class TestInputValidation:
    def test_missing_file_exit_1(self, tmp_path, capsys):
        code = run_cli(
            [
                "fit",
                "--data",
                str(tmp_path / "nothere.csv"),
                "--out",
                str(tmp_path / "m.json"),
            ]
        )
        assert code == 1
        assert "nothere.csv" in capsys.readouterr().err

    def test_nan_rejected_with_row_number(self, tmp_path, capsys):
        bad = tmp_path / "nan.csv"
        bad.write_text("x1,y\n0.1,1.0\n0.2,nan\n")
        code = run_cli(["fit", "--data", str(bad), "--out", str(tmp_path / "m.json")])
        assert code == 1
        assert "line 3" in capsys.readouterr().err

    def test_inf_rejected(self, tmp_path, capsys):
        bad = tmp_path / "inf.csv"
        bad.write_text("x1,y\ninf,1.0\n")
        code = run_cli(["fit", "--data", str(bad), "--out", str(tmp_path / "m.json")])
        assert code == 1
        assert "line 2" in capsys.readouterr().err

    def test_ragged_row_rejected(self, tmp_path, capsys):
        bad = tmp_path / "ragged.csv"
        bad.write_text("x1,x2,y\n0.1,0.2,1.0\n0.3,1.0\n")
        code = run_cli(["fit", "--data", str(bad), "--out", str(tmp_path / "m.json")])
        assert code == 1
        assert "line 3" in capsys.readouterr().err

    def test_non_numeric_rejected(self, tmp_path, capsys):
        bad = tmp_path / "text.csv"
        bad.write_text("x1,y\nhello,1.0\n")
        code = run_cli(["fit", "--data", str(bad), "--out", str(tmp_path / "m.json")])
        assert code == 1
        assert "non-numeric" in capsys.readouterr().err

    def test_unknown_response_column(self, tmp_path, capsys):
        train = simulate(tmp_path, n=50)
        code = run_cli(
            [
                "fit",
                "--data",
                str(train),
                "--response",
                "nope",
                "--out",
                str(tmp_path / "m.json"),
            ]
        )
        assert code == 2


def small_model(n=150, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    y = (1.0 + (x[:, 0] > 0)) * rng.standard_t(df=4, size=n)
    data = TrainingSet(x=x, y=y)
    return erf_fit(
        data, forest_params=ForestParams(num_trees=15, min_node_size=10, seed=seed)
    )


class TestArchive:
    def test_round_trip_bit_identical_predictions(self, tmp_path):
        model = small_model()
        path = tmp_path / "model.json"
        save_model(model, str(path))
        loaded = load_model(str(path))
        for x in (np.array([0.3, -0.4]), np.array([-0.8, 0.1])):
            a = predict_extreme_quantile(model, x, 0.995)
            b = predict_extreme_quantile(loaded, x, 0.995)
            assert a.q_extreme == b.q_extreme
            assert a.q_intermediate == b.q_intermediate
            assert a.theta == b.theta

    def test_save_load_save_stable(self, tmp_path):
        model = small_model(seed=1)
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        save_model(model, str(p1))
        save_model(load_model(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_version_rejected(self, tmp_path):
        model = small_model(seed=2)
        path = tmp_path / "m.json"
        save_model(model, str(path))
        doc = json.loads(path.read_text())
        doc["format_version"] = 999
        path.write_text(json.dumps(doc))
        with pytest.raises(ArchiveError, match="format_version"):
            load_model(str(path))

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text("this is not json {")
        with pytest.raises(ArchiveError, match="not a model archive"):
            load_model(str(path))

    def test_shared_forest_flag(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(100, 2))
        y = rng.standard_t(df=4, size=100)
        model = erf_fit(
            TrainingSet(x=x, y=y),
            forest_params=ForestParams(num_trees=10, min_node_size=10, seed=0),
            share_forests=True,
        )
        path = tmp_path / "shared.json"
        save_model(model, str(path))
        loaded = load_model(str(path))
        assert loaded.weight_forest is loaded.intermediate_forest


class TestThreadDeterminism:
    def test_fit_independent_of_worker_count(self, tmp_path):
        script = (
            "import numpy as np\n"
            "from extremalforest.forest import ForestParams, TrainingSet, fit_forest\n"
            "rng = np.random.default_rng(0)\n"
            "x = rng.uniform(-1, 1, size=(300, 3))\n"
            "y = rng.standard_t(df=4, size=300)\n"
            "f = fit_forest(TrainingSet(x=x, y=y), ForestParams(num_trees=40, min_node_size=10, seed=9))\n"
            "import hashlib\n"
            "h = hashlib.sha256()\n"
            "for t in f.trees:\n"
            "    h.update(t.feature.tobytes()); h.update(t.threshold.tobytes())\n"
            "    h.update(t.leaf_members.tobytes())\n"
            "print(h.hexdigest())\n"
        )
        digests = set()
        for workers in ("1", "2"):
            env = dict(os.environ, ERF_THREADS=workers)
            out = subprocess.run(
                [sys.executable, "-c", script],
                capture_output=True,
                text=True,
                env=env,
                check=True,
            )
            digests.add(out.stdout.strip())
        assert len(digests) == 1
