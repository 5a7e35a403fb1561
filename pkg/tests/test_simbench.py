import json
import math

import numpy as np
import pytest
from scipy import stats

from extremalforest.forest import ForestParams
from extremalforest.simbench import (
    EvalReport,
    SimSpec,
    generate,
    halton_grid,
    ise,
    mise_bias_variance,
    run_experiment,
    true_quantile,
    wang_loss,
)
from extremalforest.simbench import true_gpd_tail_scale


class TestSpec:
    def test_unknown_family(self):
        with pytest.raises(ValueError, match="unknown family"):
            SimSpec(family="nope", p=2, n=100)

    def test_unknown_surface(self):
        with pytest.raises(ValueError, match="unknown surface"):
            SimSpec(family="sensitivity_pareto", p=2, n=100, surface="bogus")

    def test_tiny_n(self):
        with pytest.raises(ValueError):
            SimSpec(family="example1_student_t", p=2, n=1)


class TestTrueQuantile:
    def test_cauchy_three_quarters(self):
        # shape 1 noise is standard Cauchy; its 0.75 quantile is tan(pi/4) = 1
        spec = SimSpec(family="experiment2", p=2, n=100, shape=1.0)
        x = np.array([[-0.5, 0.3]])  # scale 1 on this side of the step
        got = true_quantile(spec, x, 0.75)
        assert got[0] == pytest.approx(1.0, abs=1e-9)

    def test_pareto_closed_form(self):
        spec = SimSpec(family="sensitivity_pareto", p=2, n=100, surface="scale_step")
        x = np.array([[-0.5, 0.0]])
        got = true_quantile(spec, x, 0.9995)
        assert got[0] == pytest.approx(0.0005 ** (-0.25), abs=1e-9)
        assert got[0] == pytest.approx(6.687403, abs=1e-6)

    def test_student_symmetry(self):
        spec = SimSpec(family="example1_student_t", p=3, n=100)
        x = np.array([[0.4, -0.1, 0.9]])
        assert true_quantile(spec, x, 0.5)[0] == pytest.approx(0.0, abs=1e-12)

    def test_student_scale_step(self):
        spec = SimSpec(family="example1_student_t", p=1, n=100)
        lo = true_quantile(spec, np.array([[-0.5]]), 0.99)[0]
        hi = true_quantile(spec, np.array([[0.5]]), 0.99)[0]
        assert hi == pytest.approx(2 * lo, abs=1e-12)
        assert lo == pytest.approx(stats.t.ppf(0.99, df=4), abs=1e-12)

    def test_large_df_approaches_normal(self):
        spec = SimSpec(family="experiment2", p=2, n=100, shape=1e-6)
        x = np.array([[-0.5, 0.0]])
        got = true_quantile(spec, x, 0.9)[0]
        assert got == pytest.approx(stats.norm.ppf(0.9), abs=1e-5)

    def test_gaussian_family(self):
        spec = SimSpec(family="experiment2", p=2, n=100, shape=0.0)
        x = np.array([[0.5, 0.0]])  # scale 2 side
        assert true_quantile(spec, x, 0.975)[0] == pytest.approx(
            2 * stats.norm.ppf(0.975), abs=1e-9
        )

    def test_strictly_increasing_in_tau(self):
        for family, kw in [
            ("example1_student_t", {}),
            ("experiment2", {"shape": 1 / 3}),
            ("experiment3_model2", {}),
            ("sensitivity_pareto", {"surface": "smooth"}),
            ("gpd_step", {}),
        ]:
            spec = SimSpec(family=family, p=2, n=100, **kw)
            x = np.array([[0.3, -0.6]])
            qs = [true_quantile(spec, x, t)[0] for t in (0.8, 0.9, 0.99, 0.999, 0.9995)]
            assert all(a < b for a, b in zip(qs, qs[1:]))

    def test_rejects_bad_tau(self):
        spec = SimSpec(family="example1_student_t", p=1, n=10)
        with pytest.raises(ValueError):
            true_quantile(spec, np.zeros((1, 1)), 1.0)


class TestSurfaces:
    def test_model3_scale_at_origin(self):
        # 1 + 1/sqrt(1 - rho^2) with rho = 0.75
        spec = SimSpec(family="experiment3_model3", p=2, n=100)
        from extremalforest.simbench import _spec_surfaces

        scale, kind, _ = _spec_surfaces(spec, np.zeros((1, 2)))
        assert kind == "student"
        assert scale[0] == pytest.approx(1.0 + 1.0 / math.sqrt(0.4375), abs=1e-6)
        assert scale[0] == pytest.approx(2.511858, abs=1e-5)

    def test_model2_scale_range(self):
        from extremalforest.simbench import _spec_surfaces

        spec = SimSpec(family="experiment3_model2", p=2, n=100)
        grid = halton_grid(500, 2)
        scale, _, _ = _spec_surfaces(spec, grid)
        assert scale.min() >= 1.0 - 1e-9
        assert scale.max() <= 4.0 + 1e-9

    def test_model3_scale_floor(self):
        from extremalforest.simbench import _spec_surfaces

        spec = SimSpec(family="experiment3_model3", p=2, n=100)
        grid = halton_grid(500, 2)
        scale, _, _ = _spec_surfaces(spec, grid)
        assert scale.min() >= 1.0

    def test_gpd_tail_scale(self):
        spec = SimSpec(family="gpd_step", p=2, n=100)
        x = np.array([[0.5, 0.0], [-0.5, 0.0]])
        got = true_gpd_tail_scale(spec, x, tau_n=0.8)
        assert got[0] == pytest.approx(2 * 0.2 ** (-0.25))
        assert got[1] == pytest.approx(0.2 ** (-0.25))

    def test_pareto_tail_scale_is_xi_times_quantile(self):
        spec = SimSpec(family="sensitivity_pareto", p=2, n=100, surface="scale_step")
        x = np.array([[-0.3, 0.2]])
        q = true_quantile(spec, x, 0.8)
        got = true_gpd_tail_scale(spec, x, tau_n=0.8)
        assert got[0] == pytest.approx(0.25 * q[0], abs=1e-12)


class TestGenerate:
    def test_deterministic(self):
        spec = SimSpec(family="example1_student_t", p=3, n=200, seed=5)
        a, b = generate(spec), generate(spec)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)

    def test_shapes(self):
        spec = SimSpec(family="experiment3_model1", p=4, n=150, seed=1)
        data = generate(spec)
        assert data.x.shape == (150, 4)
        assert data.y.shape == (150,)
        assert np.all(np.abs(data.x) <= 1)

    def test_scale_step_shows_in_tails(self):
        spec = SimSpec(family="example1_student_t", p=1, n=20000, seed=7)
        data = generate(spec)
        hi = data.y[data.x[:, 0] > 0]
        lo = data.y[data.x[:, 0] <= 0]
        ratio = np.quantile(np.abs(hi), 0.9) / np.quantile(np.abs(lo), 0.9)
        assert ratio == pytest.approx(2.0, abs=0.2)

    def test_pareto_positive(self):
        spec = SimSpec(family="sensitivity_pareto", p=2, n=500, seed=2)
        assert np.all(generate(spec).y > 0)

    def test_gpd_nonnegative(self):
        spec = SimSpec(family="gpd_step", p=2, n=500, seed=3)
        assert np.all(generate(spec).y >= 0)


class TestHalton:
    def test_base2_sequence(self):
        grid = halton_grid(3, 1)
        # radical inverses 1/2, 1/4, 3/4 mapped to [-1, 1]
        assert grid[:, 0] == pytest.approx([0.0, -0.5, 0.5])

    def test_base3_second_column(self):
        grid = halton_grid(3, 2)
        assert grid[:, 1] == pytest.approx([2 / 3 - 1, 4 / 3 - 1, 2 / 9 - 1])

    def test_range_and_shape(self):
        grid = halton_grid(100, 5)
        assert grid.shape == (100, 5)
        assert np.all(grid > -1) and np.all(grid < 1)

    def test_rejects_zero_count(self):
        with pytest.raises(ValueError):
            halton_grid(0, 2)


class TestMetrics:
    def test_ise_hand_sum(self):
        assert ise([1.0, 2.0], [0.0, 0.0]) == pytest.approx(2.5)

    def test_ise_zero(self):
        assert ise([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_ise_length_mismatch(self):
        with pytest.raises(ValueError):
            ise([1.0], [1.0, 2.0])

    def test_mise_two_reps_hand_case(self):
        got = mise_bias_variance(np.array([[0.0], [2.0]]), np.array([0.0]))
        assert got["bias_sq"] == pytest.approx(1.0)
        assert got["variance"] == pytest.approx(1.0)
        assert got["mise"] == pytest.approx(2.0)

    def test_mise_identity(self):
        rng = np.random.default_rng(0)
        est = rng.normal(size=(7, 40))
        truths = rng.normal(size=40)
        got = mise_bias_variance(est, truths)
        assert got["mise"] == pytest.approx(got["bias_sq"] + got["variance"], abs=1e-9)
        # with the population variance convention this also equals mean ISE
        mean_ise = np.mean([ise(est[r], truths) for r in range(est.shape[0])])
        assert got["mise"] == pytest.approx(mean_ise, abs=1e-9)

    def test_mise_needs_two_reps(self):
        with pytest.raises(ValueError):
            mise_bias_variance(np.array([[1.0, 2.0]]), np.array([1.0, 2.0]))

    def test_wang_exact_coverage(self):
        y = np.arange(10.0)
        q = np.full(10, 5.0)  # exactly 5 of 10 strictly below
        assert wang_loss(q, y, 0.5) == 0.0

    def test_wang_all_below(self):
        y = np.zeros(100)
        q = np.ones(100)
        assert wang_loss(q, y, 0.9) == pytest.approx(10 / 3)

    def test_wang_mismatch(self):
        with pytest.raises(ValueError):
            wang_loss([1.0], [1.0, 2.0], 0.5)


class TestEvalReport:
    def test_values_filter(self):
        report = EvalReport()
        report.add("erf", 0.99, 0, "ise", 1.0)
        report.add("erf", 0.99, 1, "ise", 3.0)
        report.add("hill", 0.99, 0, "ise", 9.0)
        assert report.values("erf", 0.99).tolist() == [1.0, 3.0]

    def test_csv_round_trip(self, tmp_path):
        import csv

        report = EvalReport()
        report.add("erf", 0.9995, 0, "ise", 0.123456789012345)
        path = tmp_path / "out.csv"
        report.write_csv(str(path))
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["value"]) == 0.123456789012345

    def test_json_summary(self, tmp_path):
        report = EvalReport()
        report.summary = {"family": "gpd_step", "results": {}}
        path = tmp_path / "out.json"
        report.write_json(str(path))
        with open(path) as fh:
            assert json.load(fh)["family"] == "gpd_step"


class TestRunExperiment:
    def test_smoke_and_decomposition(self):
        spec = SimSpec(family="example1_student_t", p=2, n=300, seed=11)
        report = run_experiment(
            spec,
            methods=("erf", "baseline"),
            taus=(0.995,),
            repetitions=2,
            forest_params=ForestParams(num_trees=30, min_node_size=20, seed=0),
            grid_points=25,
        )
        assert len(report.values("erf", 0.995)) == 2
        entry = report.summary["results"]["erf@tau=0.995"]
        assert entry["mise"] == pytest.approx(entry["bias_sq"] + entry["variance"], abs=1e-9)
        assert entry["sqrt_mise"] == pytest.approx(math.sqrt(entry["mise"]), abs=1e-9)

    def test_deterministic(self):
        spec = SimSpec(family="gpd_step", p=2, n=300, seed=12)
        kwargs = dict(
            methods=("erf",),
            taus=(0.99,),
            repetitions=2,
            forest_params=ForestParams(num_trees=20, min_node_size=20, seed=0),
            grid_points=20,
        )
        r1 = run_experiment(spec, **kwargs)
        r2 = run_experiment(spec, **kwargs)
        assert r1.rows == r2.rows

    def test_unknown_method(self):
        spec = SimSpec(family="example1_student_t", p=2, n=200, seed=13)
        with pytest.raises(ValueError, match="unknown method"):
            run_experiment(
                spec,
                methods=("nope",),
                repetitions=1,
                forest_params=ForestParams(num_trees=10, min_node_size=20, seed=0),
                grid_points=10,
            )
