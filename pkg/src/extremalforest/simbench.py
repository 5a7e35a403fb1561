"""Generative models, true-quantile oracles, test grids, and benchmark metrics."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .forest import ForestParams, TrainingSet, similarity_weights_batch, weighted_quantile_rows
from .model import erf_fit, predict_quantiles
from .gpd import ExceedanceSample, grimshaw_fit

__all__ = [
    "SimSpec",
    "EvalReport",
    "FAMILIES",
    "generate",
    "true_quantile",
    "halton_grid",
    "ise",
    "mise_bias_variance",
    "wang_loss",
    "run_experiment",
]

FAMILIES = (
    "example1_student_t",
    "experiment2",
    "experiment3_model1",
    "experiment3_model2",
    "experiment3_model3",
    "sensitivity_student",
    "sensitivity_pareto",
    "gpd_step",
)

SENSITIVITY_SURFACES = ("shape_step", "scale_step", "smooth")

METHODS = ("erf", "hill", "expshape", "uncond", "baseline")


@dataclass(frozen=True)
class SimSpec:
    """Declarative generative model with an exact conditional quantile oracle."""

    family: str
    p: int
    n: int
    seed: int = 0
    shape: float = 0.25          # experiment2 noise shape (0, 1/4, or 1/3)
    surface: str = "scale_step"  # sensitivity families: shape_step|scale_step|smooth

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; valid: {', '.join(FAMILIES)}")
        if self.p < 1 or self.n < 2:
            raise ValueError("need p >= 1 and n >= 2")
        if self.family.startswith("sensitivity") and self.surface not in SENSITIVITY_SURFACES:
            raise ValueError(
                f"unknown surface {self.surface!r}; valid: {', '.join(SENSITIVITY_SURFACES)}"
            )


def _step_scale(x: np.ndarray) -> np.ndarray:
    return 1.0 + (x[:, 0] > 0)


def _exp3_nu(x: np.ndarray) -> np.ndarray:
    return 3.0 * (2.0 + np.tanh(-2.0 * x[:, 0]))


def _bivariate_density(u, v, rho=0.75):
    det = 1.0 - rho * rho
    quad = (u * u - 2.0 * rho * u * v + v * v) / det
    return np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))


def _exp3_scale(x: np.ndarray, which: int) -> np.ndarray:
    if which == 1:
        return (2.0 + np.tanh(2.0 * x[:, 0])) * (1.0 + x[:, 1] / 2.0)
    if which == 2:
        return 4.0 - (x[:, 0] ** 2 + 2.0 * x[:, 1] ** 2)
    return 1.0 + 2.0 * math.pi * _bivariate_density(2.0 * x[:, 0], 2.0 * x[:, 1])


def _sensitivity_surfaces(x: np.ndarray, surface: str):
    if surface == "shape_step":
        scale = np.ones(x.shape[0])
        shape = 1.0 / (4.0 + 8.0 * (x[:, 1] > 0))
    elif surface == "scale_step":
        scale = _step_scale(x)
        shape = np.full(x.shape[0], 0.25)
    else:
        scale = _exp3_scale(x, 2)
        shape = 1.0 / (6.0 + 3.0 * np.tanh(-2.0 * x[:, 0]))
    return scale, shape


def _spec_surfaces(spec: SimSpec, x: np.ndarray):
    """(scale, kind, kind_param) per row; kind in {student, gaussian, pareto, gpd}."""
    fam = spec.family
    if fam == "example1_student_t":
        return _step_scale(x), "student", np.full(x.shape[0], 4.0)
    if fam == "experiment2":
        if spec.shape == 0.0:
            return _step_scale(x), "gaussian", np.zeros(x.shape[0])
        return _step_scale(x), "student", np.full(x.shape[0], 1.0 / spec.shape)
    if fam.startswith("experiment3_model"):
        which = int(fam[-1])
        return _exp3_scale(x, which), "student", _exp3_nu(x)
    if fam == "gpd_step":
        return _step_scale(x), "gpd", np.full(x.shape[0], 0.25)
    scale, shape = _sensitivity_surfaces(x, spec.surface)
    if fam == "sensitivity_student":
        return scale, "student", 1.0 / shape
    return scale, "pareto", shape


def _student_t(rng: np.random.Generator, nu: np.ndarray) -> np.ndarray:
    # ratio-of-normals-to-chi construction keeps the draw reproducible for
    # row-varying degrees of freedom
    z = rng.standard_normal(nu.shape[0])
    chi2 = rng.chisquare(nu)
    return z / np.sqrt(chi2 / nu)


def generate(spec: SimSpec) -> TrainingSet:
    """Draw a training set: X uniform on the cube, Y from the family's tail model."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed))
    x = rng.uniform(-1.0, 1.0, size=(spec.n, spec.p))
    scale, kind, param = _spec_surfaces(spec, x)
    if kind == "student":
        noise = _student_t(rng, param)
    elif kind == "gaussian":
        noise = rng.standard_normal(spec.n)
    elif kind == "pareto":
        u = rng.uniform(0.0, 1.0, size=spec.n)
        noise = u ** (-param)
    else:  # gpd with unit scale, shape in param
        u = rng.uniform(0.0, 1.0, size=spec.n)
        noise = ((1.0 - u) ** (-param) - 1.0) / param
    return TrainingSet(x=x, y=scale * noise)


def true_quantile(spec: SimSpec, x: np.ndarray, tau: float) -> np.ndarray:
    """Exact conditional quantiles at the rows of ``x``."""
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie in (0, 1)")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scale, kind, param = _spec_surfaces(spec, x)
    if kind == "student":
        base = stats.t.ppf(tau, df=param)
    elif kind == "gaussian":
        base = np.full(x.shape[0], stats.norm.ppf(tau))
    elif kind == "pareto":
        base = (1.0 - tau) ** (-param)
    else:
        base = ((1.0 - tau) ** (-param) - 1.0) / param
    return scale * base


def true_gpd_tail_scale(spec: SimSpec, x: np.ndarray, tau_n: float) -> np.ndarray:
    """Exact GPD scale of the exceedances above the tau_n conditional quantile."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scale, kind, param = _spec_surfaces(spec, x)
    if kind == "gpd":
        return scale * (1.0 - tau_n) ** (-param)
    if kind == "pareto":
        q = scale * (1.0 - tau_n) ** (-param)
        return param * q
    raise ValueError(f"no closed-form tail scale for family kind {kind!r}")


def _first_primes(count: int) -> list[int]:
    primes = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % q for q in primes):
            primes.append(candidate)
        candidate += 1
    return primes


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(indices.shape[0])
    frac = 1.0 / base
    rem = indices.copy()
    while np.any(rem > 0):
        out += (rem % base) * frac
        rem //= base
        frac /= base
    return out


def halton_grid(count: int, p: int) -> np.ndarray:
    """First ``count`` Halton points with prime bases, mapped to [-1, 1]^p."""
    if count < 1:
        raise ValueError("count must be positive")
    indices = np.arange(1, count + 1, dtype=np.int64)
    cols = [_radical_inverse(indices, b) for b in _first_primes(p)]
    return 2.0 * np.column_stack(cols) - 1.0


def ise(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Mean squared error of a quantile surface over the test grid."""
    estimates = np.asarray(estimates, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if estimates.shape != truths.shape:
        raise ValueError("length mismatch between estimates and truths")
    return float(np.mean((estimates - truths) ** 2))


def mise_bias_variance(per_repetition_estimates: np.ndarray, truths: np.ndarray) -> dict:
    """Decompose MISE into bias^2 and variance (population convention)."""
    est = np.atleast_2d(np.asarray(per_repetition_estimates, dtype=np.float64))
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if est.shape[0] < 2:
        raise ValueError("need at least 2 repetitions for a variance")
    if est.shape[1] != truths.shape[0]:
        raise ValueError("length mismatch between estimates and truths")
    mean_est = est.mean(axis=0)
    bias = mean_est - truths
    var = np.mean((est - mean_est) ** 2, axis=0)
    return {
        "bias_sq": float(np.mean(bias**2)),
        "variance": float(np.mean(var)),
        "mise": float(np.mean(bias**2 + var)),
    }


def wang_loss(predicted_quantiles: np.ndarray, y_test: np.ndarray, tau: float) -> float:
    """Normalized calibration statistic of the below-quantile proportion."""
    q = np.asarray(predicted_quantiles, dtype=np.float64).ravel()
    y = np.asarray(y_test, dtype=np.float64).ravel()
    if q.shape != y.shape:
        raise ValueError("length mismatch between predictions and responses")
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie in (0, 1)")
    n = y.shape[0]
    below = int(np.count_nonzero(y < q))
    return (below - n * tau) / math.sqrt(n * tau * (1.0 - tau))


@dataclass
class EvalReport:
    """Long-format benchmark results with per-method aggregates."""

    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, method: str, tau: float, repetition: int, metric: str, value: float):
        self.rows.append(
            {
                "method": method,
                "tau": tau,
                "repetition": repetition,
                "metric": metric,
                "value": value,
            }
        )

    def values(self, method: str, tau: float, metric: str = "ise") -> np.ndarray:
        return np.array(
            [
                r["value"]
                for r in self.rows
                if r["method"] == method and r["tau"] == tau and r["metric"] == metric
            ]
        )

    def write_csv(self, path: str):
        _atomic_write(path, self._csv_text())

    def _csv_text(self) -> str:
        import io

        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["method", "tau", "repetition", "metric", "value"]
        )
        writer.writeheader()
        for row in self.rows:
            writer.writerow({**row, "value": repr(row["value"])})
        return buf.getvalue()

    def write_json(self, path: str):
        _atomic_write(path, json.dumps(self.summary, indent=2, sort_keys=True) + "\n")


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)).generate_state(1)[0])


def run_experiment(
    spec: SimSpec,
    methods=METHODS,
    taus=(0.9995,),
    repetitions: int = 10,
    tau_n: float = 0.8,
    forest_params: ForestParams | None = None,
    grid_points: int = 200,
) -> EvalReport:
    """Repeat generate/fit/evaluate and aggregate ISE, MISE, bias and variance."""
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    taus = [float(t) for t in taus]
    methods = list(methods)
    base_params = forest_params if forest_params is not None else ForestParams(num_trees=500)
    x_grid = halton_grid(grid_points, spec.p)
    truths = {tau: true_quantile(spec, x_grid, tau) for tau in taus}
    estimates = {(m, tau): [] for m in methods for tau in taus}

    report = EvalReport()
    for rep in range(repetitions):
        rep_seed = _rep_seed(spec.seed, rep)
        data = generate(replace(spec, seed=rep_seed))
        params = replace(base_params, seed=rep_seed)
        model = erf_fit(data, tau_n=tau_n, forest_params=params)
        w_int = similarity_weights_batch(model.intermediate_forest, x_grid)
        q_int = weighted_quantile_rows(w_int, data.y, tau_n)
        for method in methods:
            if method in ("erf", "hill", "expshape"):
                preds = predict_quantiles(model, x_grid, taus, estimator=method)
            elif method == "uncond":
                z_pos = model.exceedances[model.exceedances > 0]
                theta = grimshaw_fit(
                    ExceedanceSample(z=z_pos, weights=np.ones_like(z_pos)), model.theta_box
                )
                preds = np.empty((grid_points, len(taus)))
                for j, tau in enumerate(taus):
                    ratio = (1.0 - tau) / (1.0 - tau_n)
                    if abs(theta.xi) < 1e-8:
                        shift = -theta.sigma * math.log(ratio)
                    else:
                        shift = theta.sigma / theta.xi * (ratio ** (-theta.xi) - 1.0)
                    preds[:, j] = q_int + shift
            elif method == "baseline":
                preds = np.column_stack(
                    [weighted_quantile_rows(w_int, data.y, tau) for tau in taus]
                )
            else:
                raise ValueError(f"unknown method {method!r}")
            for j, tau in enumerate(taus):
                estimates[(method, tau)].append(preds[:, j])
                report.add(method, tau, rep, "ise", ise(preds[:, j], truths[tau]))

    summary = {}
    for method in methods:
        for tau in taus:
            est = np.array(estimates[(method, tau)])
            ises = report.values(method, tau, "ise")
            entry = {
                "mise": float(ises.mean()),
                "sqrt_mise": float(math.sqrt(ises.mean())),
                "median_ise": float(np.median(ises)),
            }
            if repetitions >= 2:
                decomp = mise_bias_variance(est, truths[tau])
                entry.update(decomp)
                report.add(method, tau, -1, "bias_sq", decomp["bias_sq"])
                report.add(method, tau, -1, "variance", decomp["variance"])
            summary[f"{method}@tau={tau}"] = entry
    report.summary = {
        "family": spec.family,
        "n": spec.n,
        "p": spec.p,
        "tau_n": tau_n,
        "repetitions": repetitions,
        "results": summary,
    }
    return report
