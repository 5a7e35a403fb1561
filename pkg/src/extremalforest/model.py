"""End-to-end extreme quantile regression model.

Fitting estimates an intermediate quantile surface with one forest, forms
threshold exceedances, and grows a second forest whose similarity weights
localize the tail likelihood. Prediction fits local (penalized) GPD
parameters at the query point and extrapolates beyond the data range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .forest import (
    Forest,
    ForestParams,
    TrainingSet,
    fit_forest,
    similarity_weights,
    similarity_weights_batch,
    weighted_quantile,
    weighted_quantile_rows,
)
from .gpd import (
    ExceedanceSample,
    GpdParams,
    NoExceedanceError,
    PenaltyConfig,
    ThetaBox,
    gpd_quantile,
    grimshaw_fit,
    penalized_fit,
    unconditional_fit,
)

__all__ = [
    "ErfModel",
    "QuantilePrediction",
    "erf_fit",
    "predict_gpd_params",
    "predict_extreme_quantile",
    "hill_estimate",
    "weissman_quantile",
    "exp_shape_estimate",
]

XI_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class QuantilePrediction:
    x: np.ndarray
    tau: float
    q_intermediate: float
    theta: GpdParams
    q_extreme: float


@dataclass
class ErfModel:
    weight_forest: Forest
    intermediate_forest: Forest
    tau_n: float
    training: TrainingSet
    exceedances: np.ndarray
    intermediate_at_train: np.ndarray
    penalty: PenaltyConfig
    theta_box: ThetaBox

    @property
    def n(self) -> int:
        return self.training.n

    @property
    def k(self) -> int:
        return max(1, round(self.n * (1.0 - self.tau_n)))


def _derived_seed(seed: int, stream: int) -> int:
    state = np.random.SeedSequence(entropy=seed, spawn_key=(stream,)).generate_state(1)
    return int(state[0])


def _in_sample_intermediate(forest: Forest, data: TrainingSet, tau_n: float) -> np.ndarray:
    out = np.empty(data.n)
    chunk = max(1, int(2**22 // max(data.n, 1)))
    for start in range(0, data.n, chunk):
        rows = slice(start, min(start + chunk, data.n))
        w = similarity_weights_batch(forest, data.x[rows])
        out[rows] = weighted_quantile_rows(w, data.y, tau_n)
    return out


def erf_fit(
    data: TrainingSet,
    tau_n: float = 0.8,
    forest_params: ForestParams | None = None,
    penalty: PenaltyConfig | None = None,
    theta_box: ThetaBox | None = None,
    share_forests: bool = False,
) -> ErfModel:
    """Fit the intermediate quantile surface, exceedances, and weight forest.

    GPD parameters are not fitted here; they are localized per query point at
    prediction time. The weight forest gets its own seed stream unless
    ``share_forests`` is set.
    """
    if not (0.0 < tau_n < 1.0):
        raise ValueError("tau_n must lie in (0, 1)")
    params = forest_params if forest_params is not None else ForestParams()
    intermediate_forest = fit_forest(data, params)
    q_train = _in_sample_intermediate(intermediate_forest, data, tau_n)
    exceedances = np.maximum(data.y - q_train, 0.0)
    if not np.any(exceedances > 0):
        raise NoExceedanceError(
            f"no positive exceedances at tau_n={tau_n}; lower the intermediate level"
        )
    if share_forests:
        weight_forest = intermediate_forest
    else:
        weight_forest = fit_forest(
            data, replace(params, seed=_derived_seed(params.seed, 1))
        )
    z_pos = exceedances[exceedances > 0]
    box = theta_box if theta_box is not None else ThetaBox.default_for(float(z_pos.mean()))
    if penalty is None:
        penalty = PenaltyConfig(lam=0.01)
    if penalty.lam > 0 and penalty.xi_anchor is None:
        anchor = unconditional_fit(z_pos, box).xi
        penalty = replace(penalty, xi_anchor=anchor)
    return ErfModel(
        weight_forest=weight_forest,
        intermediate_forest=intermediate_forest,
        tau_n=tau_n,
        training=data,
        exceedances=exceedances,
        intermediate_at_train=q_train,
        penalty=penalty,
        theta_box=box,
    )


def _fit_local(model: ErfModel, weights: np.ndarray, label: str) -> GpdParams:
    pos_mass = float(weights[model.exceedances > 0].sum())
    if pos_mass <= 0:
        raise NoExceedanceError(f"all weight mass on zero exceedances at {label}")
    sample = ExceedanceSample(z=model.exceedances, weights=weights)
    t_n = (model.n / model.k) * pos_mass
    penalty = replace(model.penalty, k_over_n_scale=t_n)
    if penalty.lam == 0.0:
        return grimshaw_fit(sample, model.theta_box)
    return penalized_fit(sample, penalty, model.theta_box)


def predict_gpd_params(model: ErfModel, x: np.ndarray) -> GpdParams:
    """Localized (penalized) GPD parameters at the query point."""
    weights = similarity_weights(model.weight_forest, x)
    return _fit_local(model, weights, f"x={np.asarray(x).ravel()}")


def intermediate_quantile(model: ErfModel, x: np.ndarray) -> float:
    weights = similarity_weights(model.intermediate_forest, x)
    return weighted_quantile(weights, model.training.y, model.tau_n)


def _extrapolate(q_int: float, theta: GpdParams, tau_n: float, tau: float) -> float:
    ratio = (1.0 - tau) / (1.0 - tau_n)
    if abs(theta.xi) < XI_ZERO_TOL:
        return q_int - theta.sigma * math.log(ratio)
    return q_int + theta.sigma / theta.xi * (ratio ** (-theta.xi) - 1.0)


def predict_extreme_quantile(model: ErfModel, x: np.ndarray, tau: float) -> QuantilePrediction:
    """Extreme conditional quantile beyond the intermediate level."""
    if not (model.tau_n < tau < 1.0):
        raise ValueError(
            f"tau={tau} must exceed the intermediate level tau_n={model.tau_n}; "
            "use the intermediate estimate for lower levels"
        )
    x = np.asarray(x, dtype=np.float64).ravel()
    q_int = intermediate_quantile(model, x)
    theta = predict_gpd_params(model, x)
    q_ext = _extrapolate(q_int, theta, model.tau_n, tau)
    return QuantilePrediction(x=x, tau=tau, q_intermediate=q_int, theta=theta, q_extreme=q_ext)


def hill_estimate(model: ErfModel, x: np.ndarray) -> float:
    """Localized Hill shape estimate from weighted log-excess ratios."""
    x = np.asarray(x, dtype=np.float64).ravel()
    q_int = intermediate_quantile(model, x)
    if q_int <= 0:
        raise ValueError(
            f"intermediate quantile {q_int} is not positive; the Hill estimator "
            "requires a heavy-tailed positive scale"
        )
    weights = similarity_weights(model.weight_forest, x)
    mask = model.exceedances > 0
    total = float(
        np.sum(weights[mask] * np.log1p(model.exceedances[mask] / q_int))
    )
    return (model.n / model.k) * total


def weissman_quantile(q_intermediate: float, xi_hat: float, tau_n: float, tau: float) -> float:
    """Multiplicative tail extrapolation from an intermediate quantile and shape."""
    if not (tau_n < tau < 1.0):
        raise ValueError("tau must lie in (tau_n, 1)")
    if q_intermediate <= 0:
        raise ValueError("intermediate quantile must be positive")
    return q_intermediate * ((1.0 - tau) / (1.0 - tau_n)) ** (-xi_hat)


def exp_shape_estimate(model: ErfModel, x: np.ndarray) -> float:
    """Shape as the weighted mean of log exceedance ratios (exponential model)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    weights = similarity_weights(model.weight_forest, x)
    mask = model.exceedances > 0
    w = weights[mask]
    total = w.sum()
    if total <= 0:
        raise NoExceedanceError("no positive exceedance weight at the query point")
    q_at_train = model.intermediate_at_train[mask]
    if np.any(q_at_train <= 0):
        raise ValueError(
            "nonpositive intermediate quantile among contributing training points"
        )
    ratios = np.log(model.training.y[mask] / q_at_train)
    return float(np.sum(w * ratios) / total)


def predict_quantiles(
    model: ErfModel,
    x_test: np.ndarray,
    taus,
    estimator: str = "erf",
) -> np.ndarray:
    """Quantile matrix (n_test x n_taus) for a batch of query points.

    ``estimator`` selects GPD-based extrapolation ("erf"), or the Weissman
    route with the Hill ("hill") or exponential-mean ("expshape") shape. For
    the Weissman routes a nonpositive intermediate quantile falls back to a
    zero shape at that point.
    """
    x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    taus = [float(t) for t in np.atleast_1d(taus)]
    for tau in taus:
        if not (model.tau_n < tau < 1.0):
            raise ValueError(f"tau={tau} must lie in (tau_n={model.tau_n}, 1)")
    w_int = similarity_weights_batch(model.intermediate_forest, x_test)
    q_int = weighted_quantile_rows(w_int, model.training.y, model.tau_n)
    out = np.empty((x_test.shape[0], len(taus)))
    if estimator == "erf":
        w_loc = similarity_weights_batch(model.weight_forest, x_test)
        for i in range(x_test.shape[0]):
            theta = _fit_local(model, w_loc[i], f"x={x_test[i]}")
            for j, tau in enumerate(taus):
                out[i, j] = _extrapolate(q_int[i], theta, model.tau_n, tau)
    elif estimator in ("hill", "expshape"):
        w_loc = similarity_weights_batch(model.weight_forest, x_test)
        mask = model.exceedances > 0
        for i in range(x_test.shape[0]):
            if q_int[i] <= 0:
                xi = 0.0
            elif estimator == "hill":
                xi = (model.n / model.k) * float(
                    np.sum(w_loc[i][mask] * np.log1p(model.exceedances[mask] / q_int[i]))
                )
            else:
                w = w_loc[i][mask]
                total = w.sum()
                if total <= 0:
                    xi = 0.0
                else:
                    ratios = model.training.y[mask] / model.intermediate_at_train[mask]
                    good = ratios > 0
                    xi = float(np.sum(w[good] * np.log(ratios[good])) / total)
            for j, tau in enumerate(taus):
                ratio = (1.0 - tau) / (1.0 - model.tau_n)
                out[i, j] = q_int[i] * ratio ** (-xi)
    else:
        raise ValueError(f"unknown estimator {estimator!r}; use erf, hill, or expshape")
    return out
