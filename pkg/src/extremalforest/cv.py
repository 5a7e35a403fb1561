"""Repeated K-fold cross-validation of node size and shape penalty.

Folds are scored by the out-of-fold GPD deviance of the held-out
exceedances; the intermediate quantile surface is fitted once on the full
data and shared across the whole grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .forest import ForestParams, TrainingSet, fit_forest, similarity_weights_batch
from .gpd import (
    ExceedanceSample,
    NoExceedanceError,
    PenaltyConfig,
    ThetaBox,
    gpd_deviance,
    grimshaw_fit,
    penalized_fit,
    unconditional_fit,
)
from .model import ErfModel, _in_sample_intermediate

__all__ = ["CvPlan", "CvResult", "make_folds", "cv_score", "tune"]


@dataclass(frozen=True)
class CvPlan:
    num_folds: int = 5
    repeats: int = 3
    kappa_grid: tuple[int, ...] = (10, 40, 100)
    lambda_grid: tuple[float, ...] = (0.0, 0.001, 0.01)
    fold_forest_trees: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_folds < 2:
            raise ValueError("need at least 2 folds")
        if self.repeats < 1:
            raise ValueError("need at least 1 repeat")
        if not self.kappa_grid or not self.lambda_grid:
            raise ValueError("hyperparameter grids must be non-empty")
        if any(k < 1 for k in self.kappa_grid):
            raise ValueError("node sizes must be positive")
        if any(l < 0 for l in self.lambda_grid):
            raise ValueError("penalties must be nonnegative")


@dataclass
class CvResult:
    scores: dict  # (kappa, lam, repeat) -> summed out-of-fold deviance
    best: tuple[int, float]
    empty_folds: list = field(default_factory=list)

    def mean_score(self, kappa: int, lam: float) -> float:
        vals = [v for (k, l, _), v in self.scores.items() if k == kappa and l == lam]
        return float(np.mean(vals))


def make_folds(n: int, num_folds: int, repeats: int, seed: int) -> list[list[np.ndarray]]:
    """Seeded permutation partitions; fold sizes differ by at most one."""
    if num_folds > n:
        raise ValueError(f"cannot make {num_folds} folds from {n} rows")
    out = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))
        perm = rng.permutation(n)
        out.append([np.sort(part) for part in np.array_split(perm, num_folds)])
    return out


def _fold_seed(seed: int, repeat: int, fold: int, kappa: int) -> int:
    key = (repeat, fold, kappa)
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


def cv_score(
    data: TrainingSet,
    tau_n: float,
    plan: CvPlan,
    forest_params: ForestParams | None = None,
) -> CvResult:
    """Grid scores by Eq.-style out-of-fold deviance, averaged over repeats."""
    params = forest_params if forest_params is not None else ForestParams()
    intermediate = fit_forest(data, params)
    q_train = _in_sample_intermediate(intermediate, data, tau_n)
    exceedances = np.maximum(data.y - q_train, 0.0)
    z_pos = exceedances[exceedances > 0]
    if z_pos.size == 0:
        raise NoExceedanceError(f"no positive exceedances at tau_n={tau_n}")
    box = ThetaBox.default_for(float(z_pos.mean()))
    anchor = unconditional_fit(z_pos, box).xi

    partitions = make_folds(data.n, plan.num_folds, plan.repeats, plan.seed)
    scores = {
        (kappa, lam, r): 0.0
        for kappa in plan.kappa_grid
        for lam in plan.lambda_grid
        for r in range(plan.repeats)
    }
    empty_folds = []
    for r, folds in enumerate(partitions):
        for m, held_out in enumerate(folds):
            train_rows = np.setdiff1d(np.arange(data.n), held_out)
            z_train = exceedances[train_rows]
            z_held = exceedances[held_out]
            if not np.any(z_held > 0):
                empty_folds.append((r, m))
                continue
            fold_data = TrainingSet(x=data.x[train_rows], y=data.y[train_rows])
            n_f = train_rows.shape[0]
            k_f = max(1, round(n_f * (1.0 - tau_n)))
            for kappa in plan.kappa_grid:
                fold_params = replace(
                    params,
                    num_trees=plan.fold_forest_trees,
                    min_node_size=kappa,
                    subsample_size=None,
                    seed=_fold_seed(plan.seed, r, m, kappa),
                )
                weight_forest = fit_forest(fold_data, fold_params)
                w_held = similarity_weights_batch(weight_forest, data.x[held_out])
                for i, row in enumerate(held_out):
                    if z_held[i] <= 0:
                        continue
                    w = w_held[i]
                    pos_mass = float(w[z_train > 0].sum())
                    if pos_mass <= 0:
                        continue
                    sample = ExceedanceSample(z=z_train, weights=w)
                    t_n = (n_f / k_f) * pos_mass
                    base = grimshaw_fit(sample, box)
                    for lam in plan.lambda_grid:
                        if lam == 0.0:
                            theta = base
                        else:
                            theta = penalized_fit(
                                sample,
                                PenaltyConfig(lam=lam, xi_anchor=anchor, k_over_n_scale=t_n),
                                box,
                                warm_start=base,
                            )
                        scores[(kappa, lam, r)] += gpd_deviance(float(z_held[i]), theta)

    best = min(
        ((kappa, lam) for kappa in plan.kappa_grid for lam in plan.lambda_grid),
        key=lambda kl: (
            float(np.mean([scores[(kl[0], kl[1], r)] for r in range(plan.repeats)])),
            kl[0],
            kl[1],
        ),
    )
    return CvResult(scores=scores, best=best, empty_folds=empty_folds)


def tune(
    data: TrainingSet,
    tau_n: float,
    plan: CvPlan,
    forest_params: ForestParams | None = None,
) -> tuple[ErfModel, CvResult]:
    """Cross-validate, then refit on all data at the selected hyperparameters."""
    from .model import erf_fit

    params = forest_params if forest_params is not None else ForestParams()
    result = cv_score(data, tau_n, plan, params)
    kappa, lam = result.best
    model = erf_fit(
        data,
        tau_n=tau_n,
        forest_params=replace(params, min_node_size=kappa),
        penalty=PenaltyConfig(lam=lam),
    )
    return model, result
