"""Generalized Pareto distribution primitives and weighted likelihood fitting.

The weighted maximum-likelihood solver reduces the two-parameter stationarity
system to a one-dimensional root problem through the reparametrization
t = xi / sigma, with a box-constrained direct search as safeguard and
fallback. The penalized variant shrinks the shape toward a constant anchor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "GpdParams",
    "ExceedanceSample",
    "PenaltyConfig",
    "ThetaBox",
    "NoExceedanceError",
    "gpd_cdf",
    "gpd_quantile",
    "gpd_deviance",
    "weighted_nll",
    "fn_gn_eval",
    "grimshaw_fit",
    "penalized_fit",
    "unconditional_fit",
]

XI_ZERO_TOL = 1e-8


class NoExceedanceError(ValueError):
    """No positive-weight positive exceedance is available for fitting."""


@dataclass(frozen=True)
class GpdParams:
    sigma: float
    xi: float

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ValueError(f"scale must be positive, got {self.sigma}")


@dataclass(frozen=True)
class ThetaBox:
    """Compact optimization box for (sigma, xi), with xi bounded below > -1."""

    sigma_lo: float
    sigma_hi: float
    xi_lo: float = -0.99
    xi_hi: float = 10.0

    def __post_init__(self):
        if not (0 < self.sigma_lo < self.sigma_hi):
            raise ValueError("need 0 < sigma_lo < sigma_hi")
        if not (-1.0 < self.xi_lo < self.xi_hi):
            raise ValueError("need -1 < xi_lo < xi_hi")

    @classmethod
    def default_for(cls, z_mean: float) -> "ThetaBox":
        return cls(sigma_lo=1e-6 * z_mean, sigma_hi=1e6 * z_mean)

    def clamp(self, sigma: float, xi: float) -> GpdParams:
        return GpdParams(
            sigma=min(max(sigma, self.sigma_lo), self.sigma_hi),
            xi=min(max(xi, self.xi_lo), self.xi_hi),
        )


@dataclass(frozen=True)
class ExceedanceSample:
    """Exceedances z >= 0 with aligned nonnegative weights."""

    z: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if z.shape != w.shape:
            raise ValueError("z and weights differ in length")
        if np.any(z < 0):
            raise ValueError("exceedances must be nonnegative")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "weights", w)

    def positive(self) -> tuple[np.ndarray, np.ndarray]:
        """Positive exceedances with their weights renormalized to sum 1."""
        mask = (self.z > 0) & (self.weights > 0)
        total = self.weights[mask].sum()
        if total <= 0:
            raise NoExceedanceError("no positive-weight positive exceedances")
        return self.z[mask], self.weights[mask] / total

    def positive_weight_total(self) -> float:
        return float(self.weights[self.z > 0].sum())


@dataclass(frozen=True)
class PenaltyConfig:
    """Shape-shrinkage penalty; ``xi_anchor=None`` lets the caller supply the
    unconditional fit as anchor before the penalized solve."""

    lam: float = 0.0
    xi_anchor: float | None = None
    k_over_n_scale: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty strength must be nonnegative")
        if not (self.k_over_n_scale > 0):
            raise ValueError("likelihood scale factor must be positive")


def gpd_cdf(z: float, theta: GpdParams) -> float:
    if z < 0:
        raise ValueError("z must be nonnegative")
    sigma, xi = theta.sigma, theta.xi
    if abs(xi) < XI_ZERO_TOL:
        return 1.0 - math.exp(-z / sigma)
    arg = xi * z / sigma
    if arg <= -1.0:  # beyond the upper endpoint for xi < 0
        return 1.0
    return -math.expm1(-math.log1p(arg) / xi)


def gpd_quantile(p: float, theta: GpdParams) -> float:
    if not (0.0 <= p < 1.0):
        if p == 1.0 and theta.xi < 0:
            return -theta.sigma / theta.xi
        raise ValueError("quantile level must lie in [0, 1); the upper tail is unbounded")
    sigma, xi = theta.sigma, theta.xi
    if abs(xi) < XI_ZERO_TOL:
        return -sigma * math.log1p(-p)
    return sigma / xi * math.expm1(-xi * math.log1p(-p))


def gpd_deviance(z: float, theta: GpdParams) -> float:
    if z <= 0:
        raise ValueError("deviance is defined for positive exceedances only")
    sigma, xi = theta.sigma, theta.xi
    if abs(xi) < XI_ZERO_TOL:
        return math.log(sigma) + z / sigma
    arg = 1.0 + xi * z / sigma
    if arg <= 0:
        return math.inf
    return math.log(sigma) + (1.0 + 1.0 / xi) * math.log(arg)


def _nll_terms(z: np.ndarray, sigma: float, xi: float) -> np.ndarray:
    """Vectorized deviance over positive exceedances; +inf outside support."""
    if abs(xi) < XI_ZERO_TOL:
        return np.log(sigma) + z / sigma
    arg = 1.0 + xi * z / sigma
    out = np.full(z.shape, np.inf)
    ok = arg > 0
    out[ok] = np.log(sigma) + (1.0 + 1.0 / xi) * np.log(arg[ok])
    return out


def weighted_nll(theta: GpdParams, sample: ExceedanceSample) -> float:
    mask = sample.z > 0
    if sample.weights[mask].sum() <= 0:
        raise NoExceedanceError("no positive-weight positive exceedances")
    terms = _nll_terms(sample.z[mask], theta.sigma, theta.xi)
    return float(np.sum(sample.weights[mask] * terms))


def fn_gn_eval(t: float, sample: ExceedanceSample) -> tuple[float, float]:
    """The pair (f, g) of the reparametrized stationarity system at t > 0."""
    if t <= 0:
        raise ValueError("t must be positive")
    z, w = sample.positive()
    return float(np.sum(w * np.log1p(t * z)) + 1.0), float(np.sum(w / (1.0 + t * z)))


def _fn_gn(t: float, z: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    arg = 1.0 + t * z
    if np.any(arg <= 0):
        return math.nan, math.nan
    return float(np.sum(w * np.log(arg)) + 1.0), float(np.sum(w / arg))


def _h(t: float, z: np.ndarray, w: np.ndarray) -> float:
    f, g = _fn_gn(t, z, w)
    return f * g - 1.0


def _bisect_root(t_lo, t_hi, z, w, tol=1e-12, max_iter=200):
    h_lo = _h(t_lo, z, w)
    for _ in range(max_iter):
        mid = 0.5 * (t_lo + t_hi)
        h_mid = _h(mid, z, w)
        if not math.isfinite(h_mid):
            t_lo, h_lo = mid, h_mid
            continue
        if abs(h_mid) < tol:
            return mid
        if (h_mid < 0) == (h_lo < 0):
            t_lo, h_lo = mid, h_mid
        else:
            t_hi = mid
    return 0.5 * (t_lo + t_hi)


def _h_grid(grid: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    arg = 1.0 + grid[:, None] * z[None, :]
    bad = np.any(arg <= 0, axis=1)
    arg[bad] = 1.0
    f = np.log(arg) @ w + 1.0
    g = (1.0 / arg) @ w
    h = f * g - 1.0
    h[bad] = np.nan
    return h


def _root_candidates(z: np.ndarray, w: np.ndarray) -> list[float]:
    """Sign-change roots of h on geometric grids over positive and negative t."""
    z_mean = float(np.sum(w * z))
    z_min = float(z.min())
    z_max = float(z.max())
    grids = [np.geomspace(1e-8 / z_mean, 1e4 / z_min, 200)]
    # t < 0 covers xi < 0; admissible range keeps 1 + t z_max > 0
    neg = -np.geomspace(1e-8 / z_mean, (1.0 - 1e-8) / z_max, 200)
    grids.append(neg[np.argsort(neg)])
    roots = []
    for grid in grids:
        h_vals = _h_grid(grid, z, w)
        finite = np.isfinite(h_vals)
        for i in range(len(grid) - 1):
            if not (finite[i] and finite[i + 1]):
                continue
            if h_vals[i] == 0.0:
                roots.append(float(grid[i]))
            elif h_vals[i] * h_vals[i + 1] < 0:
                roots.append(_bisect_root(grid[i], grid[i + 1], z, w))
    return roots


def _nll_normalized(z, w, sigma, xi) -> float:
    return float(np.sum(w * _nll_terms(z, sigma, xi)))


def _direct_minimize(z, w, box: ThetaBox, objective, starts) -> tuple[float, float]:
    """Derivative-free box-constrained search over (log sigma, xi)."""
    bounds = [(math.log(box.sigma_lo), math.log(box.sigma_hi)), (box.xi_lo, box.xi_hi)]

    def wrapped(params):
        log_sigma, xi = params
        return objective(math.exp(log_sigma), xi)

    best = None
    for sigma0, xi0 in starts:
        x0 = [
            min(max(math.log(sigma0), bounds[0][0]), bounds[0][1]),
            min(max(xi0, bounds[1][0]), bounds[1][1]),
        ]
        with np.errstate(invalid="ignore"):
            res = minimize(
                wrapped,
                x0,
                method="Nelder-Mead",
                bounds=bounds,
                options={"xatol": 1e-10, "fatol": 1e-9, "maxiter": 2000},
            )
        if best is None or res.fun < best[0]:
            best = (res.fun, math.exp(res.x[0]), res.x[1])
    return best[1], best[2]


def _coarse_scan(z, w, box: ThetaBox) -> tuple[float, float]:
    """Best (sigma, xi) over a coarse grid, used to seed the direct search.

    The grid covers the whole shape box including the negative branch, where
    the likelihood can peak with the upper endpoint just above the largest
    exceedance; extra scale values hug that endpoint.
    """
    z_mean = float(np.sum(w * z))
    z_max = float(z.max())
    sigmas = np.geomspace(
        max(box.sigma_lo, 1e-3 * z_mean), min(box.sigma_hi, 1e3 * z_mean), 40
    )
    xis = np.linspace(box.xi_lo, min(box.xi_hi, 6.0), 60)
    best = (math.inf, z_mean, 0.0)
    for xi in xis:
        if xi < 0:
            hug = -xi * z_max * (1.0 + np.array([1e-5, 1e-4, 1e-3, 1e-2, 0.1, 0.3]))
            sig = np.concatenate([sigmas, hug[(hug >= box.sigma_lo) & (hug <= box.sigma_hi)]])
        else:
            sig = sigmas
        if abs(xi) < XI_ZERO_TOL:
            vals = np.log(sig) + z_mean / sig
        else:
            arg = 1.0 + xi * z[None, :] / sig[:, None]
            ok = np.all(arg > 0, axis=1)
            arg[~ok] = 1.0
            vals = np.log(sig) + (1.0 + 1.0 / xi) * (np.log(arg) @ w)
            vals[~ok] = np.inf
        j = int(np.argmin(vals))
        if vals[j] < best[0]:
            best = (float(vals[j]), float(sig[j]), float(xi))
    return best[1], best[2]


def _objective_grad_hess(z, w, sigma, xi, k_scale, lam, anchor):
    """Gradient and Hessian of k_scale * NLL + lam * (xi - anchor)^2.

    Uses the closed forms in terms of r_i = z_i / (sigma + xi z_i); valid only
    away from xi = 0 and inside the support.
    """
    a = sigma + xi * z
    r = z / a
    c = 1.0 + 1.0 / xi
    s0 = float(np.sum(w * np.log1p(xi * z / sigma)))
    big_r = float(np.sum(w * r))
    r_sig = -float(np.sum(w * r * r / z))
    r_xi = -float(np.sum(w * r * r))
    l_sig = (1.0 - c * xi * big_r) / sigma
    l_xi = -s0 / xi**2 + c * big_r
    l_ss = -c * xi * r_sig / sigma - (1.0 - c * xi * big_r) / sigma**2
    l_sx = -(-(1.0 / xi**2) * xi * big_r + c * big_r + c * xi * r_xi) / sigma
    l_xx = 2.0 * s0 / xi**3 - 2.0 * big_r / xi**2 + c * r_xi
    grad = np.array([k_scale * l_sig, k_scale * l_xi + 2.0 * lam * (xi - anchor)])
    hess = np.array(
        [
            [k_scale * l_ss, k_scale * l_sx],
            [k_scale * l_sx, k_scale * l_xx + 2.0 * lam],
        ]
    )
    return grad, hess


def _newton_polish(z, w, sigma, xi, box, k_scale=1.0, lam=0.0, anchor=0.0):
    """Sharpen an interior optimum with damped Newton steps on the gradient.

    Direct searches resolve the argmin only to about sqrt(machine eps); a few
    Newton iterations push it to near machine precision, which makes fits
    invariant to weight rescaling at tight tolerance. Returns the input
    unchanged when the point is at a box edge, near xi = 0, or the iteration
    does not contract.
    """
    margin = 1e-6
    if (
        abs(xi) < 1e-4
        or xi < box.xi_lo + margin
        or xi > box.xi_hi - margin
        or sigma < box.sigma_lo * (1 + margin)
        or sigma > box.sigma_hi * (1 - margin)
    ):
        return sigma, xi
    cur = np.array([sigma, xi])
    grad, hess = _objective_grad_hess(z, w, cur[0], cur[1], k_scale, lam, anchor)
    gnorm = float(np.linalg.norm(grad))
    for _ in range(30):
        if gnorm < 1e-13:
            break
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return sigma, xi
        scale = 1.0
        improved = False
        for _ in range(20):
            trial = cur - scale * step
            if (
                trial[0] > 0
                and box.xi_lo < trial[1] < box.xi_hi
                and box.sigma_lo < trial[0] < box.sigma_hi
                and trial[0] + trial[1] * float(z.max()) > 0
                and abs(trial[1]) > 1e-5
            ):
                g2, h2 = _objective_grad_hess(
                    z, w, trial[0], trial[1], k_scale, lam, anchor
                )
                if float(np.linalg.norm(g2)) < gnorm:
                    cur, grad, hess = trial, g2, h2
                    gnorm = float(np.linalg.norm(g2))
                    improved = True
                    break
            scale *= 0.5
        if not improved:
            break
    before = k_scale * _nll_normalized(z, w, sigma, xi) + lam * (xi - anchor) ** 2
    after = k_scale * _nll_normalized(z, w, cur[0], cur[1]) + lam * (cur[1] - anchor) ** 2
    if after <= before + 1e-10:
        return float(cur[0]), float(cur[1])
    return sigma, xi


def _moment_start(z, w) -> tuple[float, float]:
    mean = float(np.sum(w * z))
    var = float(np.sum(w * (z - mean) ** 2))
    if var <= 0:
        return mean, -0.5
    xi0 = 0.5 * (1.0 - mean * mean / var)
    sigma0 = 0.5 * mean * (mean * mean / var + 1.0)
    return max(sigma0, 1e-12), xi0


def grimshaw_fit(sample: ExceedanceSample, theta_box: ThetaBox | None = None) -> GpdParams:
    """Weighted GPD maximum likelihood via the one-dimensional root search.

    Candidates from every sign-change root of h are compared by weighted
    deviance together with a direct box-constrained safeguard search; the
    smallest wins. With no admissible root the direct search alone is used
    and a warning flags the fallback.
    """
    z, w = sample.positive()
    if np.unique(z).size < 2:
        if z.size < 2:
            raise NoExceedanceError(
                "need at least 2 positive-weight exceedances for identifiability"
            )
        degenerate = True
    else:
        degenerate = False
    box = theta_box if theta_box is not None else ThetaBox.default_for(float(np.sum(w * z)))

    candidates = []
    if not degenerate:
        for t in _root_candidates(z, w):
            f, _ = _fn_gn(t, z, w)
            if not math.isfinite(f):
                continue
            xi = f - 1.0
            sigma = xi / t
            if sigma <= 0:
                continue
            theta = box.clamp(sigma, xi)
            candidates.append((_nll_normalized(z, w, theta.sigma, theta.xi), theta))

    if candidates:
        best_root = min(candidates, key=lambda c: c[0])
        starts = [(best_root[1].sigma, best_root[1].xi)]
    else:
        starts = [_moment_start(z, w)]
        warnings.warn(
            "no admissible stationary point found; falling back to direct minimization",
            RuntimeWarning,
            stacklevel=2,
        )
    starts.append(_coarse_scan(z, w, box))
    sigma, xi = _direct_minimize(
        z, w, box, lambda s, x: _nll_normalized(z, w, s, x), starts
    )
    theta = box.clamp(sigma, xi)
    candidates.append((_nll_normalized(z, w, theta.sigma, theta.xi), theta))
    winner = min(candidates, key=lambda c: c[0])[1]
    sigma, xi = _newton_polish(z, w, winner.sigma, winner.xi, box)
    return GpdParams(sigma=sigma, xi=xi)


def penalized_fit(
    sample: ExceedanceSample,
    penalty: PenaltyConfig,
    theta_box: ThetaBox | None = None,
    warm_start: GpdParams | None = None,
) -> GpdParams:
    """Minimize scale * weighted deviance + lam * (xi - anchor)^2 over the box.

    With lam == 0 this is exactly the unpenalized fit. Otherwise a
    derivative-free search warm-started at the unpenalized solution (and at
    the anchor shape) finds the penalized optimum. ``warm_start`` lets a
    caller reuse an already-computed unpenalized fit for the same sample.
    """
    base = warm_start if warm_start is not None else grimshaw_fit(sample, theta_box)
    if penalty.lam == 0.0:
        return base
    if penalty.xi_anchor is None:
        raise ValueError("penalized fit needs a concrete shape anchor")
    z, w = sample.positive()
    box = theta_box if theta_box is not None else ThetaBox.default_for(float(np.sum(w * z)))

    def objective(sigma, xi):
        return penalty.k_over_n_scale * _nll_normalized(z, w, sigma, xi) + penalty.lam * (
            xi - penalty.xi_anchor
        ) ** 2

    starts = [(base.sigma, base.xi), (base.sigma, penalty.xi_anchor)]
    sigma, xi = _direct_minimize(z, w, box, objective, starts)
    theta = box.clamp(sigma, xi)
    sigma, xi = _newton_polish(
        z,
        w,
        theta.sigma,
        theta.xi,
        box,
        k_scale=penalty.k_over_n_scale,
        lam=penalty.lam,
        anchor=penalty.xi_anchor,
    )
    return GpdParams(sigma=sigma, xi=xi)


def unconditional_fit(z: np.ndarray, theta_box: ThetaBox | None = None) -> GpdParams:
    """Unweighted GPD fit: uniform weights over all exceedances."""
    z = np.asarray(z, dtype=np.float64).ravel()
    sample = ExceedanceSample(z=z, weights=np.ones_like(z))
    return grimshaw_fit(sample, theta_box)


def penalized_foc_residual(
    theta: GpdParams, sample: ExceedanceSample, penalty: PenaltyConfig
) -> tuple[float, float]:
    """Residuals of the penalized first-order conditions at theta."""
    z, w = sample.positive()
    t = theta.xi / theta.sigma
    arg = 1.0 + t * z
    r1 = (
        float(np.sum(w * np.log(arg)))
        - theta.xi
        - 2.0
        * penalty.lam
        * theta.xi**2
        * (theta.xi - penalty.xi_anchor)
        / penalty.k_over_n_scale
    )
    r2 = float(np.sum(w / arg)) - 1.0 / (theta.xi + 1.0)
    return r1, r2
