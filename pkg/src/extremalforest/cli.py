"""Command-line front end: simulate, fit, predict, eval, bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import simbench
from .archive import ArchiveError, load_model, save_model
from .cv import CvPlan, tune
from .forest import ForestParams, TrainingSet
from .gpd import PenaltyConfig
from .model import erf_fit, predict_quantiles, predict_gpd_params, intermediate_quantile
from .simbench import SimSpec, generate, halton_grid, ise, true_quantile, wang_loss

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_csv(path: str, response: str | None = None):
    """Read a numeric CSV with header; returns (header, matrix).

    Rejects non-finite values with a row-numbered diagnostic.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, header required") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, np.asarray(rows, dtype=np.float64)


def _load_training(path: str, response: str | None):
    header, mat = _read_csv(path)
    if response is None:
        y_col = len(header) - 1
    else:
        if response not in header:
            raise UsageError(f"response column {response!r} not in {path} header")
        y_col = header.index(response)
    x_cols = [j for j in range(len(header)) if j != y_col]
    return TrainingSet(x=mat[:, x_cols], y=mat[:, y_col])


def _parse_spec(args, n: int | None = None, p: int | None = None) -> SimSpec:
    family = args.family
    kwargs = {}
    if family == "example1":
        family = "example1_student_t"
    elif family.startswith("experiment2"):
        shape_txt = family.split(":", 1)[1] if ":" in family else "0.25"
        family, kwargs = "experiment2", {"shape": float(shape_txt)}
    elif family.startswith("sensitivity_"):
        if ":" in family:
            family, surface = family.split(":", 1)
            kwargs = {"surface": surface}
    if family not in simbench.FAMILIES:
        raise UsageError(
            f"unknown family {args.family!r}; valid: example1, experiment2[:shape], "
            f"experiment3_model1|2|3, sensitivity_student[:surface], "
            f"sensitivity_pareto[:surface], gpd_step"
        )
    return SimSpec(
        family=family,
        p=p if p is not None else args.p,
        n=n if n is not None else args.n,
        seed=args.seed,
        **kwargs,
    )


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_simulate(args) -> int:
    spec = _parse_spec(args)
    data = generate(spec)
    header = [f"x{j + 1}" for j in range(data.p)] + ["y"]
    rows = [
        [repr(float(v)) for v in row] + [repr(float(y))]
        for row, y in zip(data.x, data.y)
    ]
    _atomic_write_text(args.out, _csv_text(header, rows))
    print(f"wrote {data.n} rows to {args.out}")
    return EXIT_OK


def _parse_grid(text: str, cast):
    try:
        return tuple(cast(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"malformed grid {text!r}") from None


def cmd_fit(args) -> int:
    data = _load_training(args.data, args.response)
    params = ForestParams(
        num_trees=args.trees,
        min_node_size=args.kappa,
        seed=args.seed,
    )
    if args.kappa_grid or args.lambda_grid:
        plan = CvPlan(
            kappa_grid=_parse_grid(args.kappa_grid, int) if args.kappa_grid else (args.kappa,),
            lambda_grid=_parse_grid(args.lambda_grid, float) if args.lambda_grid else (args.penalty,),
            seed=args.seed,
        )
        model, result = tune(data, args.tau_n, plan, params)
        kappa, lam = result.best
        print(f"cross-validation selected kappa={kappa} lambda={lam}")
    else:
        model = erf_fit(
            data,
            tau_n=args.tau_n,
            forest_params=params,
            penalty=PenaltyConfig(lam=args.penalty),
        )
    save_model(model, args.out)
    print(f"wrote model to {args.out}")
    return EXIT_OK


def _parse_taus(text: str):
    taus = _parse_grid(text, float)
    for tau in taus:
        if not (0.0 < tau < 1.0):
            raise UsageError(f"tau {tau} outside (0, 1)")
    return taus


def cmd_predict(args) -> int:
    model = load_model(args.model)
    header, mat = _read_csv(args.test)
    p = model.training.p
    if mat.shape[1] == p + 1:
        mat = mat[:, :p]  # tolerate a trailing response column
    if mat.shape[1] != p:
        raise UsageError(
            f"test file has {mat.shape[1]} predictor columns, model expects {p}"
        )
    taus = _parse_taus(args.tau)
    for tau in taus:
        if tau <= model.tau_n:
            raise UsageError(
                f"tau={tau} is at or below the intermediate level tau_n={model.tau_n}; "
                "request a level above tau_n or use a plain quantile forest"
            )
    out_rows = []
    preds = predict_quantiles(model, mat, taus, estimator=args.estimator)
    for i in range(mat.shape[0]):
        q_int = intermediate_quantile(model, mat[i])
        if args.estimator == "erf":
            theta = predict_gpd_params(model, mat[i])
            sigma, xi = theta.sigma, theta.xi
        else:
            sigma, xi = float("nan"), float("nan")
        for j, tau in enumerate(taus):
            out_rows.append(
                [repr(float(v)) for v in mat[i]]
                + [
                    repr(float(tau)),
                    repr(float(q_int)),
                    repr(float(sigma)),
                    repr(float(xi)),
                    repr(float(preds[i, j])),
                ]
            )
    header_out = [f"x{j + 1}" for j in range(p)] + [
        "tau",
        "q_intermediate",
        "sigma_hat",
        "xi_hat",
        "q_extreme",
    ]
    _atomic_write_text(args.out, _csv_text(header_out, out_rows))
    print(f"wrote {len(out_rows)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_header, pred = _read_csv(args.predictions)
    if "tau" not in pred_header or "q_extreme" not in pred_header:
        raise UsageError(f"{args.predictions} lacks tau/q_extreme columns")
    tau_col = pred_header.index("tau")
    q_col = pred_header.index("q_extreme")
    data_header, mat = _read_csv(args.data)
    y = mat[:, -1]
    results = {}
    for tau in np.unique(pred[:, tau_col]):
        q_hat = pred[pred[:, tau_col] == tau, q_col]
        if q_hat.shape[0] != y.shape[0]:
            raise UsageError(
                f"{q_hat.shape[0]} predictions at tau={tau} vs {y.shape[0]} test rows"
            )
        results[f"wang_loss@tau={tau}"] = wang_loss(q_hat, y, float(tau))
        if args.family:
            spec = _parse_spec(args, n=max(2, y.shape[0]), p=mat.shape[1] - 1)
            truths = true_quantile(spec, mat[:, :-1], float(tau))
            results[f"ise@tau={tau}"] = ise(q_hat, truths)
    text = json.dumps(results, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


EXPERIMENTS = ("exp1-quantiles", "exp1-dims", "exp2", "exp3", "sensitivity")


def _bench_scale(desk: bool):
    if desk:
        return {"reps": 10, "grid": 200, "trees": 500}
    return {"reps": 50, "grid": 1000, "trees": 2000}


def cmd_bench(args) -> int:
    if args.experiment not in EXPERIMENTS:
        raise UsageError(
            f"unknown experiment {args.experiment!r}; valid: {', '.join(EXPERIMENTS)}"
        )
    scale = _bench_scale(args.desk_scale)
    os.makedirs(args.out_dir, exist_ok=True)
    runs = []
    if args.experiment == "exp1-quantiles":
        spec = SimSpec(family="example1_student_t", p=10, n=2000, seed=args.seed)
        runs.append(("exp1_quantiles", spec, (0.9, 0.99, 0.995, 0.999, 0.9995), 0.8, None))
    elif args.experiment == "exp1-dims":
        for p in (5, 10, 20, 40):
            spec = SimSpec(family="example1_student_t", p=p, n=2000, seed=args.seed)
            runs.append((f"exp1_dims_p{p}", spec, (0.9995,), 0.8, None))
    elif args.experiment == "exp2":
        for shape in (0.0, 0.25, 1.0 / 3.0):
            spec = SimSpec(family="experiment2", p=40, n=2000, seed=args.seed, shape=shape)
            runs.append((f"exp2_shape{shape:.3f}", spec, (0.9995,), 0.8, None))
    elif args.experiment == "exp3":
        for which in (1, 2, 3):
            spec = SimSpec(
                family=f"experiment3_model{which}", p=10,
                n=2000 if args.desk_scale else 5000, seed=args.seed,
            )
            runs.append((f"exp3_model{which}", spec, (0.995, 0.9995), 0.8, None))
    else:
        for family in ("sensitivity_student", "sensitivity_pareto"):
            for tau_n in (0.5, 0.6, 0.7, 0.8, 0.9, 0.95):
                spec = SimSpec(family=family, p=2, n=1000, seed=args.seed)
                runs.append(
                    (
                        f"{family}_taun{tau_n}",
                        spec,
                        (0.9995,),
                        tau_n,
                        ("erf", "hill", "expshape"),
                    )
                )
    for name, spec, taus, tau_n, methods in runs:
        report = simbench.run_experiment(
            spec,
            methods=methods if methods else simbench.METHODS,
            taus=taus,
            repetitions=scale["reps"],
            tau_n=tau_n,
            forest_params=ForestParams(num_trees=scale["trees"], seed=args.seed),
            grid_points=scale["grid"],
        )
        report.write_csv(os.path.join(args.out_dir, f"{name}.csv"))
        report.write_json(os.path.join(args.out_dir, f"{name}.json"))
        print(f"wrote {name}.csv and {name}.json to {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extremalforest",
        description="Extreme quantile regression with localized generalized Pareto tails",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset to CSV")
    p_sim.add_argument("--family", required=True)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--p", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit a model, optionally cross-validating")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--response", default=None, help="response column (default: last)")
    p_fit.add_argument("--tau-n", dest="tau_n", type=float, default=0.8)
    p_fit.add_argument("--kappa", type=int, default=40)
    p_fit.add_argument("--lambda", dest="penalty", type=float, default=0.01)
    p_fit.add_argument("--kappa-grid", default=None)
    p_fit.add_argument("--lambda-grid", default=None)
    p_fit.add_argument("--trees", type=int, default=2000)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="predict extreme quantiles for test rows")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--test", required=True)
    p_pred.add_argument("--tau", required=True, help="comma-separated levels above tau_n")
    p_pred.add_argument("--estimator", choices=("erf", "hill", "expshape"), default="erf")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="score predictions by calibration loss and ISE")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--data", required=True, help="test CSV with response last")
    p_eval.add_argument("--family", default=None, help="simulation family for exact ISE")
    p_eval.add_argument("--p", type=int, default=None)
    p_eval.add_argument("--n", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="run a simulation benchmark")
    p_bench.add_argument("--experiment", required=True)
    p_bench.add_argument("--desk-scale", action="store_true")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out-dir", default="bench-out")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
