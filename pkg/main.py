#!/usr/bin/env python
"""Selektor 命令行入口。

Usage:
    python main.py filedrawer --threshold 1 --alpha 0.05
    python main.py ztest --design X.csv --response y.csv --model 0,1 --target 0 --sigma 1 --region region.json
    python main.py ttest --design X.csv --response y.csv --model 0,1 --target 0 --region region.json
    python main.py lasso-infer --design X.csv --response y.csv --lambda 2.5 --sigma 1
    python main.py carve-sim --config carve.json --threads 8
    python main.py sweep --config carve.json --n1 50,75,100 --modes split,carve
    python main.py aggregate --kind discipline|fcr|fwer --config aggregate.json
    python main.py gallery --which ex2|ex3|ex4

Global options (before the subcommand): --threads N, --seed S, --output PATH, --env ENV.
Exit codes: 0 success, 2 precondition error, 3 numerical failure.
"""

import argparse
import os
import sys
from typing import Any

from app.core.config import SEED_ENV_VAR, get_settings, reload_settings
from app.core.exceptions import InvalidConfigurationError, SelektorError
from app.core.logger import get_module_logger, init_logger
from app.schemas.experiments import AggregateConfig, CarvingConfig
from app.services.gallery import GALLERY, example_gallery
from app.services.harness import (
    aggregate_error_check,
    file_drawer_cutoff,
    nominal_conditional_error,
    run_carving_experiment,
    tradeoff_sweep,
)
from app.services.lasso import lambda_mc, lasso_infer
from app.services.regions import SelectionRegion
from app.services.regression import METHODS, RegressionProblem, selected_t_test, selected_z_test
from app.services.saturated import saturated_t_test, saturated_z_test
from app.utils.io import dump_json, read_matrix, read_model, read_region, read_vector, write_output, write_table

log = get_module_logger("cli")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "y"):
        return True
    if lowered in ("0", "false", "no", "n"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selektor", description="Selective inference after model selection")
    parser.add_argument("--threads", type=int, default=None, help="并行进程数上限")
    parser.add_argument("--seed", type=int, default=None, help="全局随机种子, 覆盖配置与 SELEKTOR_SEED")
    parser.add_argument("--output", default=None, help="输出文件, 默认 stdout")
    parser.add_argument("--env", default=None, help="配置环境 (dev/test/prod)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filedrawer", help="file-drawer cutoff")
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.05)

    for name in ("ztest", "ttest"):
        p = sub.add_parser(name, help=f"selective {name[0]}-test of one coefficient")
        p.add_argument("--design", required=True, help="design matrix CSV")
        p.add_argument("--response", required=True, help="response CSV")
        p.add_argument("--model", required=True, type=_int_list, help="selected columns, 0-based")
        p.add_argument("--target", required=True, type=int, help="tested column, 0-based")
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--region", default=None, help="region JSON; whole space when omitted")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--null", type=float, default=0.0, help="hypothesized coefficient")
        p.add_argument("--method", choices=METHODS, default="equal_tailed")
        p.add_argument("--saturated", action="store_true", help="saturated-model inference")
        p.add_argument("--no-interval", action="store_true")

    p = sub.add_parser("lasso-infer", help="lasso fit plus selected-model inference")
    p.add_argument("--design", required=True)
    p.add_argument("--response", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--lambda", dest="lam", type=float)
    group.add_argument("--lambda-mc", action="store_true", help="λ = 2·E‖Xᵀε‖∞ (needs --sigma)")
    p.add_argument("--sigma", type=float, default=None, help="known σ; t-tests when omitted")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--condition-signs", type=_bool, default=True)
    p.add_argument("--method", choices=METHODS, default="equal_tailed")
    p.add_argument("--no-interval", action="store_true")

    p = sub.add_parser("carve-sim", help="data splitting vs data carving simulation")
    p.add_argument("--config", default=None, help="CarvingConfig JSON")

    p = sub.add_parser("sweep", help="power vs screening tradeoff over n1")
    p.add_argument("--config", default=None, help="CarvingConfig JSON")
    p.add_argument("--n1", required=True, type=_int_list)
    p.add_argument("--modes", default=None, help="comma-separated modes, default the config's mode")
    p.add_argument("--full", action="store_true", help="emit the full metrics table")

    p = sub.add_parser("aggregate", help="long-run error ratio check")
    p.add_argument("--kind", required=True, choices=("discipline", "fcr", "fwer"))
    p.add_argument("--config", default=None, help="AggregateConfig JSON")

    p = sub.add_parser("gallery", help="worked examples as JSON")
    p.add_argument("--which", required=True, choices=GALLERY)
    return parser


def _problem(args: argparse.Namespace, sigma: float | None) -> tuple[RegressionProblem, SelectionRegion]:
    X = read_matrix(args.design)
    y = read_vector(args.response)
    problem = RegressionProblem(
        X=X,
        y=y,
        model=tuple(args.model),
        target=args.target,
        sigma=sigma,
        null_value=args.null,
        method=args.method,
    )
    region = read_region(args.region) if args.region else SelectionRegion.whole_space(X.shape[0])
    return problem, region


def _ztest(args: argparse.Namespace) -> dict[str, Any]:
    if args.sigma is None:
        raise InvalidConfigurationError("ztest needs --sigma; use ttest when σ is unknown")
    problem, region = _problem(args, args.sigma)
    if args.saturated:
        outcome = saturated_z_test(problem, region, args.alpha, with_interval=not args.no_interval)
    else:
        outcome = selected_z_test(problem, region, args.alpha, with_interval=not args.no_interval)
    return outcome.report()


def _ttest(args: argparse.Namespace) -> dict[str, Any]:
    if args.sigma is not None:
        raise InvalidConfigurationError("ttest treats sigma as unknown; drop --sigma or use ztest")
    problem, region = _problem(args, None)
    if args.saturated:
        outcome = saturated_t_test(problem, region, args.alpha)
    else:
        outcome = selected_t_test(problem, region, args.alpha, with_interval=not args.no_interval)
    return outcome.report()


def _lasso_infer(args: argparse.Namespace) -> dict[str, Any]:
    X = read_matrix(args.design)
    y = read_vector(args.response)
    if args.lambda_mc:
        if args.sigma is None:
            raise InvalidConfigurationError("--lambda-mc needs --sigma")
        lam = lambda_mc(X, args.sigma)
        log.info(f"lambda from Monte Carlo: {lam:.6g}")
    else:
        lam = args.lam
    report = lasso_infer(
        X,
        y,
        lam,
        args.alpha,
        sigma=args.sigma,
        condition_on_signs=args.condition_signs,
        method=args.method,
        with_interval=not args.no_interval,
    )
    return report.report()


def _carving_config(path: str | None) -> CarvingConfig:
    return read_model(path, CarvingConfig) if path else CarvingConfig()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None:
        os.environ[SEED_ENV_VAR] = str(args.seed)
    try:
        settings = reload_settings(args.env) if args.seed is not None or args.env is not None else get_settings()
    except SelektorError as e:
        print(f"selektor: {e}", file=sys.stderr)
        return e.exit_code
    init_logger()
    threads = settings.experiment.threads if args.threads is None else args.threads

    try:
        match args.command:
            case "filedrawer":
                cutoff = file_drawer_cutoff(args.threshold, args.alpha)
                nominal = file_drawer_cutoff(0.0, args.alpha)
                payload = {
                    "threshold": args.threshold,
                    "alpha": args.alpha,
                    "cutoff": cutoff,
                    "nominal_cutoff": nominal,
                    "nominal_conditional_error": nominal_conditional_error(args.threshold, nominal),
                }
                write_output(dump_json(payload), args.output)
            case "ztest":
                write_output(dump_json(_ztest(args)), args.output)
            case "ttest":
                write_output(dump_json(_ttest(args)), args.output)
            case "lasso-infer":
                write_output(dump_json(_lasso_infer(args)), args.output)
            case "carve-sim":
                table = run_carving_experiment(_carving_config(args.config), threads)
                write_table(table.to_frame(), args.output)
            case "sweep":
                modes = args.modes.split(",") if args.modes else None
                table = tradeoff_sweep(_carving_config(args.config), args.n1, modes, threads)
                write_table(table.to_frame() if args.full else table.curve_frame(), args.output)
            case "aggregate":
                config = read_model(args.config, AggregateConfig) if args.config else AggregateConfig()
                report = aggregate_error_check(args.kind, config)
                write_output(dump_json(report.model_dump()), args.output)
            case "gallery":
                write_output(dump_json(example_gallery(args.which, seed=settings.seed)), args.output)
    except SelektorError as e:
        log.error(f"{args.command} failed: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
