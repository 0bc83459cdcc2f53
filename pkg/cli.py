"""
Командная строка SSGL.

    python cli.py fit --input data.csv --response y [--groups map.json]
    python cli.py cv | gam | interact | debias | predict | simulate ...

Код возврата: 0: успех, 2: ошибка валидации, 3: численный сбой.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from basis_expansion import BasisSpec, GamDesign, GamRecipe, InteractionSpec, predict_effects
from debias_inference import run_debiased_inference
from errors import CsvFormatError, DimensionMismatch, SsglError
from grouped_design import PreparedDesign, load_grouped_csv, read_numeric_csv
from model_selection import kfold_cv, refit
from report_export import export_tables_to_excel, read_json, write_csv, write_json
from run_config import COMMANDS, RunConfig, env_threads, parse_list, setup_logging
from sim_harness import SimScenario, run_scenario
from ssgl_solver import SsglConfig, fit_path

logger = logging.getLogger("SSGL")


# ----------------------
# Argument parsing
# ----------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssgl", description="Spike-and-slab group lasso")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--input", dest="input_path")
    parser.add_argument("--response")
    parser.add_argument("--groups", dest="group_map_path", help="JSON: column name -> group id")
    parser.add_argument("--model", dest="model_path")
    parser.add_argument("--grid", dest="grid_path", help="CSV with covariate grid for effect curves")
    parser.add_argument("--lambda0", default=None, help="ladder, e.g. 1:100:1 or 1,5,10")
    parser.add_argument("--lambda1", type=float, default=1.0)
    parser.add_argument("--df", default=None, help="spline df set, e.g. 2,3,4")
    parser.add_argument("--basis", dest="basis_kind", choices=("natural", "bspline"), default="natural")
    parser.add_argument("--d-star", dest="d_star", type=int, default=2)
    parser.add_argument("--folds", dest="k_folds", type=int, default=10)
    parser.add_argument("--alpha", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", dest="output_dir", default="out")
    parser.add_argument("--hierarchy", action="store_true")
    parser.add_argument("--unpenalized", default=None, help="comma-separated group ids")
    parser.add_argument("--one-se", dest="one_se_rule", action="store_true")
    parser.add_argument("--method", choices=("ssgl", "group_lasso"), default="ssgl")
    parser.add_argument("--scenario")
    parser.add_argument("--n", type=int)
    parser.add_argument("--p", type=int)
    parser.add_argument("--rho", type=float, default=0.0)
    parser.add_argument("--replicates", type=int, default=1)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--xlsx", action="store_true")
    parser.add_argument("--log-level", dest="log_level", default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k not in ("lambda0", "df", "unpenalized", "log_level", "threads")}
    if args.lambda0:
        values["lambda0_ladder"] = tuple(parse_list(args.lambda0, float))
    if args.df:
        values["df_set"] = tuple(parse_list(args.df, int))
    if args.unpenalized:
        values["unpenalized"] = tuple(parse_list(args.unpenalized, str))
    values["threads"] = args.threads if args.threads is not None else env_threads(1)
    return RunConfig(**values)


# ----------------------
# Shared pieces
# ----------------------

def _solver_config(cfg: RunConfig) -> SsglConfig:
    if cfg.method == "group_lasso":
        # лестница задает значения λ группового lasso, а не λ0
        return SsglConfig()
    return SsglConfig(lambda0_ladder=cfg.lambda0_ladder, lambda1=cfg.lambda1)


def _group_lasso_ladder(cfg: RunConfig) -> Optional[Sequence[float]]:
    """Значения λ группового lasso, если пользователь задал их явно"""
    if cfg.method == "group_lasso" and "lambda0_ladder" in cfg.model_fields_set:
        return cfg.lambda0_ladder
    return None


def _rule(cfg: RunConfig) -> str:
    return "1se" if cfg.one_se_rule else "min"


def _load_covariates(path: str, response: Optional[str]):
    frame = read_numeric_csv(path)
    if response is not None:
        if response not in frame.columns:
            raise CsvFormatError(path, f"response column {response!r} not found")
        y = frame[response].to_numpy()
        frame = frame.drop(columns=[response])
    else:
        y = None
    if frame.shape[1] == 0:
        raise CsvFormatError(path, "no covariate columns")
    return frame, y


def _model_payload(design, fit, method: str, trace: Optional[pd.DataFrame] = None) -> dict:
    grouped = design.design
    group_of = [spec.id for spec in grouped.groups for _ in range(spec.size)]
    payload = {
        "method": method,
        "column_names": list(design.column_names),
        "column_groups": group_of,
        "coefficients_ortho": fit.beta_ortho,
        "coefficients_original": fit.beta_original,
        "intercept": fit.intercept,
        "selected_groups": list(fit.selected_groups),
        "design": design.to_dict(),
    }
    if method == "ssgl":
        payload.update({
            "lambda0": fit.lambda0,
            "sigma2": fit.sigma2,
            "theta": fit.theta,
            "generalized_dimension": fit.generalized_dimension,
            "iterations": fit.iterations,
            "converged": fit.converged,
        })
    else:
        payload.update({"lambda": fit.lam, "iterations": fit.iterations, "converged": fit.converged})
    if trace is not None:
        payload["ladder_trace"] = trace.to_dict(orient="records")
    return payload


def _coefficient_table(design, fit) -> pd.DataFrame:
    grouped = design.design
    return pd.DataFrame({
        "column": list(design.column_names) or [f"b{j}" for j in range(grouped.p)],
        "group": [spec.id for spec in grouped.groups for _ in range(spec.size)],
        "ortho": fit.beta_ortho,
        "original": fit.beta_original,
    })


def _finish(cfg: RunConfig, out: Path, design, fit, tables: dict, trace: Optional[pd.DataFrame] = None) -> None:
    provenance = cfg.provenance()
    write_json(out / "model.json", _model_payload(design, fit, cfg.method, trace), provenance)
    fitted = design.design.y_mean + design.design.X @ fit.beta_ortho
    tables = {"coefficients": _coefficient_table(design, fit), "fitted": pd.DataFrame({"fitted": fitted}), **tables}
    for name, frame in tables.items():
        write_csv(out / f"{name}.csv", frame, provenance)
    if cfg.xlsx:
        export_tables_to_excel(out / "report.xlsx", tables, provenance)


def _fit_design(cfg: RunConfig, X, y, recipe):
    config = _solver_config(cfg)
    if cfg.method == "group_lasso":
        # λ выбирается K-fold CV по явной лестнице или по сетке от λ_max
        cv = kfold_cv(X, y, recipe, config, K=cfg.k_folds, seed=cfg.seed, method="group_lasso",
                      rule=_rule(cfg), ladder=_group_lasso_ladder(cfg), threads=cfg.threads)
        design, fit, _ = refit(X, y, recipe, config, cv.chosen_penalty, None, "group_lasso")
        return design, fit, None
    design = recipe.build(X, y)
    path = fit_path(design, config)
    return design, path.final, path.trace()


# ----------------------
# Commands
# ----------------------

def cmd_fit(cfg: RunConfig) -> int:
    X, y, recipe = load_grouped_csv(cfg.input_path, cfg.response, cfg.group_map_path, cfg.unpenalized)
    design, fit, trace = _fit_design(cfg, X, y, recipe)
    tables = {"trace": trace} if trace is not None else {}
    _finish(cfg, cfg.ensure_output_dir(), design, fit, tables, trace)
    logger.info("Selected groups: %s", fit.selected_groups)
    return 0


def cmd_cv(cfg: RunConfig) -> int:
    X, y, recipe = load_grouped_csv(cfg.input_path, cfg.response, cfg.group_map_path, cfg.unpenalized)
    config = _solver_config(cfg)
    cv = kfold_cv(X, y, recipe, config, K=cfg.k_folds, seed=cfg.seed, method=cfg.method,
                  rule=_rule(cfg), ladder=_group_lasso_ladder(cfg),
                  threads=cfg.threads)
    design, fit, path = refit(X, y, recipe, config, cv.chosen_penalty, cv.chosen_df, cfg.method)
    out = cfg.ensure_output_dir()
    write_json(out / "cv_summary.json", cv.summary(), cfg.provenance())
    trace = path.trace() if cfg.method == "ssgl" else None
    _finish(cfg, out, design, fit, {"cv_grid": cv.table}, trace)
    return 0


def _gam_pipeline(cfg: RunConfig, interactions: Optional[InteractionSpec]) -> int:
    frame, y = _load_covariates(cfg.input_path, cfg.response)
    names = list(frame.columns)
    X = frame.to_numpy()
    recipe = GamRecipe(spec=BasisSpec(df=cfg.df_set[0], kind=cfg.basis_kind),
                       interactions=interactions, names=names)
    config = _solver_config(cfg)
    cv = kfold_cv(X, y, recipe, config, df_set=cfg.df_set, K=cfg.k_folds, seed=cfg.seed,
                  method=cfg.method, rule=_rule(cfg), ladder=_group_lasso_ladder(cfg),
                  threads=cfg.threads)
    design, fit, path = refit(X, y, recipe, config, cv.chosen_penalty, cv.chosen_df, cfg.method)
    out = cfg.ensure_output_dir()
    write_json(out / "cv_summary.json", cv.summary(), cfg.provenance())
    tables = {"cv_grid": cv.table, "curves": predict_effects(fit, design)}
    if interactions is not None:
        pairs = [gid for gid in design.design.group_ids if "*" in gid]
        tables["pairs"] = pd.DataFrame({"pair": pairs, "selected": [p in fit.selected_groups for p in pairs]})
    trace = path.trace() if cfg.method == "ssgl" else None
    _finish(cfg, out, design, fit, tables, trace)
    logger.info("Selected groups: %s", fit.selected_groups)
    return 0


def cmd_gam(cfg: RunConfig) -> int:
    return _gam_pipeline(cfg, None)


def cmd_interact(cfg: RunConfig) -> int:
    return _gam_pipeline(cfg, InteractionSpec(d_star=cfg.d_star, hierarchy=cfg.hierarchy))


def cmd_debias(cfg: RunConfig) -> int:
    X, y, recipe = load_grouped_csv(cfg.input_path, cfg.response, cfg.group_map_path, cfg.unpenalized)
    design = recipe.build(X, y)
    path = fit_path(design, _solver_config(cfg))
    fit = path.final
    table = run_debiased_inference(fit, design, alpha=cfg.alpha, threads=cfg.threads)
    trace = path.trace()
    _finish(cfg.model_copy(update={"method": "ssgl"}), cfg.ensure_output_dir(), design, fit,
            {"intervals": table, "trace": trace}, trace)
    return 0


def _load_model(path: str):
    document = read_json(Path(path))
    data = document["design"]
    design = GamDesign.from_dict(data) if data["kind"] == "gam" else PreparedDesign.from_dict(data)
    beta = np.asarray(document["coefficients_ortho"], dtype=float)
    return document, design, beta


def cmd_predict(cfg: RunConfig) -> int:
    document, design, beta = _load_model(cfg.model_path)
    frame = read_numeric_csv(cfg.input_path)
    if isinstance(design, GamDesign):
        needed = design.covariate_names
    else:
        needed = design.column_names
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DimensionMismatch(f"{cfg.input_path}: missing columns {missing}")
    pred = design.predict(frame[needed].to_numpy(), beta)
    out = cfg.ensure_output_dir()
    provenance = cfg.provenance()
    provenance["model_config_hash"] = document["provenance"]["config_hash"]
    tables = {"predictions": pd.DataFrame({"prediction": pred})}
    if cfg.grid_path and isinstance(design, GamDesign):
        grid = read_numeric_csv(cfg.grid_path)
        fit = argparse.Namespace(beta_ortho=beta)
        tables["curves"] = predict_effects(fit, design, {c: grid[c].to_numpy() for c in grid.columns})
    for name, table in tables.items():
        write_csv(out / f"{name}.csv", table, provenance)
    if cfg.xlsx:
        export_tables_to_excel(out / "predictions.xlsx", tables, provenance)
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    scenario = SimScenario(
        name=cfg.scenario, n=cfg.n, p=cfg.p, rho=cfg.rho, replicates=cfg.replicates, seed=cfg.seed,
        df_set=cfg.df_set, d_star=cfg.d_star, hierarchy=cfg.hierarchy, k_folds=cfg.k_folds,
        lambda0_ladder=cfg.lambda0_ladder, method=cfg.method, alpha=cfg.alpha,
    )
    report = run_scenario(scenario, threads=cfg.threads)
    out = cfg.ensure_output_dir()
    provenance = cfg.provenance()
    write_json(out / "sim_report.json", report.summary(), provenance)
    tables = {"sim_replicates": report.replicates}
    if report.pair_frequencies is not None:
        tables["pair_frequencies"] = report.pair_frequencies
    for name, table in tables.items():
        write_csv(out / f"{name}.csv", table, provenance)
    if cfg.xlsx:
        export_tables_to_excel(out / "sim_report.xlsx", tables, provenance)
    return 0


HANDLERS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "gam": cmd_gam,
    "interact": cmd_interact,
    "debias": cmd_debias,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = config_from_args(args)
        logger.info("Running %s (config hash %s)", cfg.command, cfg.config_hash()[:12])
        return HANDLERS[cfg.command](cfg)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        print(f"error: invalid {where}: {first['msg']}", file=sys.stderr)
        return 2
    except SsglError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # parse_list и прочие ошибки разбора аргументов
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
