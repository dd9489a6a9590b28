"""Command-line workflow: simulate -> fit -> select -> predict -> estimate
-> survey -> compare -> stability.

Every command takes a JSON config (--config), writes CSV tables stamped
with the config fingerprint into the output directory, and exits non-zero
with a JSON error record on stderr when something fails.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from forestsae import io
from forestsae.model import (SubmodelSpec, ALL_SUBMODELS, Priors,
                             compute_eda, default_priors)
from forestsae.predict import (aggregate_by_stratum, grid_stability_sweep,
                               predict_two_stage)
from forestsae.sampler import (ChainSamples, McmcConfig, StageData,
                               gelman_rubin, loglik_at_posterior_mean,
                               run_chain)
from forestsae.selection import FitReport, dic, lppd, rank_models, rmse, waic
from forestsae.simulate import SimScenario, simulate
from forestsae.survey import StratumData, compare, post_stratified


def _fail_json(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - boundary of the CLI
            record = {"error": type(exc).__name__, "message": str(exc)}
            click.echo(json.dumps(record), err=True)
            sys.exit(1)
    return wrapper


def _common(fn):
    fn = click.option("--threads", type=int, default=None,
                      help="numba thread count")(fn)
    fn = click.option("--output", type=click.Path(), default=None,
                      help="override the config output directory")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the config seed")(fn)
    fn = click.option("--config", required=True,
                      type=click.Path(exists=True, dir_okay=False))(fn)
    return fn


def _setup(config, seed, output, threads) -> io.RunConfig:
    cfg = io.RunConfig.from_file(config).resolve(Path(config).parent)
    if seed is not None:
        cfg.seed = seed
        cfg.raw["seed"] = seed
    if output is not None:
        cfg.output = output
        cfg.raw["output"] = output
    if threads:
        import numba
        numba.set_num_threads(threads)
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    return cfg


@click.group()
def main():
    """Two-stage hierarchical spatial model for biomass density and totals."""


def _infer_q(cfg, *record_sets):
    if cfg.n_strata is not None:
        return cfg.n_strata
    top = max(r.stratum for records in record_sets for r in records
              if records)
    return int(top) + 1


def _priors_for(data: StageData, overrides: dict) -> Priors:
    eda = compute_eda(data.z, data.covariates, data.strata)
    base = default_priors(eda, data.q, data.p)
    if overrides:
        fields = {k: getattr(base, k) for k in
                  ("scale_stratum_intercept", "scale_stratum_slope",
                   "scale_noise", "scale_spatial", "phi_lower", "phi_upper",
                   "ig_shape", "decay_prior")}
        unknown = set(overrides) - set(fields)
        if unknown:
            raise ValueError(f"unknown prior overrides: {sorted(unknown)}")
        fields.update(overrides)
        base = Priors(**fields)
    return base


def _mcmc_config(cfg) -> McmcConfig:
    kwargs = dict(cfg.mcmc)
    kwargs.pop("rng_seed", None)
    return McmcConfig(rng_seed=cfg.seed, **kwargs)


def _fit_stages(cfg):
    plots = io.load_plots(cfg.plots, cfg.n_strata)
    lidar = io.load_lidar(cfg.lidar, cfg.n_strata) if cfg.lidar else None
    q = _infer_q(cfg, plots, lidar or [])
    mcmc = _mcmc_config(cfg)
    fp = cfg.fingerprint()
    out_data = StageData.from_plots(plots, q)
    out_chain = run_chain(SubmodelSpec(cfg.model), out_data,
                          _priors_for(out_data, cfg.priors.get("outcome", {})),
                          mcmc, flavor="outcome", m=cfg.neighbors,
                          fingerprint=fp)
    cov_chain = cov_data = None
    if lidar:
        cov_data = StageData.from_lidar(lidar, q)
        cov_chain = run_chain(
            SubmodelSpec("FULL"), cov_data,
            _priors_for(cov_data, cfg.priors.get("covariate", {})),
            mcmc, flavor="covariate", m=cfg.neighbors, fingerprint=fp)
    return plots, lidar, out_data, out_chain, cov_data, cov_chain


@main.command("fit")
@_common
@_fail_json
def cmd_fit(config, seed, output, threads):
    """Fit the outcome model on plots (and the covariate model on LiDAR
    records when configured); write per-chain checkpoints and the
    parameter summary table."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    _, lidar, _, out_chain, _, cov_chain = _fit_stages(cfg)
    rows = []
    for stage, chain in (("outcome", out_chain), ("covariate", cov_chain)):
        if chain is None:
            continue
        for c, chunk in enumerate(chain.split_chains()):
            chunk.save(out_dir / f"{stage}_chain_{c}.pkl")
        rhat = gelman_rubin(chain) if chain.n_chains >= 2 else None
        for row in chain.summary(rhat=rhat):
            rows.append([stage, row["parameter"], row["mean"], row["sd"],
                         row["q2.5"], row["q97.5"],
                         row.get("rhat", float("nan"))])
    io.write_table(out_dir / "params_summary.csv",
                   ["stage", "parameter", "mean", "sd", "q2.5", "q97.5",
                    "rhat"], rows, cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'params_summary.csv'}")


@main.command("select")
@_common
@_fail_json
def cmd_select(config, seed, output, threads):
    """Fit every candidate model and write the fit-criteria table."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    plots = io.load_plots(cfg.plots, cfg.n_strata)
    q = _infer_q(cfg, plots)
    data = StageData.from_plots(plots, q)
    mcmc = _mcmc_config(cfg)
    reports = []
    for spec in ALL_SUBMODELS:
        chain = run_chain(spec, data,
                          _priors_for(data, cfg.priors.get("outcome", {})),
                          mcmc, flavor="outcome", m=cfg.neighbors)
        ll = chain.loglik
        w1, w2, p1, p2 = waic(ll)
        d, p_d = dic(ll, loglik_at_posterior_mean(chain, data))
        reports.append(FitReport(
            model=spec.variant, dic=d, p_d=p_d, waic1=w1, waic2=w2, p1=p1,
            p2=p2, lppd=lppd(ll),
            rmse=rmse(chain.fitted.mean(axis=0), data.z)))
    ranking = rank_models(reports)
    rows = [[r.model, r.dic, r.p_d, r.waic1, r.waic2, r.p1, r.p2, r.lppd,
             r.rmse, ranking["dic"].index(r.model) + 1]
            for r in reports]
    io.write_table(out_dir / "selection.csv",
                   ["model", "dic", "p_d", "waic1", "waic2", "p1", "p2",
                    "lppd", "rmse", "dic_rank"], rows, cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'selection.csv'}")


def _load_stage_chain(out_dir: Path, stage: str) -> ChainSamples:
    paths = sorted(out_dir.glob(f"{stage}_chain_*.pkl"))
    if not paths:
        raise FileNotFoundError(f"no {stage} checkpoints under {out_dir}; "
                                f"run `fit` first")
    return ChainSamples.merge([ChainSamples.load(p) for p in paths])


@main.command("predict")
@_common
@_fail_json
def cmd_predict(config, seed, output, threads):
    """Two-stage posterior prediction on the cell grid; writes per-cell
    summaries and the draw matrices consumed by estimate/stability."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    cells = io.load_cells(cfg.cells, cfg.n_strata)
    plots = io.load_plots(cfg.plots, cfg.n_strata)
    lidar = io.load_lidar(cfg.lidar, cfg.n_strata)
    out_chain = _load_stage_chain(out_dir, "outcome")
    cov_chain = _load_stage_chain(out_dir, "covariate")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    ps = predict_two_stage(
        cells, out_chain, cov_chain,
        [[r.location.x, r.location.y] for r in plots],
        [[r.location.x, r.location.y] for r in lidar],
        mode=cfg.prediction_mode, m=cfg.neighbors, rng=rng,
        allow_novel_strata=cfg.allow_novel_strata)
    with open(out_dir / "draws.pkl", "wb") as fh:
        import pickle
        pickle.dump({"x": ps.x, "y": ps.y, "cell_ids": ps.cell_ids,
                     "fingerprint": cfg.fingerprint()}, fh, protocol=4)
    rows = []
    for j, c in enumerate(cells):
        xq = np.quantile(ps.x[:, j], [0.025, 0.975])
        yq = np.quantile(ps.y[:, j], [0.025, 0.975])
        rows.append([c.location.id, c.location.x, c.location.y, c.stratum,
                     float(ps.x[:, j].mean()), float(ps.x[:, j].std(ddof=1)),
                     float(xq[0]), float(xq[1]),
                     float(ps.y[:, j].mean()), float(ps.y[:, j].std(ddof=1)),
                     float(yq[0]), float(yq[1])])
    io.write_table(out_dir / "predictions.csv",
                   ["id", "x_km", "y_km", "stratum", "x_mean", "x_sd",
                    "x_q2.5", "x_q97.5", "y_mean", "y_sd", "y_q2.5",
                    "y_q97.5"], rows, cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'predictions.csv'}")


def _load_draws(out_dir: Path):
    import pickle
    path = out_dir / "draws.pkl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `predict` first")
    with open(path, "rb") as fh:
        return pickle.load(fh)


def _estimate_rows(cells, y_draws):
    ests = aggregate_by_stratum(cells, y_draws)
    rows = [[e.scope, e.n_cells, e.area_ha, e.density_mean, e.density_sd,
             e.density_ci95[0], e.density_ci95[1], e.total_mean, e.total_sd,
             e.total_ci95[0], e.total_ci95[1], e.negative_fraction]
            for e in ests]
    return ests, rows


@main.command("estimate")
@_common
@_fail_json
def cmd_estimate(config, seed, output, threads):
    """Aggregate outcome draws into per-stratum and overall density/total
    estimates."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    cells = io.load_cells(cfg.cells, cfg.n_strata)
    draws = _load_draws(out_dir)
    _, rows = _estimate_rows(cells, draws["y"])
    io.write_table(out_dir / "estimates.csv",
                   ["scope", "n_cells", "area_ha", "density_mean",
                    "density_sd", "density_q2.5", "density_q97.5",
                    "total_mean", "total_sd", "total_q2.5", "total_q97.5",
                    "negative_fraction"], rows, cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'estimates.csv'}")


def _survey_result(plots, cells):
    areas = {}
    for c in cells:
        areas[c.stratum] = areas.get(c.stratum, 0.0) + c.cell_area
    strata = []
    for j in sorted(areas):
        values = [p.y for p in plots if p.stratum == j]
        strata.append(StratumData(stratum=j, area_ha=areas[j], values=values))
    return post_stratified(strata)


@main.command("survey")
@_common
@_fail_json
def cmd_survey(config, seed, output, threads):
    """Design-based post-stratified estimates from the plots, with stratum
    areas taken from the cell grid."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    plots = io.load_plots(cfg.plots, cfg.n_strata)
    cells = io.load_cells(cfg.cells, cfg.n_strata)
    res = _survey_result(plots, cells)
    rows = [[e.stratum, e.area_ha, e.n, e.mean, e.se, e.total, e.total_se]
            for e in res.strata]
    rows.append(["ALL", res.area_ha, res.n, res.mean, res.se, res.total,
                 res.total_se])
    io.write_table(out_dir / "survey.csv",
                   ["stratum", "area_ha", "n", "mean", "se", "total",
                    "total_se"], rows, cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'survey.csv'}")


@main.command("compare")
@_common
@_fail_json
def cmd_compare(config, seed, output, threads):
    """Model-based vs design-based side-by-side table."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    plots = io.load_plots(cfg.plots, cfg.n_strata)
    cells = io.load_cells(cfg.cells, cfg.n_strata)
    draws = _load_draws(out_dir)
    ests, _ = _estimate_rows(cells, draws["y"])
    res = _survey_result(plots, cells)
    rows = compare(ests, res)
    io.write_table(out_dir / "comparison.csv", list(rows[0].keys()),
                   [list(r.values()) for r in rows], cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'comparison.csv'}")


@main.command("stability")
@_common
@_fail_json
def cmd_stability(config, seed, output, threads):
    """Areal-estimate stability across thinned prediction grids."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    cells = io.load_cells(cfg.cells, cfg.n_strata)
    draws = _load_draws(out_dir)
    rows = grid_stability_sweep(cells, draws["y"], cfg.stability_fractions)
    io.write_table(out_dir / "stability.csv",
                   ["fraction", "stride", "n_cells", "ha_per_cell",
                    "density_mean", "density_sd"],
                   [[r["fraction"], r["stride"], r["n_cells"],
                     r["ha_per_cell"], r["density_mean"], r["density_sd"]]
                    for r in rows], cfg.fingerprint())
    click.echo(f"wrote {out_dir / 'stability.csv'}")


@main.command("simulate")
@_common
@_fail_json
def cmd_simulate(config, seed, output, threads):
    """Generate a synthetic dataset (plots, LiDAR records, cells, truth)."""
    cfg = _setup(config, seed, output, threads)
    out_dir = Path(cfg.output)
    scenario = SimScenario(**{**cfg.simulate, "rng_seed": cfg.seed})
    plots, lidar, cells, truth = simulate(scenario)
    io.write_plots(out_dir / "plots.csv", plots)
    io.write_lidar(out_dir / "lidar.csv", lidar)
    io.write_cells(out_dir / "cells.csv", cells)
    doc = {
        "rng_seed": truth.rng_seed,
        "outcome": {k: np.asarray(v).tolist() for k, v in truth.outcome.items()},
        "covariate": {k: np.asarray(v).tolist()
                      for k, v in truth.covariate.items()},
        "stratum_seeds": truth.stratum_seeds.tolist(),
    }
    if truth.y_cells is not None:
        doc["x_cells"] = truth.x_cells.tolist()
        doc["y_cells"] = truth.y_cells.tolist()
    with open(out_dir / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    click.echo(f"wrote {out_dir / 'plots.csv'} ({len(plots)} plots, "
               f"{len(lidar)} lidar records, {len(cells)} cells)")


if __name__ == "__main__":
    main()
