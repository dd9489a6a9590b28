"""Posterior predictive inference at unobserved locations and areal
aggregation.

The covariate stage is predicted first: for each retained draw, the latent
field is extended to the prediction cells through its nearest-neighbor
conditionals, then the covariate value is composed from that draw's
coefficients and noise. The outcome stage repeats the recipe conditioned on
the per-draw covariate values, so covariate uncertainty propagates draw by
draw. Cell means of the outcome draws give areal density; density times
area gives totals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from forestsae import _kernels
from forestsae.sampler import ChainSamples
from forestsae.spatial import as_coords


@dataclass
class GraphExtension:
    """Neighbor sets for prediction locations.

    Indices point into the concatenation [observed; new]. In "independent"
    mode every neighbor is an observed location (cells are conditionally
    independent given the fit, and prediction parallelizes). In "sequential"
    mode earlier prediction locations are also candidates, reproducing the
    chained joint draw.
    """

    all_coords: np.ndarray   # (n_obs + n_new, 2)
    n_obs: int
    nbr_idx: np.ndarray      # (n_new, m)
    nbr_cnt: np.ndarray      # (n_new,)
    mode: str

    @property
    def n_new(self) -> int:
        return self.all_coords.shape[0] - self.n_obs


def extend_neighbor_graph(obs_coords, new_coords, m: int,
                          mode: str = "independent") -> GraphExtension:
    """Neighbor sets of each new location among the observed locations
    (independent mode) or the observed plus earlier new locations
    (sequential mode). Ties break toward the lower index."""
    if mode not in ("independent", "sequential"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    obs = as_coords(obs_coords) if len(obs_coords) else np.empty((0, 2))
    new = as_coords(new_coords)
    n_obs, n_new = obs.shape[0], new.shape[0]
    all_coords = np.vstack([obs, new])
    nbr_idx = np.full((n_new, m), -1, dtype=np.int64)
    nbr_cnt = np.zeros(n_new, dtype=np.int64)
    idx = obs_dist = None
    if n_obs:
        k = min(m, n_obs)
        _, idx = cKDTree(obs).query(new, k=k)
        idx = np.asarray(idx, dtype=np.int64).reshape(n_new, k)
        if mode == "independent":
            nbr_idx[:, :k] = idx
            nbr_cnt[:] = k
            return GraphExtension(all_coords, n_obs, nbr_idx, nbr_cnt, mode)
        obs_dist = np.linalg.norm(obs[idx] - new[:, None, :], axis=2)
    if mode == "independent":
        # nothing observed: every new location draws from the prior
        return GraphExtension(all_coords, n_obs, nbr_idx, nbr_cnt, mode)
    for t in range(n_new):
        cand_idx, cand_d = [], []
        if n_obs:
            cand_idx.append(idx[t])
            cand_d.append(obs_dist[t])
        if t > 0:
            cand_idx.append(np.arange(n_obs, n_obs + t, dtype=np.int64))
            cand_d.append(np.linalg.norm(new[:t] - new[t], axis=1))
        if not cand_idx:
            continue
        ci = np.concatenate(cand_idx)
        cd = np.concatenate(cand_d)
        k = min(m, ci.shape[0])
        sel = np.lexsort((ci, cd))[:k]
        nbr_idx[t, :k] = ci[sel]
        nbr_cnt[t] = k
    return GraphExtension(all_coords, n_obs, nbr_idx, nbr_cnt, mode)


def predict_latent(ext: GraphExtension, u_obs, sigma2, phi,
                   rng) -> np.ndarray:
    """Draw the latent field at the prediction locations for each retained
    draw l: u(new) = a' u(neighbors) + Normal(0, delta2), with the weights
    and conditional variance recomputed from that draw's covariance
    parameters. An empty observed set yields unconditional prior draws."""
    u_obs = np.atleast_2d(np.asarray(u_obs, dtype=np.float64))
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    L = sigma2.shape[0]
    if u_obs.shape != (L, ext.n_obs):
        raise ValueError(f"u_obs has shape {u_obs.shape}, expected "
                         f"({L}, {ext.n_obs})")
    out = np.empty((L, ext.n_new))
    u_all = np.empty(ext.all_coords.shape[0])
    for l in range(L):
        u_all[: ext.n_obs] = u_obs[l]
        z = rng.standard_normal(ext.n_new)
        _kernels.latent_predict_draw(ext.all_coords, ext.n_obs, ext.nbr_idx,
                                     ext.nbr_cnt, u_all, float(sigma2[l]),
                                     float(phi[l]), z)
        out[l] = u_all[ext.n_obs:]
    return out


def latent_conditional_moments(ext: GraphExtension, u_obs, sigma2, phi):
    """Kriging mean and variance at the new locations given one set of
    observed values (independent mode only)."""
    if ext.mode != "independent":
        raise ValueError("conditional moments require independent mode")
    u_obs = np.asarray(u_obs, dtype=np.float64)
    return _kernels.latent_predict_moments(
        ext.all_coords[: ext.n_obs], ext.all_coords[ext.n_obs:],
        ext.nbr_idx, ext.nbr_cnt, u_obs, float(sigma2), float(phi))


def _cells_arrays(cells):
    coords = np.array([[c.location.x, c.location.y] for c in cells])
    strata = np.array([c.stratum for c in cells], dtype=np.int64)
    v = np.array([c.v_tc for c in cells], dtype=np.float64)
    areas = np.array([c.cell_area for c in cells], dtype=np.float64)
    ids = np.array([c.location.id for c in cells], dtype=np.int64)
    return coords, strata, v, areas, ids


class _StratumEffects:
    """Resolves per-draw stratum effects at cells, drawing effects for
    strata unseen in training from their priors when allowed."""

    def __init__(self, cs: ChainSamples, strata, rng, allow_novel):
        novel = np.unique(strata[strata >= cs.q])
        if novel.size and not allow_novel:
            raise ValueError(
                f"strata {novel.tolist()} absent from training (q={cs.q}); "
                f"pass allow_novel_strata=True to draw their effects "
                f"from the prior")
        L = cs.L
        n_nov = int(strata.max() + 1 - cs.q) if novel.size else 0
        self.strata = strata
        self.intercept = cs.param(cs.key("intercept"))
        self.slopes = cs.params.get(cs.key("slopes"))
        self.st_int = cs.params.get(cs.key("stratum_intercepts"))
        self.st_slopes = cs.params.get(cs.key("stratum_slopes"))
        self.noise = np.atleast_2d(cs.param(cs.key("noise_var")))
        eff = cs.params.get(cs.key("effect_var"))
        if n_nov:
            if self.st_int is not None:
                self.st_int = np.hstack([
                    self.st_int,
                    np.sqrt(eff[:, 0:1]) * rng.standard_normal((L, n_nov))])
            if self.st_slopes is not None:
                self.st_slopes = np.hstack([
                    self.st_slopes,
                    np.sqrt(eff[:, 1:2]) * rng.standard_normal((L, n_nov))])
            if self.noise.shape[1] == cs.q:
                prior = 1.0 / rng.gamma(cs.priors.ig_shape,
                                        1.0 / cs.priors.scale_noise_pooled,
                                        size=(L, n_nov))
                self.noise = np.hstack([self.noise, prior])

    def mean_row(self, l: int, covariate_values: np.ndarray) -> np.ndarray:
        mu = np.full(self.strata.shape[0], self.intercept[l])
        if self.st_int is not None:
            mu += self.st_int[l][self.strata]
        if self.slopes is not None:
            coef = self.slopes[l, 0]
            if self.st_slopes is not None:
                coef = coef + self.st_slopes[l][self.strata]
            mu += coef * covariate_values
        return mu

    def sd_row(self, l: int) -> np.ndarray:
        if self.noise.shape[1] > 1:
            return np.sqrt(self.noise[l][self.strata])
        return np.full(self.strata.shape[0],
                       np.sqrt(self.noise[l, 0]))


def _stage_draws(cs, cell_coords, strata, covariate_for_draw, obs_coords, *,
                 mode, m, rng, allow_novel_strata):
    """Shared prediction loop: latent extension plus regression plus noise,
    one retained draw at a time."""
    L, nc = cs.L, cell_coords.shape[0]
    effects = _StratumEffects(cs, strata, rng, allow_novel_strata)
    out = np.empty((L, nc))
    if cs.has("latent"):
        obs = as_coords(obs_coords) if len(obs_coords) else np.empty((0, 2))
        if obs.shape[0] != cs.n:
            raise ValueError(f"obs_coords has {obs.shape[0]} rows but the "
                             f"chain was fit to {cs.n} locations")
        ext = extend_neighbor_graph(obs, cell_coords, m or cs.m, mode)
        u_obs = cs.param(cs.key("latent"))
        sigma2 = cs.param(cs.key("latent_var"))
        phi = cs.param(cs.key("decay"))
        u_all = np.empty(ext.all_coords.shape[0])
        for l in range(L):
            u_all[: ext.n_obs] = u_obs[l]
            z = rng.standard_normal(nc)
            _kernels.latent_predict_draw(ext.all_coords, ext.n_obs,
                                         ext.nbr_idx, ext.nbr_cnt, u_all,
                                         float(sigma2[l]), float(phi[l]), z)
            eps = rng.standard_normal(nc)
            out[l] = (effects.mean_row(l, covariate_for_draw(l))
                      + u_all[ext.n_obs:] + effects.sd_row(l) * eps)
    else:
        for l in range(L):
            eps = rng.standard_normal(nc)
            out[l] = (effects.mean_row(l, covariate_for_draw(l))
                      + effects.sd_row(l) * eps)
    return out


def predict_covariate(cells, cov_chain: ChainSamples, obs_coords, *,
                      mode: str = "independent", m: int | None = None,
                      rng=None,
                      allow_novel_strata: bool = False) -> np.ndarray:
    """Posterior predictive draws of the covariate at each cell, (L, n_cells).

    obs_coords must be the locations the covariate chain was fit to, in the
    same order (the stored latent draws align with them)."""
    rng = np.random.default_rng(0) if rng is None else rng
    coords, strata, v, _, _ = _cells_arrays(cells)
    return _stage_draws(cov_chain, coords, strata, lambda l: v, obs_coords,
                        mode=mode, m=m, rng=rng,
                        allow_novel_strata=allow_novel_strata)


def predict_outcome(cells, out_chain: ChainSamples, x_draws, obs_coords, *,
                    mode: str = "independent", m: int | None = None,
                    rng=None,
                    allow_novel_strata: bool = False) -> np.ndarray:
    """Posterior predictive draws of the outcome, (L, n_cells), conditioning
    draw l on covariate draw x_draws[l] so covariate uncertainty carries
    through."""
    rng = np.random.default_rng(0) if rng is None else rng
    coords, strata, _, _, _ = _cells_arrays(cells)
    x_draws = np.asarray(x_draws, dtype=np.float64)
    if x_draws.shape != (out_chain.L, len(cells)):
        raise ValueError(
            f"x_draws has shape {x_draws.shape}; expected "
            f"({out_chain.L}, {len(cells)}) aligned with the outcome chain")
    return _stage_draws(out_chain, coords, strata, lambda l: x_draws[l],
                        obs_coords, mode=mode, m=m, rng=rng,
                        allow_novel_strata=allow_novel_strata)


@dataclass
class PredictiveSamples:
    """Aligned per-cell draws: y[l] was generated with x[l]."""

    x: np.ndarray          # (L, n_cells)
    y: np.ndarray          # (L, n_cells)
    cell_ids: np.ndarray   # (n_cells,)

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"misaligned draw matrices: {self.x.shape} "
                             f"vs {self.y.shape}")


def predict_two_stage(cells, out_chain: ChainSamples,
                      cov_chain: ChainSamples, plot_coords, lidar_coords, *,
                      mode: str = "independent", m: int | None = None,
                      rng=None,
                      allow_novel_strata: bool = False) -> PredictiveSamples:
    """Covariate draws, then outcome draws conditioned on them."""
    if out_chain.L != cov_chain.L:
        raise ValueError(f"stage sample counts differ: outcome L={out_chain.L}"
                         f" vs covariate L={cov_chain.L}")
    rng = np.random.default_rng(0) if rng is None else rng
    x = predict_covariate(cells, cov_chain, lidar_coords, mode=mode, m=m,
                          rng=rng, allow_novel_strata=allow_novel_strata)
    y = predict_outcome(cells, out_chain, x, plot_coords, mode=mode, m=m,
                        rng=rng, allow_novel_strata=allow_novel_strata)
    ids = np.array([c.location.id for c in cells], dtype=np.int64)
    return PredictiveSamples(x=x, y=y, cell_ids=ids)


@dataclass
class AreaEstimate:
    """Posterior summary of areal density (per-cell mean of draws) and total
    (density times area)."""

    scope: object            # stratum id or "ALL"
    density_mean: float
    density_sd: float
    density_ci95: tuple[float, float]
    total_mean: float
    total_sd: float
    total_ci95: tuple[float, float]
    n_cells: int
    area_ha: float
    negative_fraction: float


def aggregate(cells, y_draws, scope="ALL",
              truncate_at_zero: bool = False) -> AreaEstimate:
    """Summarize areal density and total over the draws.

    Per draw l: density = mean over in-scope cells of y[l]; total = density
    times the in-scope area (ha). Negative draws are kept (the areal mean
    stays unbiased) and their fraction is reported; truncate_at_zero clips
    draws at zero first, which changes the estimand.
    """
    y_draws = np.asarray(y_draws, dtype=np.float64)
    _, strata, _, areas, _ = _cells_arrays(cells)
    if scope == "ALL":
        mask = np.ones(len(cells), dtype=bool)
    else:
        mask = strata == scope
    if not mask.any():
        raise ValueError(f"no cells in scope {scope!r}")
    sub = y_draws[:, mask]
    neg = float(np.mean(sub < 0))
    if truncate_at_zero:
        sub = np.maximum(sub, 0.0)
    area = float(areas[mask].sum())
    density = sub.mean(axis=1)
    total = density * area
    dlo, dhi = np.quantile(density, [0.025, 0.975])
    tlo, thi = np.quantile(total, [0.025, 0.975])
    ddof = 1 if density.shape[0] > 1 else 0
    return AreaEstimate(
        scope=scope,
        density_mean=float(density.mean()),
        density_sd=float(density.std(ddof=ddof)),
        density_ci95=(float(dlo), float(dhi)),
        total_mean=float(total.mean()),
        total_sd=float(total.std(ddof=ddof)),
        total_ci95=(float(tlo), float(thi)),
        n_cells=int(mask.sum()),
        area_ha=area,
        negative_fraction=neg,
    )


def aggregate_by_stratum(cells, y_draws,
                         truncate_at_zero: bool = False) -> list[AreaEstimate]:
    """Per-stratum estimates followed by the overall ("ALL") estimate."""
    strata = sorted({c.stratum for c in cells})
    out = [aggregate(cells, y_draws, scope=j, truncate_at_zero=truncate_at_zero)
           for j in strata]
    out.append(aggregate(cells, y_draws, scope="ALL",
                         truncate_at_zero=truncate_at_zero))
    return out


def grid_stability_sweep(cells, y_draws, fractions) -> list[dict]:
    """Re-aggregate on spatially thinned subgrids.

    Each requested fraction keeps roughly that share of cells by striding
    the grid in both coordinate axes, mimicking coarser prediction grids.
    Rows report the implied area per kept location and the overall density
    summaries.
    """
    y_draws = np.asarray(y_draws, dtype=np.float64)
    coords, _, _, areas, _ = _cells_arrays(cells)
    total_area = float(areas.sum())
    xs = {v: i for i, v in enumerate(np.unique(coords[:, 0]))}
    ys = {v: i for i, v in enumerate(np.unique(coords[:, 1]))}
    xr = np.array([xs[v] for v in coords[:, 0]])
    yr = np.array([ys[v] for v in coords[:, 1]])
    rows = []
    for frac in fractions:
        if frac >= 1.0:
            mask = np.ones(len(cells), dtype=bool)
            stride = 1
        else:
            stride = max(int(round(1.0 / np.sqrt(frac))), 1)
            mask = (xr % stride == 0) & (yr % stride == 0)
        if not mask.any():
            warnings.warn(f"fraction {frac} leaves no cells; skipped")
            continue
        density = y_draws[:, mask].mean(axis=1)
        ddof = 1 if density.shape[0] > 1 else 0
        rows.append({
            "fraction": float(frac),
            "stride": stride,
            "n_cells": int(mask.sum()),
            "ha_per_cell": total_area / int(mask.sum()),
            "density_mean": float(density.mean()),
            "density_sd": float(density.std(ddof=ddof)),
        })
    return rows
