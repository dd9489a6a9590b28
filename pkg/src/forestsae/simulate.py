"""Synthetic data from the full two-stage generative model.

Strata come from a Voronoi partition over random seed points, percent tree
cover from a logistic-transformed smooth random field, the latent spatial
effects from the exact dense Gaussian process (small point sets) or a
sequential nearest-neighbor draw (large ones), and both responses from the
stage equations. Everything needed to score a fit against the truth is
recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from forestsae import _kernels
from forestsae.model import LidarRecord, PlotRecord, PredictionCell
from forestsae.predict import extend_neighbor_graph
from forestsae.sampler import ChainSamples
from forestsae.spatial import DENSE_GUARD, Location, as_coords, dense_covariance, CovParams


def _default_outcome_truth(q: int) -> dict:
    return {"beta0": 30.0, "beta": np.array([8.0]),
            "sigma2": np.array([16.0, 4.0]),
            "tau2": np.linspace(60.0, 180.0, q),
            "sigma2_w": 20.0, "phi_w": 0.08}


def _default_covariate_truth(q: int) -> dict:
    return {"alpha0": 8.0, "alpha": np.array([0.08]),
            "nu2": np.array([1.0, 0.001]),
            "gamma2": np.linspace(0.5, 2.0, q),
            "nu2_u": 2.0, "phi_u": 0.6}


@dataclass
class SimScenario:
    """Synthetic-domain settings and true parameter values.

    LiDAR samples run along vertical flight lines; plots are uniform over
    the domain; prediction cells sit on a regular grid. Stratum membership
    is the nearest of n_patches seed points, mapped round-robin onto the q
    strata.
    """

    n_plots: int = 400
    n_lidar: int = 2000
    q: int = 3
    extent: tuple[float, float] = (100.0, 100.0)   # km
    grid_spacing: float = 2.0                      # km between cells
    line_spacing: float = 12.0                     # km between flight lines
    along_spacing: float = 0.25                    # km along a line
    n_patches: int = 9
    rng_seed: int = 0
    outcome_truth: dict = field(default_factory=dict)
    covariate_truth: dict = field(default_factory=dict)
    truth_at_cells: bool = True
    latent_method: str = "auto"  # "auto" | "dense" | "nngp"
    nngp_m: int = 15

    def __post_init__(self):
        if self.n_plots < 1 or self.n_lidar < 1 or self.q < 1:
            raise ValueError("counts and q must be >= 1")
        self.outcome_truth = {**_default_outcome_truth(self.q),
                              **self.outcome_truth}
        self.covariate_truth = {**_default_covariate_truth(self.q),
                                **self.covariate_truth}
        for truth in (self.outcome_truth, self.covariate_truth):
            for key, v in truth.items():
                arr = np.asarray(v, dtype=np.float64)
                truth[key] = float(arr) if arr.ndim == 0 else arr
                # zero variances are allowed: they collapse that component
                if key not in ("beta0", "alpha0") and np.any(arr < 0):
                    raise ValueError(f"truth value {key} must be >= 0")
        if self.latent_method not in ("auto", "dense", "nngp"):
            raise ValueError(f"unknown latent_method {self.latent_method!r}")


@dataclass
class SimTruth:
    """Generating parameters (hyperparameters plus the drawn stratum
    effects) and held-out values at the prediction cells."""

    outcome: dict
    covariate: dict
    x_cells: np.ndarray | None
    y_cells: np.ndarray | None
    w_cells: np.ndarray | None
    u_cells: np.ndarray | None
    stratum_seeds: np.ndarray
    rng_seed: int


def _smooth_field(coords, rng, n_features: int = 60, length_km: float = 25.0):
    """Random-Fourier-feature draw of a smooth stationary field (a Gaussian
    process sampler that stays O(n) for large grids)."""
    freqs = rng.normal(0.0, 1.0 / length_km, size=(n_features, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    amps = rng.normal(0.0, np.sqrt(2.0 / n_features), size=n_features)
    return np.cos(coords @ freqs.T * 2.0 * np.pi + phases) @ amps


def _draw_latent(coords, sigma2, phi, rng, method, guard, m):
    n = coords.shape[0]
    if sigma2 == 0.0:
        return np.zeros(n)
    use_dense = method == "dense" or (method == "auto" and n <= guard)
    if use_dense:
        if n > guard:
            raise ValueError(f"dense latent simulation requested for n={n} > "
                             f"{guard}; use latent_method='nngp'")
        cov = dense_covariance(coords, CovParams(sigma2, phi))
        return np.linalg.cholesky(cov) @ rng.standard_normal(n)
    # sequential NNGP draw: no observed set, each point conditions on
    # earlier points only
    ext = extend_neighbor_graph(np.empty((0, 2)), coords, m,
                                mode="sequential")
    u_all = np.empty(n)
    z = rng.standard_normal(n)
    _kernels.latent_predict_draw(ext.all_coords, 0, ext.nbr_idx, ext.nbr_cnt,
                                 u_all, float(sigma2), float(phi), z)
    return u_all


def simulate(scenario: SimScenario):
    """Generate (plots, lidar_records, cells, truth) under the two-stage
    generative law. Deterministic given scenario.rng_seed."""
    rng = np.random.default_rng(scenario.rng_seed)
    ex, ey = scenario.extent
    q = scenario.q

    seeds = rng.uniform([0, 0], [ex, ey], size=(scenario.n_patches, 2))
    patch_stratum = np.arange(scenario.n_patches) % q
    seed_tree = cKDTree(seeds)

    plot_xy = rng.uniform([0, 0], [ex, ey], size=(scenario.n_plots, 2))
    lines = np.arange(scenario.line_spacing / 2, ex, scenario.line_spacing)
    along = np.arange(scenario.along_spacing / 2, ey, scenario.along_spacing)
    line_xy = np.array([(lx, ay) for lx in lines for ay in along])
    take = rng.choice(line_xy.shape[0], size=min(scenario.n_lidar,
                                                 line_xy.shape[0]),
                      replace=False)
    lidar_xy = line_xy[np.sort(take)]
    gx = np.arange(scenario.grid_spacing / 2, ex, scenario.grid_spacing)
    gy = np.arange(scenario.grid_spacing / 2, ey, scenario.grid_spacing)
    cell_xy = np.array([(a, b) for a in gx for b in gy])

    def stratum_of(xy):
        return patch_stratum[seed_tree.query(xy)[1]]

    plot_s, lidar_s, cell_s = (stratum_of(a) for a in
                               (plot_xy, lidar_xy, cell_xy))

    all_xy = np.vstack([plot_xy, lidar_xy, cell_xy])
    n_p, n_s, n_c = plot_xy.shape[0], lidar_xy.shape[0], cell_xy.shape[0]
    vf = _smooth_field(all_xy, rng)
    v_all = 100.0 / (1.0 + np.exp(-1.5 * vf))

    ct = dict(scenario.covariate_truth)
    ot = dict(scenario.outcome_truth)
    ct["alpha_tilde0"] = rng.normal(0.0, np.sqrt(ct["nu2"][0]), q)
    ct["alpha_tilde"] = rng.normal(0.0, np.sqrt(ct["nu2"][1]), q)
    ot["beta_tilde0"] = rng.normal(0.0, np.sqrt(ot["sigma2"][0]), q)
    ot["beta_tilde"] = rng.normal(0.0, np.sqrt(ot["sigma2"][1]), q)

    # latent fields: u spans every location; w spans plots and (optionally)
    # the cells that carry held-out truth
    u_n = all_xy.shape[0] if scenario.truth_at_cells else n_p + n_s
    u = _draw_latent(all_xy[:u_n], ct["nu2_u"], ct["phi_u"], rng,
                     scenario.latent_method, DENSE_GUARD, scenario.nngp_m)
    w_xy = np.vstack([plot_xy, cell_xy]) if scenario.truth_at_cells else plot_xy
    w = _draw_latent(w_xy, ot["sigma2_w"], ot["phi_w"], rng,
                     scenario.latent_method, DENSE_GUARD, scenario.nngp_m)

    strata_u = np.concatenate([plot_s, lidar_s, cell_s])[:u_n]
    x_all = (ct["alpha0"] + ct["alpha_tilde0"][strata_u]
             + (ct["alpha"][0] + ct["alpha_tilde"][strata_u]) * v_all[:u_n]
             + u
             + rng.normal(0.0, np.sqrt(ct["gamma2"][strata_u])))

    y_strata = np.concatenate([plot_s, cell_s]) if scenario.truth_at_cells \
        else plot_s
    x_for_y = np.concatenate([x_all[:n_p], x_all[n_p + n_s:]]) \
        if scenario.truth_at_cells else x_all[:n_p]
    y = (ot["beta0"] + ot["beta_tilde0"][y_strata]
         + (ot["beta"][0] + ot["beta_tilde"][y_strata]) * x_for_y
         + w
         + rng.normal(0.0, np.sqrt(ot["tau2"][y_strata])))

    if np.any(y[:n_p] < 0) or np.any(x_all[:n_p + n_s] < 0):
        raise ValueError(
            "simulation produced negative observed values; raise the "
            "intercepts or shrink the variances in the scenario truth")

    cell_area = scenario.grid_spacing ** 2 * 100.0  # km^2 -> ha
    plots = [PlotRecord(Location(float(xy[0]), float(xy[1]), i), float(y[i]),
                        int(plot_s[i]), float(x_all[i]), float(v_all[i]))
             for i, xy in enumerate(plot_xy)]
    lidar = [LidarRecord(Location(float(xy[0]), float(xy[1]), n_p + i),
                         int(lidar_s[i]), float(x_all[n_p + i]),
                         float(v_all[n_p + i]))
             for i, xy in enumerate(lidar_xy)]
    cells = [PredictionCell(Location(float(xy[0]), float(xy[1]),
                                     n_p + n_s + i),
                            int(cell_s[i]), float(v_all[n_p + n_s + i]),
                            cell_area)
             for i, xy in enumerate(cell_xy)]

    truth = SimTruth(
        outcome=ot, covariate=ct,
        x_cells=x_all[n_p + n_s:].copy() if scenario.truth_at_cells else None,
        y_cells=y[n_p:].copy() if scenario.truth_at_cells else None,
        w_cells=w[n_p:].copy() if scenario.truth_at_cells else None,
        u_cells=u[n_p + n_s:].copy() if scenario.truth_at_cells else None,
        stratum_seeds=seeds, rng_seed=scenario.rng_seed)
    return plots, lidar, cells, truth


def recovery_score(truth: dict, chain: ChainSamples) -> list[dict]:
    """Per-parameter posterior mean bias and 95% interval coverage against
    the generating values. truth keys must match the chain's parameter
    names (stratum effects included when present)."""
    rows = []
    for name, value in truth.items():
        if name not in chain.params:
            if name in ("beta_tilde", "alpha_tilde", "beta_tilde0",
                        "alpha_tilde0"):
                continue
            raise ValueError(f"truth parameter {name!r} not sampled by the "
                             f"chain ({chain.names()})")
        draws = chain.params[name]
        vals = np.atleast_1d(np.asarray(value, dtype=np.float64))
        cols = np.atleast_2d(draws.T).T if draws.ndim == 1 else draws
        if cols.shape[1] != vals.shape[0]:
            raise ValueError(f"{name}: truth has {vals.shape[0]} entries, "
                             f"chain has {cols.shape[1]}")
        for j, true_val in enumerate(vals):
            col = cols[:, j]
            lo, hi = np.quantile(col, [0.025, 0.975])
            mean = float(np.mean(col))
            label = name if vals.shape[0] == 1 else f"{name}[{j}]"
            rows.append({
                "parameter": label, "truth": float(true_val), "mean": mean,
                "bias": mean - float(true_val),
                "rel_bias": (mean - float(true_val)) / abs(true_val)
                if true_val != 0 else float("nan"),
                "q2.5": float(lo), "q97.5": float(hi),
                "covered": bool(lo <= true_val <= hi),
            })
    return rows
