"""Design-based post-stratified estimators used as the benchmark for the
model-based areal estimates.

Per stratum: sample mean and its standard error. Overall: area-weighted
mean with the post-stratified standard error; totals scale means by total
area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class StratumData:
    """Plot observations and total area of one stratum."""

    stratum: int
    area_ha: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (np.isfinite(self.area_ha) and self.area_ha > 0):
            raise ValueError(f"stratum {self.stratum}: area must be > 0")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class StratumEstimate:
    stratum: int
    area_ha: float
    n: int
    mean: float
    se: float | None       # unavailable for n = 1
    total: float
    total_se: float | None


@dataclass
class PostStratResult:
    strata: list[StratumEstimate]
    weights: np.ndarray    # A_j / sum(A)
    mean: float
    se: float
    total: float
    total_se: float
    area_ha: float
    n: int


def stratum_mean_se(d: StratumData) -> tuple[float, float | None]:
    """Sample mean and SE of the mean: sqrt(sum (y - ybar)^2 / (n (n-1))).
    A single observation yields the mean with SE unavailable."""
    if d.n == 0:
        raise ValueError(f"stratum {d.stratum} has no observations")
    mean = float(np.mean(d.values))
    if d.n == 1:
        return mean, None
    ss = float(np.sum((d.values - mean) ** 2))
    return mean, float(np.sqrt(ss / (d.n * (d.n - 1))))


def post_stratified(strata: list[StratumData]) -> PostStratResult:
    """Area-weighted combination of stratum means.

    W_j = A_j / sum(A); ybar = sum W_j ybar_j;
    s_ybar = sqrt( (1/n) ( sum_j W_j n_j s2_j
                          + sum_j (1 - W_j) (n_j / n) s2_j ) )
    with s2_j the squared stratum SE of the mean. Totals multiply means by
    the total area (per-stratum totals by the stratum area).
    """
    if not strata:
        raise ValueError("no strata supplied")
    empty = [d.stratum for d in strata if d.n < 2]
    if empty:
        raise ValueError(f"strata with fewer than 2 plots: {empty}")
    areas = np.array([d.area_ha for d in strata])
    total_area = float(areas.sum())
    weights = areas / total_area
    n = int(sum(d.n for d in strata))
    ests = []
    means = np.empty(len(strata))
    se2 = np.empty(len(strata))
    nj = np.empty(len(strata))
    for i, d in enumerate(strata):
        mean_j, se_j = stratum_mean_se(d)
        means[i] = mean_j
        se2[i] = se_j ** 2
        nj[i] = d.n
        ests.append(StratumEstimate(
            stratum=d.stratum, area_ha=d.area_ha, n=d.n, mean=mean_j,
            se=se_j, total=mean_j * d.area_ha,
            total_se=None if se_j is None else se_j * d.area_ha))
    mean = float(weights @ means)
    var = (np.sum(weights * nj * se2)
           + np.sum((1.0 - weights) * (nj / n) * se2)) / n
    se = float(np.sqrt(var))
    return PostStratResult(strata=ests, weights=weights, mean=mean, se=se,
                           total=mean * total_area, total_se=se * total_area,
                           area_ha=total_area, n=n)


def compare(model_rows, design: PostStratResult) -> list[dict]:
    """Side-by-side model vs design estimates per matching scope.

    model_rows: AreaEstimate-like objects with scope/density/total summaries.
    Scopes must match the design result's strata plus the overall row
    (scope "ALL"). Columns report differences (model - design) and the
    model-SD to design-SE ratio.
    """
    design_map = {e.stratum: e for e in design.strata}
    rows = []
    for est in model_rows:
        if est.scope == "ALL":
            d_mean, d_se = design.mean, design.se
            d_total, d_total_se = design.total, design.total_se
        elif est.scope in design_map:
            e = design_map[est.scope]
            d_mean, d_se, d_total, d_total_se = e.mean, e.se, e.total, e.total_se
        else:
            raise ValueError(f"no design-based estimate for scope {est.scope!r}")
        rows.append({
            "scope": est.scope,
            "design_density": d_mean,
            "model_density": est.density_mean,
            "density_diff": est.density_mean - d_mean,
            "design_density_se": d_se,
            "model_density_sd": est.density_sd,
            "density_sd_se_ratio": (est.density_sd / d_se
                                    if d_se not in (None, 0) else float("inf")),
            "design_total": d_total,
            "model_total": est.total_mean,
            "total_diff": est.total_mean - d_total,
            "design_total_se": d_total_se,
            "model_total_sd": est.total_sd,
        })
    missing = ({e.stratum for e in design.strata} | {"ALL"}) \
        - {r["scope"] for r in rows}
    if missing:
        raise ValueError(f"model estimates missing scopes: {sorted(missing, key=str)}")
    return rows
