"""Domain types for the two-stage model: observation records, design
matrices, priors, parameter states, and candidate-model configuration.

Stage 1 regresses the outcome (biomass density, Mg/ha) on the LiDAR
covariate with stratum-varying coefficients, stratum residual variances,
and a latent spatial effect. Stage 2 applies the same structure to the
covariate itself (mean canopy height on percent tree cover) so it can be
predicted wherever the outcome is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from forestsae.spatial import Location, CovParams, effective_range

# Uniform prior support on the effective range, in km.
RANGE_SUPPORT_KM = (1.0, 500.0)

# Inverse-Gamma shape shared by every variance prior; the scale then equals
# the prior mean.
IG_SHAPE = 2.0


@dataclass(frozen=True)
class PlotRecord:
    """Inventory plot: outcome plus covariates at one location."""

    location: Location
    y: float          # biomass density, Mg/ha
    stratum: int
    x_ch: float       # mean canopy height, m
    v_tc: float       # percent tree cover, 0-100

    def __post_init__(self):
        if not (np.isfinite(self.y) and self.y >= 0):
            raise ValueError(f"plot {self.location.id}: y must be >= 0, got {self.y}")
        _check_covariates(self.location.id, self.stratum, self.x_ch, self.v_tc)


@dataclass(frozen=True)
class LidarRecord:
    """Flight-line sample: covariates only, no outcome."""

    location: Location
    stratum: int
    x_ch: float
    v_tc: float

    def __post_init__(self):
        _check_covariates(self.location.id, self.stratum, self.x_ch, self.v_tc)


@dataclass(frozen=True)
class PredictionCell:
    """Grid cell at which the outcome is predicted and aggregated."""

    location: Location
    stratum: int
    v_tc: float
    cell_area: float  # ha

    def __post_init__(self):
        if self.stratum < 0:
            raise ValueError(f"cell {self.location.id}: negative stratum")
        if not (np.isfinite(self.v_tc) and 0 <= self.v_tc <= 100):
            raise ValueError(f"cell {self.location.id}: v_tc out of [0, 100]")
        if not (np.isfinite(self.cell_area) and self.cell_area > 0):
            raise ValueError(f"cell {self.location.id}: cell_area must be > 0")


def _check_covariates(loc_id, stratum, x_ch, v_tc):
    if stratum < 0:
        raise ValueError(f"record {loc_id}: negative stratum")
    if not (np.isfinite(x_ch) and x_ch >= 0):
        raise ValueError(f"record {loc_id}: x_ch must be >= 0, got {x_ch}")
    if not (np.isfinite(v_tc) and 0 <= v_tc <= 100):
        raise ValueError(f"record {loc_id}: v_tc out of [0, 100], got {v_tc}")


@dataclass
class DesignMatrices:
    """Regression blocks: global intercept column, stratum indicator, global
    slopes X, and the stratum-expanded X_tilde whose row i is nonzero only in
    the p-column block of row i's stratum."""

    ones: np.ndarray              # (n, 1)
    strata_indicator: np.ndarray  # (n, q)
    X: np.ndarray                 # (n, p)
    X_tilde: np.ndarray           # (n, p*q)

    @property
    def n(self) -> int:
        return self.ones.shape[0]

    @property
    def q(self) -> int:
        return self.strata_indicator.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def build_design(covariates, strata, q: int) -> DesignMatrices:
    """Assemble DesignMatrices from an (n, p) covariate array and an (n,)
    stratum index vector with values in 0..q-1."""
    X = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if X.shape[0] == 1 and np.asarray(strata).size != 1:
        X = X.T
    strata = np.asarray(strata, dtype=np.int64)
    n, p = X.shape
    if n == 0:
        raise ValueError("no records")
    if strata.shape != (n,):
        raise ValueError(f"strata shape {strata.shape} != ({n},)")
    bad = np.flatnonzero((strata < 0) | (strata >= q))
    if bad.size:
        listed = ", ".join(f"row {i} (stratum {strata[i]})" for i in bad[:10])
        raise ValueError(f"stratum index out of 0..{q - 1}: {listed}")
    ones = np.ones((n, 1))
    ind = np.zeros((n, q))
    ind[np.arange(n), strata] = 1.0
    xt = np.zeros((n, p * q))
    for j in range(q):
        rows = strata == j
        xt[rows, j * p:(j + 1) * p] = X[rows]
    return DesignMatrices(ones=ones, strata_indicator=ind, X=X, X_tilde=xt)


def design_for_outcome(plots: Sequence[PlotRecord], q: int) -> DesignMatrices:
    return build_design([[r.x_ch] for r in plots], [r.stratum for r in plots], q)


def design_for_covariate(records, q: int) -> DesignMatrices:
    return build_design([[r.v_tc] for r in records], [r.stratum for r in records], q)


@dataclass
class Priors:
    """Inverse-Gamma scales (shape fixed at 2, so scale = prior mean) and the
    uniform decay support induced by the 1-500 km range endpoints."""

    scale_stratum_intercept: float        # variance of stratum intercept offsets
    scale_stratum_slope: np.ndarray       # (p,) variance of stratum slope offsets
    scale_noise: np.ndarray               # (q,) residual variance per stratum
    scale_spatial: float                  # latent process variance
    phi_lower: float
    phi_upper: float
    ig_shape: float = IG_SHAPE
    decay_prior: str = "rate"             # "rate": uniform on phi; "range": uniform on -log(.05)/phi

    def __post_init__(self):
        self.scale_stratum_slope = np.atleast_1d(
            np.asarray(self.scale_stratum_slope, dtype=np.float64))
        self.scale_noise = np.atleast_1d(
            np.asarray(self.scale_noise, dtype=np.float64))
        if self.scale_stratum_intercept <= 0 or self.scale_spatial <= 0 \
                or np.any(self.scale_stratum_slope <= 0) \
                or np.any(self.scale_noise <= 0):
            raise ValueError("all prior scales must be positive")
        if not (0 < self.phi_lower < self.phi_upper):
            raise ValueError("need 0 < phi_lower < phi_upper")
        if self.decay_prior not in ("rate", "range"):
            raise ValueError(f"unknown decay_prior {self.decay_prior!r}")

    @property
    def scale_noise_pooled(self) -> float:
        return float(np.mean(self.scale_noise))


def default_phi_bounds() -> tuple[float, float]:
    """Decay support mapped from the 1-500 km effective-range endpoints."""
    lo_range, hi_range = RANGE_SUPPORT_KM
    return (-np.log(0.05) / hi_range, -np.log(0.05) / lo_range)


@dataclass
class EdaSummary:
    """Exploratory estimates that set the prior scales."""

    residual_variance: float
    coefficient_spread: np.ndarray | None = None  # (p+1,) stratum OLS coef variance
    spatial_variance: float | None = None


def default_priors(eda: EdaSummary, q: int, p: int = 1) -> Priors:
    """Center every variance prior on its EDA estimate (IG(2, s) has mean s)."""
    if not (np.isfinite(eda.residual_variance) and eda.residual_variance > 0):
        raise ValueError(f"EDA residual variance must be positive, "
                         f"got {eda.residual_variance}")
    if eda.coefficient_spread is not None:
        spread = np.asarray(eda.coefficient_spread, dtype=np.float64)
        if spread.shape != (p + 1,) or np.any(spread <= 0):
            raise ValueError("coefficient_spread must be (p+1,) positive")
        s0, sk = float(spread[0]), spread[1:]
    else:
        s0, sk = eda.residual_variance, np.full(p, eda.residual_variance)
    sw = eda.spatial_variance if eda.spatial_variance is not None \
        else eda.residual_variance
    lo, hi = default_phi_bounds()
    return Priors(scale_stratum_intercept=s0,
                  scale_stratum_slope=sk,
                  scale_noise=np.full(q, eda.residual_variance),
                  scale_spatial=float(sw),
                  phi_lower=lo, phi_upper=hi)


@dataclass
class OutcomeParamState:
    """One draw of every outcome-stage parameter."""

    beta0: float
    beta_tilde0: np.ndarray   # (q,)
    beta: np.ndarray          # (p,)
    beta_tilde: np.ndarray    # (p*q,)
    sigma2: np.ndarray        # (p+1,) stratum-effect variances
    w: np.ndarray             # (n,)
    theta_w: CovParams
    tau2: np.ndarray          # (q,) or (1,) residual variances


@dataclass
class CovariateParamState:
    """One draw of every covariate-stage parameter."""

    alpha0: float
    alpha_tilde0: np.ndarray  # (q,)
    alpha: np.ndarray         # (r,)
    alpha_tilde: np.ndarray   # (r*q,)
    nu2: np.ndarray           # (r+1,)
    u: np.ndarray             # (n_s,)
    theta_u: CovParams
    gamma2: np.ndarray        # (q,) or (1,)


def compute_eda(z, covariates, strata=None) -> EdaSummary:
    """Pooled-OLS residual variance, plus the spread of stratum-wise OLS
    coefficients when at least two strata have enough records to fit."""
    z = np.asarray(z, dtype=np.float64)
    X = np.asarray(covariates, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    D = np.hstack([np.ones((n, 1)), X])
    coef, *_ = np.linalg.lstsq(D, z, rcond=None)
    resid = z - D @ coef
    dof = max(n - (p + 1), 1)
    resid_var = float(resid @ resid) / dof
    spread = None
    if strata is not None:
        strata = np.asarray(strata, dtype=np.int64)
        per = []
        for j in np.unique(strata):
            rows = strata == j
            if rows.sum() >= p + 2:
                cj, *_ = np.linalg.lstsq(D[rows], z[rows], rcond=None)
                per.append(cj)
        if len(per) >= 2:
            spread = np.var(np.asarray(per), axis=0, ddof=1)
            if np.all(spread > 0):
                spread = spread
            else:
                spread = None
    return EdaSummary(residual_variance=resid_var, coefficient_spread=spread)


_SUBMODEL_FLAGS = {
    # variant: (stratum_coefficients, stratum_variances, spatial_effect, include_x)
    "SM1": (False, False, False, True),
    "SM2": (False, True, False, True),
    "SM3": (True, False, False, True),
    "SM4": (True, True, False, True),
    "FULL": (True, True, True, True),
    "FULL_NO_X": (True, True, True, False),
}


@dataclass(frozen=True)
class SubmodelSpec:
    """Candidate-model switchboard.

    SM1 pools coefficients and residual variance, SM2 adds stratum
    variances, SM3 adds stratum coefficients instead, SM4 has both, FULL
    adds the latent spatial effect, and FULL_NO_X drops the covariate from
    the full model.
    """

    variant: str

    def __post_init__(self):
        if self.variant not in _SUBMODEL_FLAGS:
            raise ValueError(f"unknown submodel {self.variant!r}; "
                             f"choose one of {sorted(_SUBMODEL_FLAGS)}")

    @property
    def stratum_coefficients(self) -> bool:
        return _SUBMODEL_FLAGS[self.variant][0]

    @property
    def stratum_variances(self) -> bool:
        return _SUBMODEL_FLAGS[self.variant][1]

    @property
    def spatial_effect(self) -> bool:
        return _SUBMODEL_FLAGS[self.variant][2]

    @property
    def include_x(self) -> bool:
        return _SUBMODEL_FLAGS[self.variant][3]


ALL_SUBMODELS = tuple(SubmodelSpec(v) for v in _SUBMODEL_FLAGS)
