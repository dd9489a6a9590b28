"""MCMC for both stage models.

Systematic-scan Gibbs with fully conjugate blocks (coefficients jointly,
then every variance), a sequential single-site update of the latent NNGP
field, and a random-walk Metropolis step on the log decay rate with
Robbins-Monro step adaptation during burn-in. The same sampler serves both
stages; parameter names are relabeled per flavor ("outcome" vs
"covariate").
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from forestsae import _kernels
from forestsae.model import (CovariateParamState, OutcomeParamState, Priors,
                             SubmodelSpec, build_design)
from forestsae.spatial import CovParams, build_neighbor_graph, as_coords

_ADAPT_BATCH = 50
_ADAPT_TARGET = 0.35
_STEP_BOUNDS = (1e-4, 10.0)

_ROLE_KEYS = {
    "outcome": {
        "intercept": "beta0", "stratum_intercepts": "beta_tilde0",
        "slopes": "beta", "stratum_slopes": "beta_tilde",
        "effect_var": "sigma2", "noise_var": "tau2",
        "latent": "w", "latent_var": "sigma2_w", "decay": "phi_w",
    },
    "covariate": {
        "intercept": "alpha0", "stratum_intercepts": "alpha_tilde0",
        "slopes": "alpha", "stratum_slopes": "alpha_tilde",
        "effect_var": "nu2", "noise_var": "gamma2",
        "latent": "u", "latent_var": "nu2_u", "decay": "phi_u",
    },
}


@dataclass
class McmcConfig:
    """Chain-length and proposal settings."""

    n_iter: int = 25000
    n_burn: int = 15000
    thin: int = 10
    n_chains: int = 3
    rng_seed: int = 0
    metropolis_step: float = 0.1   # proposal SD on log decay
    adapt: bool = True

    def __post_init__(self):
        if self.n_burn < 0 or self.n_burn >= self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.metropolis_step < 0:
            raise ValueError("metropolis_step must be >= 0")

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin


@dataclass
class StageData:
    """One stage's observations: response, covariates, strata, coordinates."""

    z: np.ndarray           # (n,)
    covariates: np.ndarray  # (n, p)
    strata: np.ndarray      # (n,)
    coords: np.ndarray      # (n, 2)
    q: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        self.strata = np.asarray(self.strata, dtype=np.int64)
        self.coords = as_coords(self.coords)
        n = self.z.shape[0]
        if not (self.covariates.shape[0] == n == self.strata.shape[0]
                == self.coords.shape[0]):
            raise ValueError("inconsistent record counts across fields")
        if np.any((self.strata < 0) | (self.strata >= self.q)):
            raise ValueError(f"stratum indices must lie in 0..{self.q - 1}")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @classmethod
    def from_plots(cls, plots, q: int) -> "StageData":
        return cls(z=[r.y for r in plots],
                   covariates=[[r.x_ch] for r in plots],
                   strata=[r.stratum for r in plots],
                   coords=[[r.location.x, r.location.y] for r in plots], q=q)

    @classmethod
    def from_lidar(cls, records, q: int) -> "StageData":
        return cls(z=[r.x_ch for r in records],
                   covariates=[[r.v_tc] for r in records],
                   strata=[r.stratum for r in records],
                   coords=[[r.location.x, r.location.y] for r in records], q=q)


class ChainSamples:
    """Retained draws across chains, plus per-observation log-likelihood and
    fitted-value matrices used by the fit criteria."""

    def __init__(self, *, flavor, model, config, priors, q, p, n, params,
                 loglik, fitted, acceptance, final_states, m=15,
                 ordering="coord", fingerprint=""):
        self.flavor = flavor
        self.model = model
        self.config = config
        self.priors = priors
        self.q = q
        self.p = p
        self.n = n
        self.params = params            # dict name -> (L,) or (L, dim)
        self.loglik = loglik            # (L, n)
        self.fitted = fitted            # (L, n)
        self.acceptance = acceptance    # (n_chains,), nan for non-spatial
        self.final_states = final_states
        self.m = m
        self.ordering = ordering
        self.fingerprint = fingerprint

    @property
    def L(self) -> int:
        return self.loglik.shape[0]

    @property
    def n_chains(self) -> int:
        return len(self.final_states)

    @property
    def chain_length(self) -> int:
        return self.L // self.n_chains

    def key(self, role: str) -> str:
        return _ROLE_KEYS[self.flavor][role]

    def param(self, name: str) -> np.ndarray:
        return self.params[name]

    def has(self, role: str) -> bool:
        return self.key(role) in self.params

    def names(self):
        return list(self.params)

    def _get(self, role, l, default):
        k = self.key(role)
        return self.params[k][l] if k in self.params else default

    def state(self, l: int):
        """Materialize draw l as a full parameter state (blocks absent from
        the submodel appear as zeros)."""
        q, p = self.q, self.p
        intercept = float(self.params[self.key("intercept")][l])
        st_int = np.atleast_1d(self._get("stratum_intercepts", l, np.zeros(q)))
        slopes = np.atleast_1d(self._get("slopes", l, np.zeros(p)))
        st_slopes = np.atleast_1d(self._get("stratum_slopes", l,
                                            np.zeros(p * q)))
        eff = np.atleast_1d(self._get("effect_var", l, np.zeros(p + 1)))
        if eff.shape != (p + 1,):
            pad = np.zeros(p + 1)
            pad[: eff.shape[0]] = eff
            eff = pad
        noise = np.atleast_1d(self._get("noise_var", l, np.ones(1)))
        latent = np.atleast_1d(self._get("latent", l, np.zeros(self.n)))
        theta = None
        if self.has("latent_var"):
            theta = CovParams(float(self.params[self.key("latent_var")][l]),
                              float(self.params[self.key("decay")][l]))
        if self.flavor == "outcome":
            return OutcomeParamState(beta0=intercept, beta_tilde0=st_int,
                                     beta=slopes, beta_tilde=st_slopes,
                                     sigma2=eff, w=latent, theta_w=theta,
                                     tau2=noise)
        return CovariateParamState(alpha0=intercept, alpha_tilde0=st_int,
                                   alpha=slopes, alpha_tilde=st_slopes,
                                   nu2=eff, u=latent, theta_u=theta,
                                   gamma2=noise)

    def scalar_entries(self, include_latent: bool = False):
        """Flatten parameters to (label, column) pairs, e.g. tau2[1]."""
        out = []
        latent_key = self.key("latent")
        for name, arr in self.params.items():
            if name == latent_key and not include_latent:
                continue
            if arr.ndim == 1:
                out.append((name, arr))
            else:
                for j in range(arr.shape[1]):
                    out.append((f"{name}[{j}]", arr[:, j]))
        return out

    def summary(self, rhat: dict | None = None):
        """Per-parameter posterior mean, SD, and 95% interval rows."""
        rows = []
        for label, col in self.scalar_entries():
            lo, hi = np.quantile(col, [0.025, 0.975])
            row = {"parameter": label, "mean": float(np.mean(col)),
                   "sd": float(np.std(col, ddof=1)) if col.size > 1 else 0.0,
                   "q2.5": float(lo), "q97.5": float(hi)}
            if rhat is not None:
                row["rhat"] = rhat.get(label, float("nan"))
            rows.append(row)
        return rows

    def split_chains(self) -> list["ChainSamples"]:
        cl = self.chain_length
        out = []
        for c in range(self.n_chains):
            sl = slice(c * cl, (c + 1) * cl)
            out.append(ChainSamples(
                flavor=self.flavor, model=self.model, config=self.config,
                priors=self.priors, q=self.q, p=self.p, n=self.n,
                params={k: v[sl] for k, v in self.params.items()},
                loglik=self.loglik[sl], fitted=self.fitted[sl],
                acceptance=self.acceptance[c:c + 1],
                final_states=[self.final_states[c]], m=self.m,
                ordering=self.ordering, fingerprint=self.fingerprint))
        return out

    @classmethod
    def merge(cls, chunks: Sequence["ChainSamples"]) -> "ChainSamples":
        first = chunks[0]
        params = {k: np.concatenate([c.params[k] for c in chunks])
                  for k in first.params}
        return cls(flavor=first.flavor, model=first.model, config=first.config,
                   priors=first.priors, q=first.q, p=first.p, n=first.n,
                   params=params,
                   loglik=np.concatenate([c.loglik for c in chunks]),
                   fitted=np.concatenate([c.fitted for c in chunks]),
                   acceptance=np.concatenate([c.acceptance for c in chunks]),
                   final_states=sum([c.final_states for c in chunks], []),
                   m=first.m, ordering=first.ordering,
                   fingerprint=first.fingerprint)

    def save(self, path):
        payload = {
            "flavor": self.flavor, "model": self.model.variant,
            "config": self.config.__dict__, "priors": self.priors,
            "q": self.q, "p": self.p, "n": self.n, "params": self.params,
            "loglik": self.loglik, "fitted": self.fitted,
            "acceptance": self.acceptance, "final_states": self.final_states,
            "m": self.m, "ordering": self.ordering,
            "fingerprint": self.fingerprint,
        }
        with open(path, "wb") as fh:
            pickle.dump(payload, fh, protocol=4)

    @classmethod
    def load(cls, path) -> "ChainSamples":
        with open(path, "rb") as fh:
            d = pickle.load(fh)
        return cls(flavor=d["flavor"], model=SubmodelSpec(d["model"]),
                   config=McmcConfig(**d["config"]), priors=d["priors"],
                   q=d["q"], p=d["p"], n=d["n"], params=d["params"],
                   loglik=d["loglik"], fitted=d["fitted"],
                   acceptance=d["acceptance"],
                   final_states=d["final_states"], m=d["m"],
                   ordering=d["ordering"], fingerprint=d["fingerprint"])


def gibbs_regression_block(rng, dmat, prior_prec, target, noise_prec):
    """Joint conjugate draw of all regression coefficients.

    Posterior N(A^-1 b, A^-1) with A = D' diag(noise_prec) D +
    diag(prior_prec) and b = D' diag(noise_prec) target; flat-prior blocks
    carry zero prior precision.
    """
    A = dmat.T @ (dmat * noise_prec[:, None]) + np.diag(prior_prec)
    b = dmat.T @ (noise_prec * target)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "singular conditional precision (collinear design?)") from exc
    mean = np.linalg.solve(L.T, np.linalg.solve(L, b))
    return mean + np.linalg.solve(L.T, rng.standard_normal(b.shape[0]))


def gibbs_variance_block(rng, shape, scale, n_obs, ss):
    """Conjugate inverse-Gamma draws: IG(shape + n/2, scale + ss/2) per
    component. Zero-count components fall back to the prior."""
    a = shape + 0.5 * np.asarray(n_obs, dtype=np.float64)
    b = np.asarray(scale, dtype=np.float64) \
        + 0.5 * np.asarray(ss, dtype=np.float64)
    return 1.0 / rng.gamma(a, 1.0 / b)


def update_w_sequential(rng, w_ord, resid_ord, noise_prec_ord, graph,
                        unit_a, unit_r, sigma2_w):
    """One full sweep of single-site draws of the latent field, in ordered
    index space and in place. Each full conditional combines the node's own
    NNGP conditional, the conditionals of its children, and the observation
    at the node (noise precision 0 encodes "no data here")."""
    z = rng.standard_normal(graph.n)
    ptr, idx, pos = graph.children()
    _kernels.seq_latent_sweep(w_ord, resid_ord, noise_prec_ord, unit_a,
                              sigma2_w * unit_r, graph.nbr_idx, graph.nbr_cnt,
                              ptr, idx, pos, z)


def _nngp_loglik(w_ord, unit_a, unit_r, sigma2, graph):
    quad, logvar = _kernels.quad_and_logvar(w_ord, unit_a, sigma2 * unit_r,
                                            graph.nbr_idx, graph.nbr_cnt)
    return -0.5 * (graph.n * np.log(2.0 * np.pi) + logvar + quad)


def metropolis_phi(rng, w_ord, sigma2_w, phi, unit_a, unit_r, graph, priors,
                   step):
    """Random-walk proposal on log(decay), accepted on the NNGP-marginal
    ratio. Proposals outside the uniform support are rejected; the log-scale
    proposal contributes a phi'/phi Jacobian. Under the uniform-on-range
    parameterization the induced density on phi is proportional to phi^-2.
    """
    log_phi = np.log(phi)
    log_phi_new = log_phi + step * rng.standard_normal()
    lu = np.log(rng.uniform())
    phi_new = float(np.exp(log_phi_new))
    if not (priors.phi_lower <= phi_new <= priors.phi_upper):
        return phi, unit_a, unit_r, False
    a_new, r_new = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                              graph.nbr_cnt, phi_new)
    ll_cur = _nngp_loglik(w_ord, unit_a, unit_r, sigma2_w, graph)
    ll_new = _nngp_loglik(w_ord, a_new, r_new, sigma2_w, graph)
    log_ratio = ll_new - ll_cur + (log_phi_new - log_phi)
    if priors.decay_prior == "range":
        log_ratio += -2.0 * (log_phi_new - log_phi)
    if lu < log_ratio:
        return phi_new, a_new, r_new, True
    return phi, unit_a, unit_r, False


def _design_and_prior(data: StageData, spec: SubmodelSpec):
    """Stack the active design blocks; prior precisions for the stratum
    blocks are refreshed per iteration from the current effect variances."""
    dm = build_design(data.covariates, data.strata, data.q)
    blocks, layout = [dm.ones], [("intercept", 1)]
    if spec.stratum_coefficients:
        blocks.append(dm.strata_indicator)
        layout.append(("stratum_intercepts", data.q))
    if spec.include_x:
        blocks.append(dm.X)
        layout.append(("slopes", data.p))
        if spec.stratum_coefficients:
            blocks.append(dm.X_tilde)
            layout.append(("stratum_slopes", data.p * data.q))
    D = np.hstack(blocks)
    slices, start = {}, 0
    for name, width in layout:
        slices[name] = slice(start, start + width)
        start += width
    return D, slices


def _initial_state(data: StageData, spec: SubmodelSpec, priors: Priors):
    """OLS-based start: pooled coefficients, EDA-scale variances, zero latent
    field, decay at the middle of its support."""
    cols = [np.ones((data.n, 1))]
    if spec.include_x:
        cols.append(data.covariates)
    D0 = np.hstack(cols)
    coef, *_ = np.linalg.lstsq(D0, data.z, rcond=None)
    resid = data.z - D0 @ coef
    s2 = max(float(resid @ resid) / max(data.n - D0.shape[1], 1), 1e-8)
    return {
        "intercept": float(coef[0]),
        "slopes": coef[1:].copy() if spec.include_x else np.zeros(data.p),
        "stratum_intercepts": np.zeros(data.q),
        "stratum_slopes": np.zeros(data.p * data.q),
        "effect_var": np.concatenate([[priors.scale_stratum_intercept],
                                      priors.scale_stratum_slope]),
        "noise_var": np.full(data.q if spec.stratum_variances else 1, s2),
        "latent": np.zeros(data.n),
        "latent_var": priors.scale_spatial,
        "decay": 0.5 * (priors.phi_lower + priors.phi_upper),
    }


def _retained_between(t_start, n_iter, n_burn, thin):
    done = (t_start - n_burn) // thin if t_start > n_burn else 0
    total = (n_iter - n_burn) // thin if n_iter > n_burn else 0
    return max(total - done, 0)


def _allocate_store(spec, keep, n, p, q):
    store = {"intercept": np.empty(keep)}
    if spec.stratum_coefficients:
        store["stratum_intercepts"] = np.empty((keep, q))
    if spec.include_x:
        store["slopes"] = np.empty((keep, p))
        if spec.stratum_coefficients:
            store["stratum_slopes"] = np.empty((keep, p * q))
    if spec.stratum_coefficients:
        k = 1 + (p if spec.include_x else 0)
        store["effect_var"] = np.empty((keep, k))
    store["noise_var"] = np.empty((keep, q if spec.stratum_variances else 1))
    if spec.spatial_effect:
        store["latent"] = np.empty((keep, n))
        store["latent_var"] = np.empty(keep)
        store["decay"] = np.empty(keep)
    return store


def _store_draw(store, i, state):
    store["intercept"][i] = state["intercept"]
    for key in ("stratum_intercepts", "slopes", "stratum_slopes",
                "noise_var", "latent"):
        if key in store:
            store[key][i] = state[key]
    if "effect_var" in store:
        store["effect_var"][i] = state["effect_var"][: store["effect_var"].shape[1]]
    if "latent_var" in store:
        store["latent_var"][i] = state["latent_var"]
        store["decay"][i] = state["decay"]


def _run_single_chain(data, spec, priors, config, graph, chain_idx, flavor,
                      start=None, t_start=0, rng_state=None, n_iter=None,
                      step=None):
    n, p, q = data.n, data.p, data.q
    n_iter = config.n_iter if n_iter is None else n_iter
    rng = np.random.default_rng(
        np.random.SeedSequence([config.rng_seed, chain_idx,
                                0 if flavor == "outcome" else 1]))
    if rng_state is not None:
        rng.bit_generator.state = rng_state

    D, slices = _design_and_prior(data, spec)
    prior_prec = np.zeros(D.shape[1])
    state = _initial_state(data, spec, priors) if start is None else \
        {k: (v.copy() if isinstance(v, np.ndarray) else v)
         for k, v in start.items()}

    spatial = spec.spatial_effect
    if spatial:
        z_ord = data.z[graph.order]
        strata_ord = data.strata[graph.order]
        inv_order = np.empty(n, dtype=np.int64)
        inv_order[graph.order] = np.arange(n)
        unit_a, unit_r = _kernels.unit_nngp_factors(
            graph.coords, graph.nbr_idx, graph.nbr_cnt, state["decay"])
    w_input = state["latent"].copy()

    step = config.metropolis_step if step is None else step
    accepted = proposed = batch_acc = 0
    keep = _retained_between(t_start, n_iter, config.n_burn, config.thin)
    store = _allocate_store(spec, keep, n, p, q)
    loglik = np.empty((keep, n))
    fitted_store = np.empty((keep, n))
    kept = 0

    for t in range(t_start + 1, n_iter + 1):
        if not np.all(np.isfinite(state["noise_var"])) or \
                (spatial and not np.isfinite(state["latent_var"])):
            raise RuntimeError(f"divergent variance draws; aborting at "
                               f"iteration {t}")
        noise = state["noise_var"][data.strata] if spec.stratum_variances \
            else np.full(n, state["noise_var"][0])
        noise_prec = 1.0 / noise

        ### coefficients | variances, w: joint conjugate normal draw
        if spec.stratum_coefficients:
            prior_prec[slices["stratum_intercepts"]] = \
                1.0 / state["effect_var"][0]
            if spec.include_x:
                prior_prec[slices["stratum_slopes"]] = np.tile(
                    1.0 / state["effect_var"][1:], q)
        theta = gibbs_regression_block(rng, D, prior_prec, data.z - w_input,
                                       noise_prec)
        state["intercept"] = float(theta[slices["intercept"]][0])
        if spec.stratum_coefficients:
            state["stratum_intercepts"] = theta[slices["stratum_intercepts"]]
        if spec.include_x:
            state["slopes"] = theta[slices["slopes"]]
            if spec.stratum_coefficients:
                state["stratum_slopes"] = theta[slices["stratum_slopes"]]
        eta = D @ theta

        ### stratum-effect variances | coefficients: IG(shape + q/2, .)
        if spec.stratum_coefficients:
            ss0 = float(state["stratum_intercepts"]
                        @ state["stratum_intercepts"])
            state["effect_var"][0] = gibbs_variance_block(
                rng, priors.ig_shape, priors.scale_stratum_intercept, q, ss0)
            if spec.include_x:
                bt = state["stratum_slopes"].reshape(q, p)
                state["effect_var"][1:] = gibbs_variance_block(
                    rng, priors.ig_shape, priors.scale_stratum_slope, q,
                    np.sum(bt * bt, axis=0))

        ### residual variances | rest: IG(shape + n_j/2, scale + SS_j/2)
        resid = data.z - eta - w_input
        if spec.stratum_variances:
            nj = np.bincount(data.strata, minlength=q).astype(np.float64)
            ssj = np.bincount(data.strata, weights=resid * resid, minlength=q)
            state["noise_var"] = gibbs_variance_block(
                rng, priors.ig_shape, priors.scale_noise, nj, ssj)
        else:
            state["noise_var"] = np.atleast_1d(gibbs_variance_block(
                rng, priors.ig_shape, priors.scale_noise_pooled, n,
                float(resid @ resid)))
        if not np.all(np.isfinite(state["noise_var"])):
            raise RuntimeError(f"divergent variance draw at iteration {t}")

        if spatial:
            ### latent field: sequential single-site sweep in graph order
            noise_ord = state["noise_var"][strata_ord] \
                if spec.stratum_variances \
                else np.full(n, state["noise_var"][0])
            w_ord = w_input[graph.order]
            update_w_sequential(rng, w_ord, z_ord - eta[graph.order],
                                1.0 / noise_ord, graph, unit_a, unit_r,
                                state["latent_var"])

            ### process variance | w, decay
            quad, _ = _kernels.quad_and_logvar(w_ord, unit_a, unit_r,
                                               graph.nbr_idx, graph.nbr_cnt)
            state["latent_var"] = float(gibbs_variance_block(
                rng, priors.ig_shape, priors.scale_spatial, n, quad))
            if not np.isfinite(state["latent_var"]):
                raise RuntimeError(f"divergent variance draw at iteration {t}")

            ### decay | w, process variance: Metropolis on log scale
            phi, unit_a, unit_r, acc = metropolis_phi(
                rng, w_ord, state["latent_var"], state["decay"], unit_a,
                unit_r, graph, priors, step)
            state["decay"] = phi
            if t > config.n_burn:  # report the post-adaptation rate
                proposed += 1
                accepted += int(acc)
            batch_acc += int(acc)
            if config.adapt and t <= config.n_burn and t % _ADAPT_BATCH == 0:
                rate = batch_acc / _ADAPT_BATCH
                step *= float(np.exp((rate - _ADAPT_TARGET)
                                     / np.sqrt(t / _ADAPT_BATCH)))
                step = min(max(step, _STEP_BOUNDS[0]), _STEP_BOUNDS[1])
                batch_acc = 0
            w_input = w_ord[inv_order]
            state["latent"] = w_input

        if t > config.n_burn and (t - config.n_burn) % config.thin == 0:
            fit = eta + w_input
            res = data.z - fit
            nv = state["noise_var"][data.strata] if spec.stratum_variances \
                else np.full(n, state["noise_var"][0])
            loglik[kept] = -0.5 * (np.log(2.0 * np.pi * nv) + res * res / nv)
            fitted_store[kept] = fit
            _store_draw(store, kept, state)
            kept += 1

    final = {k: (v.copy() if isinstance(v, np.ndarray) else v)
             for k, v in state.items()}
    return {"store": store, "loglik": loglik, "fitted": fitted_store,
            "acceptance": accepted / proposed if proposed else float("nan"),
            "final_state": final, "t_end": n_iter,
            "rng_state": rng.bit_generator.state, "step": step}


def _wrap_raw(raw, *, flavor, spec, config, priors, data, chain_idx, m,
              ordering, fingerprint):
    keys = _ROLE_KEYS[flavor]
    params = {keys[role]: arr for role, arr in raw["store"].items()}
    return ChainSamples(
        flavor=flavor, model=spec, config=config, priors=priors, q=data.q,
        p=data.p, n=data.n, params=params, loglik=raw["loglik"],
        fitted=raw["fitted"], acceptance=np.array([raw["acceptance"]]),
        final_states=[{"state": raw["final_state"], "t_end": raw["t_end"],
                       "rng_state": raw["rng_state"], "chain": chain_idx,
                       "step": raw["step"]}],
        m=m, ordering=ordering, fingerprint=fingerprint)


def run_chain(model: SubmodelSpec, data: StageData, priors: Priors,
              config: McmcConfig, *, flavor: str = "outcome", m: int = 15,
              ordering: str = "coord", jitter: bool = False,
              fingerprint: str = "") -> ChainSamples:
    """Run config.n_chains independent chains and merge the retained draws.

    Deterministic given config.rng_seed: chain c uses the stream seeded by
    (rng_seed, c, flavor). The outcome and covariate stages are sampled
    independently (two-stage structure).
    """
    if flavor not in _ROLE_KEYS:
        raise ValueError(f"unknown flavor {flavor!r}")
    graph = None
    if model.spatial_effect:
        graph = build_neighbor_graph(data.coords, m=m, ordering=ordering,
                                     jitter=jitter)
    chunks = []
    for c in range(config.n_chains):
        raw = _run_single_chain(data, model, priors, config, graph, c, flavor)
        chunks.append(_wrap_raw(raw, flavor=flavor, spec=model, config=config,
                                priors=priors, data=data, chain_idx=c, m=m,
                                ordering=ordering, fingerprint=fingerprint))
    return ChainSamples.merge(chunks)


def extend_chain(cs: ChainSamples, data: StageData,
                 n_extra: int) -> ChainSamples:
    """Continue a single-chain checkpoint for n_extra further iterations.

    Reproduces exactly the retained draws a longer original run would have
    produced, because the checkpoint carries the final parameter state, the
    generator state, and the frozen proposal step.
    """
    if cs.n_chains != 1:
        raise ValueError("extend_chain operates on a single-chain checkpoint")
    info = cs.final_states[0]
    graph = None
    if cs.model.spatial_effect:
        graph = build_neighbor_graph(data.coords, m=cs.m,
                                     ordering=cs.ordering)
    raw = _run_single_chain(
        data, cs.model, cs.priors, cs.config, graph, info["chain"], cs.flavor,
        start=info["state"], t_start=info["t_end"],
        rng_state=info["rng_state"], n_iter=info["t_end"] + n_extra,
        step=info["step"])
    new = _wrap_raw(raw, flavor=cs.flavor, spec=cs.model,
                    config=replace(cs.config, n_iter=info["t_end"] + n_extra),
                    priors=cs.priors, data=data, chain_idx=info["chain"],
                    m=cs.m, ordering=cs.ordering, fingerprint=cs.fingerprint)
    merged = ChainSamples.merge([cs, new])
    merged.config = new.config
    merged.final_states = new.final_states
    return merged


def loglik_at_posterior_mean(cs: ChainSamples, data: StageData) -> np.ndarray:
    """Per-observation log-likelihood at the posterior mean parameters.

    The mean surface is linear in the coefficients and the latent field, so
    it equals the mean of the stored fitted values; the noise variance is
    plugged in at its posterior mean.
    """
    fit = cs.fitted.mean(axis=0)
    nv = np.atleast_1d(cs.param(cs.key("noise_var")).mean(axis=0))
    noise = nv[data.strata] if nv.shape[0] == data.q else np.full(data.n, nv[0])
    res = data.z - fit
    return -0.5 * (np.log(2.0 * np.pi * noise) + res * res / noise)


def gelman_rubin(cs: ChainSamples, include_latent: bool = False) -> dict:
    """Split-Rhat per scalar parameter. Zero-variance entries report 1.0 and
    are listed under the '_degenerate' key."""
    if cs.n_chains < 2:
        raise ValueError("need >= 2 chains for between-chain diagnostics; "
                         "use within-chain checks for a single chain")
    cl = cs.chain_length
    half = cl // 2
    if half < 2:
        raise ValueError("chains too short to split")
    out, degenerate = {}, []
    for label, col in cs.scalar_entries(include_latent=include_latent):
        segs = []
        for c in range(cs.n_chains):
            chain = col[c * cl:(c + 1) * cl]
            segs.append(chain[:half])
            segs.append(chain[half:2 * half])
        segs = np.asarray(segs)
        means = segs.mean(axis=1)
        W = segs.var(axis=1, ddof=1).mean()
        B = half * means.var(ddof=1)
        if W <= 0:
            out[label] = 1.0
            degenerate.append(label)
            continue
        var_plus = (half - 1) / half * W + B / half
        out[label] = float(np.sqrt(var_plus / W))
    out["_degenerate"] = degenerate
    return out
