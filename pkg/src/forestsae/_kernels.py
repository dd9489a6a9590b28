"""Numba kernels for the NNGP hot loops.

All kernels work in "ordered" index space: node i may only reference
nodes with smaller indices (its neighbor set). Arrays are float64 /
int64, neighbor lists padded to width m with counts alongside.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Floor keeping conditional variances strictly positive under roundoff.
_VAR_FLOOR = 1e-12


@njit(cache=True)
def unit_nngp_factors(coords, nbr_idx, nbr_cnt, phi):
    """Per-node conditional weights and variances for a unit-variance
    exponential-correlation process.

    Solves R(N_i, N_i) a_i = R(N_i, i) for each node; r_i = 1 - R(i, N_i) a_i.
    Returns (a, r) with a padded to (n, m). Scale-free in the process
    variance: multiplying the covariance by sigma2 leaves a unchanged and
    scales the conditional variance to sigma2 * r.
    """
    n = coords.shape[0]
    m = nbr_idx.shape[1]
    a = np.zeros((n, m))
    r = np.ones(n)
    for i in range(n):
        k = nbr_cnt[i]
        if k == 0:
            continue
        R = np.empty((k, k))
        c = np.empty(k)
        for s in range(k):
            js = nbr_idx[i, s]
            dx = coords[i, 0] - coords[js, 0]
            dy = coords[i, 1] - coords[js, 1]
            c[s] = np.exp(-phi * np.sqrt(dx * dx + dy * dy))
            R[s, s] = 1.0
            for t in range(s):
                jt = nbr_idx[i, t]
                ex = coords[js, 0] - coords[jt, 0]
                ey = coords[js, 1] - coords[jt, 1]
                v = np.exp(-phi * np.sqrt(ex * ex + ey * ey))
                R[s, t] = v
                R[t, s] = v
        sol = np.linalg.solve(R, c)
        a[i, :k] = sol
        ri = 1.0 - np.dot(c, sol)
        if ri < _VAR_FLOOR:
            ri = _VAR_FLOOR
        elif ri > 1.0:
            ri = 1.0
        r[i] = ri
    return a, r


@njit(cache=True)
def quad_and_logvar(w, a, delta2, nbr_idx, nbr_cnt):
    """Quadratic form sum((w_i - a_i' w_N)^2 / delta2_i) and sum(log delta2_i)."""
    n = w.shape[0]
    quad = 0.0
    logvar = 0.0
    for i in range(n):
        mu = 0.0
        for s in range(nbr_cnt[i]):
            mu += a[i, s] * w[nbr_idx[i, s]]
        res = w[i] - mu
        quad += res * res / delta2[i]
        logvar += np.log(delta2[i])
    return quad, logvar


@njit(cache=True)
def seq_latent_sweep(w, resid, noise_prec, a, delta2, nbr_idx, nbr_cnt,
                     child_ptr, child_idx, child_pos, z):
    """One systematic Gibbs sweep over the latent field, in place.

    Full conditional of w_i combines its own NNGP conditional, the
    conditionals of the nodes that list i as a neighbor (children), and a
    Gaussian observation with precision noise_prec[i] centered at resid[i].
    noise_prec[i] = 0 encodes "no observation at node i".
    """
    n = w.shape[0]
    for i in range(n):
        prec = 1.0 / delta2[i] + noise_prec[i]
        num = noise_prec[i] * resid[i]
        mu = 0.0
        for s in range(nbr_cnt[i]):
            mu += a[i, s] * w[nbr_idx[i, s]]
        num += mu / delta2[i]
        for e in range(child_ptr[i], child_ptr[i + 1]):
            c = child_idx[e]
            q = child_pos[e]
            partial = w[c]
            for t in range(nbr_cnt[c]):
                if t != q:
                    partial -= a[c, t] * w[nbr_idx[c, t]]
            aiq = a[c, q]
            prec += aiq * aiq / delta2[c]
            num += aiq * partial / delta2[c]
        v = 1.0 / prec
        w[i] = num * v + np.sqrt(v) * z[i]


@njit(cache=True)
def latent_predict_draw(all_coords, n_obs, nbr_idx, nbr_cnt, u_all,
                        sigma2, phi, z):
    """Draw the latent process at new locations, conditioning each on its
    neighbor set.

    u_all holds observed values in [0, n_obs); entries from n_obs on are
    filled in order, so neighbor indices may point at observed locations or
    at earlier new locations.
    """
    n_new = all_coords.shape[0] - n_obs
    for t in range(n_new):
        i = n_obs + t
        k = nbr_cnt[t]
        if k == 0:
            u_all[i] = np.sqrt(sigma2) * z[t]
            continue
        R = np.empty((k, k))
        c = np.empty(k)
        for s in range(k):
            js = nbr_idx[t, s]
            dx = all_coords[i, 0] - all_coords[js, 0]
            dy = all_coords[i, 1] - all_coords[js, 1]
            c[s] = np.exp(-phi * np.sqrt(dx * dx + dy * dy))
            R[s, s] = 1.0
            for u in range(s):
                jt = nbr_idx[t, u]
                ex = all_coords[js, 0] - all_coords[jt, 0]
                ey = all_coords[js, 1] - all_coords[jt, 1]
                v = np.exp(-phi * np.sqrt(ex * ex + ey * ey))
                R[s, u] = v
                R[u, s] = v
        sol = np.linalg.solve(R, c)
        mean = 0.0
        for s in range(k):
            mean += sol[s] * u_all[nbr_idx[t, s]]
        ri = 1.0 - np.dot(c, sol)
        if ri < _VAR_FLOOR:
            ri = _VAR_FLOOR
        elif ri > 1.0:
            ri = 1.0
        u_all[i] = mean + np.sqrt(sigma2 * ri) * z[t]


@njit(cache=True)
def latent_predict_moments(obs_coords, new_coords, nbr_idx, nbr_cnt, u_obs,
                           sigma2, phi):
    """Conditional mean and variance at new locations given observed values
    only (no sequential chaining between new locations)."""
    n_new = new_coords.shape[0]
    mean = np.zeros(n_new)
    var = np.full(n_new, sigma2)
    for t in range(n_new):
        k = nbr_cnt[t]
        if k == 0:
            continue
        R = np.empty((k, k))
        c = np.empty(k)
        for s in range(k):
            js = nbr_idx[t, s]
            dx = new_coords[t, 0] - obs_coords[js, 0]
            dy = new_coords[t, 1] - obs_coords[js, 1]
            c[s] = np.exp(-phi * np.sqrt(dx * dx + dy * dy))
            R[s, s] = 1.0
            for u in range(s):
                jt = nbr_idx[t, u]
                ex = obs_coords[js, 0] - obs_coords[jt, 0]
                ey = obs_coords[js, 1] - obs_coords[jt, 1]
                v = np.exp(-phi * np.sqrt(ex * ex + ey * ey))
                R[s, u] = v
                R[u, s] = v
        sol = np.linalg.solve(R, c)
        mu = 0.0
        for s in range(k):
            mu += sol[s] * u_obs[nbr_idx[t, s]]
        mean[t] = mu
        ri = 1.0 - np.dot(c, sol)
        if ri < _VAR_FLOOR:
            ri = _VAR_FLOOR
        elif ri > 1.0:
            ri = 1.0
        var[t] = sigma2 * ri
    return mean, var
