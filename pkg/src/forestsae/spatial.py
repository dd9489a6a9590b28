"""Exponential-covariance spatial core.

Nearest-neighbor DAG construction over ordered locations, per-node
conditional factors (regression weights and conditional variances), sparse
and dense Gaussian process log densities, and the effective-range
transform. Distances are Euclidean on projected km coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from forestsae import _kernels

log = logging.getLogger(__name__)

# Correlation level defining the effective spatial range.
EFFECTIVE_RANGE_THRESHOLD = 0.05

# Largest point set accepted by the dense-covariance path.
DENSE_GUARD = 5000

_JITTER_KM = 1e-6


class DuplicateLocationError(ValueError):
    """Raised when distinct records share exact coordinates."""


class FactorizationError(RuntimeError):
    """Raised when a covariance (sub)matrix cannot be factorized."""


@dataclass(frozen=True)
class Location:
    """A point-referenced site on the projected km grid."""

    x: float
    y: float
    id: int

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"location {self.id}: non-finite coordinates")


@dataclass(frozen=True)
class CovParams:
    """Exponential covariance parameters: variance and decay rate (1/km)."""

    sigma2: float
    phi: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise ValueError(f"phi must be positive, got {self.phi}")


def as_coords(locs) -> np.ndarray:
    """Coerce Locations, coordinate pairs, or an (n, 2) array to float64."""
    if len(locs) and hasattr(locs[0] if not isinstance(locs, np.ndarray)
                             else None, "x"):
        arr = np.array([[p.x, p.y] for p in locs], dtype=np.float64)
    else:
        arr = np.ascontiguousarray(locs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got {arr.shape}")
    return arr


def exp_correlation(dist, phi: float):
    """exp(-phi * dist); 1 at zero distance, strictly decreasing in dist."""
    d = np.asarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("dist must be finite")
    if np.any(d < 0):
        raise ValueError("dist must be non-negative")
    if not (np.isfinite(phi) and phi > 0):
        raise ValueError(f"phi must be positive, got {phi}")
    out = np.exp(-phi * d)
    return float(out) if np.isscalar(dist) or d.ndim == 0 else out


def effective_range(phi: float) -> float:
    """Distance (km) at which the correlation drops to 0.05: -log(0.05)/phi."""
    if not (np.isfinite(phi) and phi > 0):
        raise ValueError(f"phi must be positive, got {phi}")
    return -np.log(EFFECTIVE_RANGE_THRESHOLD) / phi


@dataclass
class NeighborGraph:
    """Ordered nearest-predecessor DAG over a point set.

    Everything is expressed in ordered positions 0..n-1: node 0 has no
    neighbors and node i's neighbors are the min(i, m) nearest predecessors.
    ``order`` maps ordered position -> index into the input sequence.
    """

    order: np.ndarray          # (n,) permutation of input indices
    coords: np.ndarray         # (n, 2) in ordered sequence
    nbr_idx: np.ndarray        # (n, m) int64 ordered positions, -1 padded
    nbr_cnt: np.ndarray        # (n,) int64
    m: int
    ids: np.ndarray            # (n,) original Location ids, ordered
    _children: tuple | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr_idx[i, : self.nbr_cnt[i]]

    def children(self):
        """CSR arrays (ptr, idx, pos): for each node, the nodes that list it
        as a neighbor and the slot it occupies in their neighbor rows."""
        if self._children is None:
            n = self.n
            counts = np.zeros(n + 1, dtype=np.int64)
            for i in range(n):
                counts[self.nbr_idx[i, : self.nbr_cnt[i]] + 1] += 1
            ptr = np.cumsum(counts)
            idx = np.empty(ptr[-1], dtype=np.int64)
            pos = np.empty(ptr[-1], dtype=np.int64)
            cursor = ptr[:-1].copy()
            for i in range(n):
                for s in range(self.nbr_cnt[i]):
                    parent = self.nbr_idx[i, s]
                    idx[cursor[parent]] = i
                    pos[cursor[parent]] = s
                    cursor[parent] += 1
            self._children = (ptr, idx, pos)
        return self._children


def _check_duplicates(coords: np.ndarray, ids: np.ndarray):
    _, inverse, counts = np.unique(coords, axis=0, return_inverse=True,
                                   return_counts=True)
    dup = np.flatnonzero(counts[inverse] > 1)
    if dup.size:
        names = ", ".join(str(i) for i in ids[dup[:10]])
        raise DuplicateLocationError(
            f"{dup.size} records share coordinates (ids: {names})")


def _maxmin_order(coords: np.ndarray) -> np.ndarray:
    """Max-min ordering: start nearest the centroid, then repeatedly take the
    point farthest from the already-ordered set."""
    n = coords.shape[0]
    center = coords.mean(axis=0)
    first = int(np.argmin(np.sum((coords - center) ** 2, axis=1)))
    order = np.empty(n, dtype=np.int64)
    order[0] = first
    mindist = np.sum((coords - coords[first]) ** 2, axis=1)
    mindist[first] = -1.0
    for k in range(1, n):
        nxt = int(np.argmax(mindist))
        order[k] = nxt
        d = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(mindist, d, out=mindist)
        mindist[nxt] = -1.0
    return order


def build_neighbor_graph(locs, m: int, ordering: str = "coord",
                         jitter: bool = False, rng=None) -> NeighborGraph:
    """Build the nearest-predecessor graph.

    ordering: "coord" sorts by easting then northing, "given" keeps input
    order, "maxmin" uses a max-min space-filling order. Neighbor ties are
    broken toward the lower ordering index. Exact coordinate duplicates are
    rejected unless jitter=True, which perturbs collisions by up to 1e-6 km
    with a logged warning.
    """
    coords = as_coords(locs)
    n = coords.shape[0]
    if n == 0:
        raise ValueError("empty location set")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if isinstance(locs, np.ndarray):
        ids = np.arange(n, dtype=np.int64)
    else:
        ids = np.array([p.id for p in locs], dtype=np.int64)
        if np.unique(ids).size != n:
            raise ValueError("location ids must be unique")

    _, inverse, counts = np.unique(coords, axis=0, return_inverse=True,
                                   return_counts=True)
    if np.any(counts > 1):
        if not jitter:
            _check_duplicates(coords, ids)
        rng = np.random.default_rng(0) if rng is None else rng
        dup = counts[inverse] > 1
        log.warning("jittering %d coincident locations by <= %g km",
                    int(dup.sum()), _JITTER_KM)
        coords = coords.copy()
        coords[dup] += rng.uniform(-_JITTER_KM, _JITTER_KM,
                                   size=(int(dup.sum()), 2))
        _check_duplicates(coords, ids)

    if ordering == "coord":
        order = np.lexsort((coords[:, 1], coords[:, 0]))
    elif ordering == "given":
        order = np.arange(n, dtype=np.int64)
    elif ordering == "maxmin":
        order = _maxmin_order(coords)
    else:
        raise ValueError(f"unknown ordering rule: {ordering!r}")

    oc = np.ascontiguousarray(coords[order])
    m_eff = min(m, n - 1) if n > 1 else 1
    nbr_idx = np.full((n, m_eff), -1, dtype=np.int64)
    nbr_cnt = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        k = min(i, m_eff)
        d = np.sum((oc[:i] - oc[i]) ** 2, axis=1)
        # lexsort: primary key distance, secondary key position (tie -> lower)
        sel = np.lexsort((np.arange(i), d))[:k]
        nbr_idx[i, :k] = sel
        nbr_cnt[i] = k
    return NeighborGraph(order=order, coords=oc, nbr_idx=nbr_idx,
                         nbr_cnt=nbr_cnt, m=m_eff, ids=ids[order])


@dataclass
class NngpFactors:
    """Per-node conditional regression weights and variances.

    a[i, :cnt[i]] are the weights on the neighbor values; delta2[i] is the
    conditional variance. A node with no neighbors has delta2 = sigma2 and
    an empty weight row.
    """

    a: np.ndarray        # (n, m) padded
    delta2: np.ndarray   # (n,)
    nbr_cnt: np.ndarray  # (n,)
    sigma2: float
    phi: float

    def a_vector(self, i: int) -> np.ndarray:
        return self.a[i, : self.nbr_cnt[i]]


def nngp_factors(graph: NeighborGraph, params: CovParams) -> NngpFactors:
    """Solve K(N_i, N_i) a_i = K(N_i, i) and delta2_i = K(i,i) - K(i,N_i) a_i
    for every node of the graph."""
    try:
        a, r = _kernels.unit_nngp_factors(graph.coords, graph.nbr_idx,
                                          graph.nbr_cnt, params.phi)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"singular neighbor covariance (coincident neighbors?): {exc}"
        ) from exc
    return NngpFactors(a=a, delta2=params.sigma2 * r,
                       nbr_cnt=graph.nbr_cnt.copy(),
                       sigma2=params.sigma2, phi=params.phi)


def nngp_log_density(w, factors: NngpFactors, graph: NeighborGraph) -> float:
    """Log density of w under the NNGP: sum of the per-node Gaussian
    conditionals. w is indexed like the graph's input locations."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (graph.n,):
        raise ValueError(f"w has shape {w.shape}, expected ({graph.n},)")
    w_ord = np.ascontiguousarray(w[graph.order])
    quad, logvar = _kernels.quad_and_logvar(w_ord, factors.a, factors.delta2,
                                            graph.nbr_idx, graph.nbr_cnt)
    return -0.5 * (graph.n * np.log(2.0 * np.pi) + logvar + quad)


def dense_covariance(locs, params: CovParams) -> np.ndarray:
    coords = as_coords(locs)
    return params.sigma2 * np.exp(-params.phi * cdist(coords, coords))


def dense_gp_log_density(w, locs, params: CovParams) -> float:
    """Exact zero-mean multivariate normal log density under the dense
    exponential covariance. Guarded to n <= 5000."""
    coords = as_coords(locs)
    n = coords.shape[0]
    if n > DENSE_GUARD:
        raise ValueError(f"n={n} exceeds the dense-covariance guard "
                         f"({DENSE_GUARD}); use the NNGP path")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"w has shape {w.shape}, expected ({n},)")
    cov = dense_covariance(coords, params)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"covariance not positive definite (duplicate locations?): {exc}"
        ) from exc
    alpha = np.linalg.solve(chol, w)
    return float(-0.5 * n * np.log(2.0 * np.pi)
                 - np.sum(np.log(np.diag(chol)))
                 - 0.5 * np.dot(alpha, alpha))
