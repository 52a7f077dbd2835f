"""Worst-case to pseudo-random reduction: a decision tree over arbitrary point sets.

The tree is built top-down by four mutually recursive procedures:

* ``process``: randomly shifted grid in R^d; per cell, dense clusters go to
  ``process_ball`` and the remainder is mapped onto a unit sphere and sent
  to ``process_sphere``.
* ``process_ball``: points in a ball B(o, R). Either one stored point
  answers every admissible query (r1 + 2R <= r2), or distances to o are
  rounded up to multiples of delta and each (data ring i, query ring j)
  pair becomes a ``process_sphere`` child with thresholds adjusted by
  :func:`project`.
* ``process_sphere``: points on a sphere. Base cases store everything
  (counter k reached K) or one representative (r2 >= 2R); otherwise dense
  caps of radius (sqrt(2) - eps) R become ``process_ball`` children with the
  same k, and the rest goes through one Gaussian filter step whose children
  recurse with k + 1.
* filter step ("lsf-step"): T Gaussian directions; a point joins child t iff
  <z_t, u> >= eta for its unit direction u from the sphere centre.

Queries follow the same shape: cluster children first, then the filter
children whose threshold eta' the query passes. Every reported point is
verified in the original coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import caps
from .filter_tree import (DEFAULT_SUCCESS_FACTOR, QueryStats, ResourceCapExceeded,
                          default_depth, passes)

SQRT2 = math.sqrt(2.0)


# --- parameters --------------------------------------------------------------

@dataclass(frozen=True)
class ReductionParams:
    eps: float = 0.5                 # cluster caps have radius (sqrt(2) - eps) R
    delta: float = 0.05              # ring width as a fraction of the ball radius
    tau: float = 0.01                # dense cluster: at least tau |P| points
    K: int | None = None             # filter steps per path; default round(sqrt(log2 n))
    C_const: float = 1.0             # exponent constant of the asymptotic delta formula
    grid_cell: float | None = None   # grid side in units of r; default 10 sqrt(d) c
    seed: int = 0
    rho_s: float = 4.0 / 3.0
    success_factor: float = DEFAULT_SUCCESS_FACTOR
    eta_convention: str = "single"   # "single": tail(eta) = n^(-1/K); "pair": pair at r2 survives w.p. n^(-1/K)
    top_cluster_radius: float | None = None   # in units of r; default c / sqrt(2)
    min_cluster_size: int = 8
    leaf_size: int = 1               # point sets this small are stored directly
    max_cluster_depth: int = 12
    max_nodes: int = 3_000_000

    def __post_init__(self):
        for name in ("eps", "delta", "tau"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.eta_convention not in ("single", "pair"):
            raise ValueError("eta_convention must be 'single' or 'pair'")
        if self.rho_s < 1.0:
            raise ValueError("rho_s must be >= 1")

    @classmethod
    def asymptotic(cls, n: int, C_const: float = 1.0, **kw) -> "ReductionParams":
        """eps = 1/lnlnln n, delta = exp(-(lnlnln n)^C), tau = exp(-(ln n)^(2/3)); needs n > e^e."""
        lll = math.log(math.log(math.log(n)))
        if lll <= 0:
            raise ValueError("asymptotic settings need ln ln ln n > 0 (n > e^e ~ 15.2)")
        return cls(eps=min(0.99, 1.0 / lll), delta=math.exp(-lll ** C_const),
                   tau=math.exp(-math.log(n) ** (2.0 / 3.0)), C_const=C_const, **kw)


# --- geometry helpers ------------------------------------------------------------

def project(R1: float, R2: float, r: float) -> float:
    """Distance from p1 on the sphere S1 (radius R1) to the point of S1 closest to p2 on S2 (radius R2).

    The two spheres are concentric and ||p1 - p2|| = r; with
    cos(theta) = (R1^2 + R2^2 - r^2) / (2 R1 R2) the answer is
    sqrt(2 R1^2 (1 - cos(theta))).
    """
    if not (R1 > 0 and R2 > 0):
        raise ValueError("radii must be positive")
    tol = 1e-12 * (R1 + R2)
    if r < abs(R1 - R2) - tol or r > R1 + R2 + tol:
        raise ValueError(f"infeasible triangle: R1={R1}, R2={R2}, r={r}")
    cos_t = min(1.0, max(-1.0, (R1 * R1 + R2 * R2 - r * r) / (2.0 * R1 * R2)))
    return math.sqrt(max(0.0, 2.0 * R1 * R1 * (1.0 - cos_t)))


def project_clamped(R1: float, R2: float, r: float) -> float:
    """:func:`project` with r clamped into the feasible range [|R1 - R2|, R1 + R2]."""
    return project(R1, R2, min(R1 + R2, max(abs(R1 - R2), r)))


def sphere_fit(X: np.ndarray) -> np.ndarray:
    """Least-squares centre of the sphere through the rows of X (centroid if underdetermined)."""
    n, d = X.shape
    centroid = X.mean(axis=0)
    if n < d + 2:
        return centroid
    Y = X - centroid  # centring keeps the system well conditioned
    A = np.hstack([2.0 * Y, np.ones((n, 1))])
    b = np.einsum("ij,ij->i", Y, Y)
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < d + 1:
        return centroid
    return centroid + sol[:d]


def unit_rows(X: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(X, axis=1, keepdims=True)
    out = np.zeros_like(X)
    ok = nrm[:, 0] > 0
    out[ok] = X[ok] / nrm[ok]
    out[~ok, 0] = 1.0  # points at the centre get an arbitrary fixed direction
    return out


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0)


def _neighbour_counts(X: np.ndarray, alive: np.ndarray, centers: np.ndarray, r2: float, chunk: int = 1024):
    out = np.zeros(len(centers), dtype=np.int64)
    Xa = X[alive]
    for s in range(0, len(centers), chunk):
        out[s:s + chunk] = (_sq_dists(X[centers[s:s + chunk]], Xa) <= r2).sum(axis=1)
    return out


def greedy_clusters(X: np.ndarray, radius: float, min_count: int) -> list[tuple[int, np.ndarray]]:
    """Repeatedly take the data point whose radius-ball holds the most remaining points.

    Stops when the best ball holds fewer than ``min_count`` points. Returns
    (seed index, member indices) pairs; members are removed before the next round.
    """
    n = len(X)
    if n == 0 or min_count > n:
        return []
    r2 = radius * radius * (1.0 + 1e-12)
    alive = np.ones(n, dtype=bool)
    idx = np.arange(n)
    counts = _neighbour_counts(X, idx, idx, r2)
    out = []
    while True:
        cand = np.nonzero(alive)[0]
        if len(cand) == 0:
            break
        best = cand[np.argmax(counts[cand])]
        if counts[best] < min_count:
            break
        members = cand[_sq_dists(X[best:best + 1], X[cand])[0] <= r2]
        out.append((int(best), members))
        alive[members] = False
        rest = np.nonzero(alive)[0]
        if len(rest):
            counts[rest] -= (_sq_dists(X[rest], X[members]) <= r2).sum(axis=1)
    return out


@dataclass
class Cluster:
    center: np.ndarray       # enclosing-ball centre
    radius: float            # enclosing-ball radius
    members: np.ndarray      # indices into the input point array
    seed: int                # index of the data point the cap was centred on

    @property
    def count(self) -> int:
        return len(self.members)


@dataclass
class ClusterReport:
    clusters: list[Cluster]
    remainder: np.ndarray

    def summary(self) -> list[tuple[np.ndarray, float, int]]:
        return [(c.center, c.radius, c.count) for c in self.clusters]


def cluster_threshold(size: int, tau: float, min_cluster_size: int) -> int:
    return max(int(min_cluster_size), int(math.ceil(tau * size - 1e-12)))


def find_dense_clusters(X: np.ndarray, o: np.ndarray, R: float, eps: float, tau: float,
                        min_cluster_size: int = 1) -> ClusterReport:
    """Greedy dense caps of radius (sqrt(2) - eps) R centred at data points of the sphere dB(o, R).

    Each cap with at least max(min_cluster_size, tau |P|) remaining points is
    removed and enclosed in a ball. Every member lies in the cap
    {u : <u, x> >= h} (u, x unit, h = sqrt(2) eps - eps^2 / 2), so the ball
    with centre o + h R x and radius R sqrt(1 - h^2) <= (1 - eps^2/4) R
    encloses it; the member centroid is tried as well and the smaller of the
    two measured radii wins.
    """
    X = np.asarray(X, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    U = (X - o) / R
    need = cluster_threshold(len(X), tau, min_cluster_size)
    h = SQRT2 * eps - eps * eps / 2.0
    clusters = []
    taken = np.zeros(len(X), dtype=bool)
    for seed, members in greedy_clusters(U, SQRT2 - eps, need):
        x = U[seed] / np.linalg.norm(U[seed])
        cands = [o + h * R * x, X[members].mean(axis=0)]
        radii = [float(np.sqrt(_sq_dists(X[members], c[None])).max()) for c in cands]
        best = int(np.argmin(radii))
        clusters.append(Cluster(cands[best], radii[best], members, seed))
        taken[members] = True
    return ClusterReport(clusters, np.nonzero(~taken)[0])


def enclosing_radius_bound(eps: float, R: float) -> float:
    return (1.0 - eps * eps / 4.0) * R


# --- nodes ------------------------------------------------------------------------

@dataclass
class LeafStore:
    ids: np.ndarray
    k: int
    kind: str = field(default="leaf-store", init=False)


@dataclass
class TrivialStore:
    rep: int                 # -1 when the point set was empty
    k: int
    r1: float
    r2: float
    R: float
    kind: str = field(default="trivial-store", init=False)


@dataclass
class LsfStep:
    eta: float
    eta_prime: float
    T: int
    slots: np.ndarray
    dirs: np.ndarray         # float32, one row per materialized child
    children: list
    k: int
    infeasible: bool = False
    kind: str = field(default="lsf-step", init=False)


@dataclass
class ClusterChild:
    center: np.ndarray
    radius: float
    child: "BallNode | TrivialStore | LeafStore"


@dataclass
class SphereNode:
    o: np.ndarray
    R: float
    r1: float
    r2: float
    k: int
    size: int
    clusters: list
    lsf: LsfStep | None
    kind: str = field(default="process_sphere", init=False)


@dataclass
class BallNode:
    o: np.ndarray
    R: float
    r1: float
    r2: float
    k: int
    delta: float
    size: int
    children: dict           # (i, j) -> node
    parent_R: float | None = None
    kind: str = field(default="process_ball", init=False)


@dataclass
class CellEntry:
    key: tuple
    clusters: list
    o: np.ndarray | None
    M: float
    child: object | None


@dataclass
class ProcessNode:
    shift: np.ndarray
    cell_side: float
    r1: float
    r2: float
    cells: dict              # key -> CellEntry
    kind: str = field(default="process", init=False)


@dataclass
class DecisionTree:
    root: ProcessNode
    points: np.ndarray
    params: ReductionParams
    n: int
    c: float
    r: float
    K: int
    T: int
    eta: float

    def query(self, q, r_threshold: float | None = None) -> QueryStats:
        return query_decision_tree(self, q, r_threshold)

    def stats(self) -> dict:
        return tree_stats(self.root)


# --- builder -----------------------------------------------------------------------

class _Builder:
    def __init__(self, n: int, c: float, params: ReductionParams):
        self.p = params
        self.n = n
        self.c = c
        self.K = default_depth(n) if params.K is None else params.K
        self.T = int(math.ceil(n ** (params.rho_s / self.K) * (1.0 - 1e-12)))
        self.level_p = n ** (-1.0 / self.K)
        self.eta_single = caps.inv_tail(self.level_p)
        self.nodes = 0
        self.serial = 0
        self._eta_prime_cache: dict = {}
        self._eta_pair_cache: dict = {}

    def _count(self):
        self.nodes += 1
        if self.nodes > self.p.max_nodes:
            raise ResourceCapExceeded(f"decision tree exceeds max_nodes={self.p.max_nodes}")

    def eta_for(self, r2: float, R: float) -> float:
        if self.p.eta_convention == "single":
            return self.eta_single
        alpha = min(1.0, max(-1.0, 1.0 - (r2 / R) ** 2 / 2.0))
        key = alpha
        if key not in self._eta_pair_cache:
            log_target = math.log(self.level_p)
            if alpha >= 1.0:
                val = caps.inv_tail(self.level_p)
            elif log_target >= caps.log_joint_cap(-50.0, -50.0, alpha):
                val = -math.inf
            else:
                val = optimize.brentq(lambda e: caps.log_joint_cap(e, e, alpha) - log_target, -50.0, 50.0,
                                      xtol=1e-12)
            self._eta_pair_cache[key] = val
        return self._eta_pair_cache[key]

    def eta_prime_for(self, eta: float, r1: float, R: float) -> tuple[float, bool]:
        alpha = min(1.0, max(-1.0, 1.0 - (r1 / R) ** 2 / 2.0))
        key = (eta, alpha)
        if key not in self._eta_prime_cache:
            target = self.p.success_factor / self.T
            if math.isinf(eta) and eta < 0:
                val = (caps.inv_tail(target) if target < 1 else -math.inf, target >= 1)
            elif target >= caps.tail(eta).value:
                val = (-math.inf, True)
            else:
                val = (caps.inv_joint_cap_eta_prime(eta, alpha, target), False)
            self._eta_prime_cache[key] = val
        return self._eta_prime_cache[key]

    # -- sphere ------------------------------------------------------------------
    def sphere(self, ids, X, r1, r2, o, R, k, cdepth):
        self._count()
        if k >= self.K:
            return LeafStore(ids, k)
        if r2 >= 2.0 * R:
            return TrivialStore(int(ids[0]) if len(ids) else -1, k, r1, r2, R)
        if len(ids) <= self.p.leaf_size:
            return LeafStore(ids, k)
        clusters = []
        rest = np.arange(len(ids))
        if r2 < SQRT2 * R and cdepth < self.p.max_cluster_depth:
            rep = find_dense_clusters(X, o, R, self.p.eps, self.p.tau, self.p.min_cluster_size)
            bound = enclosing_radius_bound(self.p.eps, R) * (1.0 + 1e-9)
            for cl in rep.clusters:
                if cl.radius > bound:
                    raise AssertionError(f"cluster radius {cl.radius} exceeds (1 - eps^2/4) R = {bound}")
                child = self.ball(ids[cl.members], X[cl.members], r1, r2, cl.center, cl.radius, k,
                                  cdepth + 1, parent_R=R)
                clusters.append(ClusterChild(cl.center, cl.radius, child))
            rest = rep.remainder
        lsf = self.lsf(ids[rest], X[rest], r1, r2, o, R, k, cdepth) if len(rest) else None
        return SphereNode(o, R, r1, r2, k, len(ids), clusters, lsf)

    def lsf(self, ids, X, r1, r2, o, R, k, cdepth):
        self._count()
        eta = self.eta_for(r2, R)
        eta_prime, infeasible = self.eta_prime_for(eta, r1, R)
        U = unit_rows(X - o)
        self.serial += 1
        ss = np.random.SeedSequence(self.p.seed, spawn_key=(1, self.serial))
        Z = np.random.Generator(np.random.PCG64(ss)).standard_normal((self.T, U.shape[1])).astype(np.float32)
        ok = passes(U, Z, eta)
        live = np.nonzero(ok.any(axis=0))[0]
        children = [self.sphere(ids[ok[:, t]], X[ok[:, t]], r1, r2, o, R, k + 1, cdepth) for t in live]
        return LsfStep(eta, eta_prime, self.T, live.astype(np.int32), Z[live], children, k, infeasible)

    # -- ball --------------------------------------------------------------------
    def ball(self, ids, X, r1, r2, o, R, k, cdepth, parent_R=None):
        self._count()
        if r1 + 2.0 * R <= r2:
            return TrivialStore(int(ids[0]) if len(ids) else -1, k, r1, r2, R)
        if len(ids) <= self.p.leaf_size:
            return LeafStore(ids, k)
        delta = self.p.delta * R
        if delta <= 0:
            raise ValueError("delta must be positive")
        diff = X - o
        dist = np.linalg.norm(diff, axis=1)
        rings = np.maximum(1, np.ceil(dist / delta - 1e-12).astype(np.int64))
        dirs = unit_rows(diff)
        j_max = max(1, int(math.ceil((R + r1) / delta)))
        width = int(math.floor((r1 + 2.0 * delta) / delta + 1e-9))
        children = {}
        for i in np.unique(rings):
            sel = rings == i
            Ri = delta * i
            Xi = o + Ri * dirs[sel]
            for j in range(max(1, i - width), min(j_max, i + width) + 1):
                Rj = delta * j
                t1 = project_clamped(Ri, Rj, r1 + 2.0 * delta)
                t2 = project_clamped(Ri, Rj, r2 - 2.0 * delta)
                if t2 <= t1:
                    self._count()
                    children[(int(i), j)] = LeafStore(ids[sel], k)
                else:
                    children[(int(i), j)] = self.sphere(ids[sel], Xi, t1, t2, o, Ri, k, cdepth)
        return BallNode(o, R, r1, r2, k, delta, len(ids), children, parent_R)

    # -- top level ------------------------------------------------------------------
    def process(self, X, r, rng):
        self._count()
        n, d = X.shape
        r1, r2 = r, self.c * r
        side = (self.p.grid_cell if self.p.grid_cell is not None else 10.0 * math.sqrt(d) * self.c) * r
        shift = rng.uniform(0.0, side, size=d)
        keys = np.floor((X + shift) / side).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        top_radius = (self.p.top_cluster_radius if self.p.top_cluster_radius is not None
                      else self.c / SQRT2) * r
        cells = {}
        for ci in range(len(uniq)):
            ids = np.nonzero(inverse == ci)[0]
            Xc = X[ids]
            clusters = []
            need = cluster_threshold(len(ids), self.p.tau, self.p.min_cluster_size)
            taken = np.zeros(len(ids), dtype=bool)
            for seed, members in greedy_clusters(Xc, top_radius, need):
                cands = [Xc[seed], Xc[members].mean(axis=0)]
                radii = [float(np.sqrt(_sq_dists(Xc[members], cc[None])).max()) for cc in cands]
                b = int(np.argmin(radii))
                child = self.ball(ids[members], Xc[members], r1, r2, cands[b], radii[b], 0, 1)
                clusters.append(ClusterChild(cands[b], radii[b], child))
                taken[members] = True
            rest = np.nonzero(~taken)[0]
            o, M, child = None, 0.0, None
            if len(rest) <= max(1, self.p.leaf_size):
                if len(rest):
                    self._count()
                    child = LeafStore(ids[rest], 0)
            else:
                Xr = Xc[rest]
                o = sphere_fit(Xr)
                M = float(np.linalg.norm(Xr - o, axis=1).max())
                if M == 0.0:
                    self._count()
                    child = LeafStore(ids[rest], 0)
                else:
                    Y = embed_unit(Xr, o, M)
                    child = self.sphere(ids[rest], Y, r1 / M, r2 / M, np.zeros(d + 1), 1.0, 0, 0)
            key = tuple(int(v) for v in uniq[ci])
            cells[key] = CellEntry(key, clusters, o, M, child)
        return ProcessNode(shift, side, r1, r2, cells)


def embed_unit(X: np.ndarray, o: np.ndarray, M: float) -> np.ndarray:
    """Map points of B(o, M) onto the unit sphere in one more dimension.

    y -> [y - o, sqrt(M^2 - |y - o|^2)] / M, renormalized (points outside
    the ball get a zero extra coordinate and are pushed onto the sphere).
    """
    D = np.atleast_2d(X) - o
    sq = np.einsum("ij,ij->i", D, D)
    extra = np.sqrt(np.maximum(0.0, M * M - sq))
    Y = np.hstack([D, extra[:, None]]) / M
    return unit_rows(Y)


def process(points: np.ndarray, c: float, r: float = 1.0, params: ReductionParams | None = None) -> DecisionTree:
    """Build the decision tree for (c, r)-near-neighbor queries over arbitrary points."""
    params = ReductionParams() if params is None else params
    X = np.ascontiguousarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("points must be a nonempty 2-d array")
    if not c > 1.0:
        raise ValueError("c must exceed 1")
    if not r > 0:
        raise ValueError("r must be positive")
    b = _Builder(len(X), c, params)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(params.seed, spawn_key=(0,))))
    root = b.process(X, r, rng)
    return DecisionTree(root, X, params, len(X), float(c), float(r), b.K, b.T, b.eta_single)


def process_sphere(points: np.ndarray, r1: float, r2: float, o, R: float, k: int = 0, *, n: int | None = None,
                   c: float = 2.0, params: ReductionParams | None = None):
    """Run the sphere procedure alone on points of dB(o, R); ids are row indices."""
    params = ReductionParams() if params is None else params
    X = np.asarray(points, dtype=np.float64)
    if r1 >= r2:
        raise ValueError("need r1 < r2")
    b = _Builder(n or len(X), c, params)
    return b.sphere(np.arange(len(X)), X, r1, r2, np.asarray(o, dtype=np.float64), R, k, 0)


def process_ball(points: np.ndarray, r1: float, r2: float, o, R: float, k: int = 0, *, n: int | None = None,
                 c: float = 2.0, params: ReductionParams | None = None):
    """Run the ball procedure alone on points of B(o, R); ids are row indices."""
    params = ReductionParams() if params is None else params
    X = np.asarray(points, dtype=np.float64)
    b = _Builder(n or len(X), c, params)
    return b.ball(np.arange(len(X)), X, r1, r2, np.asarray(o, dtype=np.float64), R, k, 0)


# --- query ----------------------------------------------------------------------------

class _Found(Exception):
    pass


class _Query:
    def __init__(self, points, q, r_threshold):
        self.P = points
        self.q = q
        self.r2 = r_threshold * r_threshold
        self.stats = QueryStats()

    def check(self, ids):
        if len(ids) == 0:
            return
        diff = self.P[ids] - self.q
        d2 = np.einsum("ij,ij->i", diff, diff)
        hit = np.nonzero(d2 <= self.r2)[0]
        if len(hit):
            k = int(hit[0])
            self.stats.candidates_scanned += k + 1
            self.stats.result = int(ids[k])
            self.stats.distance_found = float(math.sqrt(d2[k]))
            raise _Found
        self.stats.candidates_scanned += len(ids)

    def node(self, node, qf):
        kind = node.kind
        if kind == "leaf-store":
            self.check(node.ids)
        elif kind == "trivial-store":
            if node.rep >= 0:
                self.check(np.array([node.rep]))
        elif kind == "process_sphere":
            for cl in node.clusters:
                self.node(cl.child, qf)
            if node.lsf is not None:
                self.lsf(node.lsf, node, qf)
        elif kind == "process_ball":
            self.ball(node, qf)
        else:
            raise ValueError(f"unexpected node kind {kind}")

    def lsf(self, step, sphere, qf):
        if len(step.children) == 0:
            return
        u = unit_rows((qf - sphere.o)[None, :])
        self.stats.inner_products += len(step.children)
        ok = passes(u, step.dirs, step.eta_prime)[0]
        for t in np.nonzero(ok)[0]:
            self.stats.nodes_visited += 1
            self.node(step.children[t], qf)

    def ball(self, node, qf):
        diff = qf - node.o
        dist = float(np.linalg.norm(diff))
        self.stats.inner_products += 1
        if dist > node.R + node.r1:
            return
        self.stats.nodes_visited += 1
        j = max(1, int(math.ceil(dist / node.delta - 1e-12)))
        u = diff / dist if dist > 0 else np.eye(len(diff))[0]
        for (i, jj), child in node.children.items():
            if jj == j:
                self.node(child, node.o + node.delta * i * u)


def query_decision_tree(tree: DecisionTree, q, r_threshold: float | None = None) -> QueryStats:
    """Query the decision tree; returns the first verified point within r_threshold (default c r)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (tree.points.shape[1],):
        raise ValueError(f"query must have shape ({tree.points.shape[1]},)")
    r_threshold = tree.root.r2 if r_threshold is None else r_threshold
    run = _Query(tree.points, q, r_threshold)
    root = tree.root
    key = tuple(int(v) for v in np.floor((q + root.shift) / root.cell_side).astype(np.int64))
    cell = root.cells.get(key)
    if cell is None:
        return run.stats
    try:
        for cl in cell.clusters:
            run.node(cl.child, q)
        if cell.child is not None:
            if cell.o is None:
                run.node(cell.child, q)
            else:
                run.stats.nodes_visited += 1
                run.node(cell.child, embed_unit(q[None, :], cell.o, cell.M)[0])
    except _Found:
        pass
    return run.stats


# --- inspection -------------------------------------------------------------------------

def children_of(node):
    kind = node.kind
    if kind == "process":
        out = []
        for cell in node.cells.values():
            out += [cl.child for cl in cell.clusters]
            if cell.child is not None:
                out.append(cell.child)
        return out
    if kind == "process_sphere":
        return [cl.child for cl in node.clusters] + ([node.lsf] if node.lsf is not None else [])
    if kind == "lsf-step":
        return list(node.children)
    if kind == "process_ball":
        return list(node.children.values())
    return []


def walk(node, depth=0, parent=None):
    """Pre-order traversal yielding (node, parent, depth)."""
    stack = [(node, parent, depth)]
    while stack:
        cur, par, dep = stack.pop()
        yield cur, par, dep
        for ch in reversed(children_of(cur)):
            stack.append((ch, cur, dep + 1))


def tree_stats(root) -> dict:
    counts: dict = {}
    stored = 0
    for node, _, _ in walk(root):
        counts[node.kind] = counts.get(node.kind, 0) + 1
        if node.kind == "leaf-store":
            stored += len(node.ids)
        elif node.kind == "trivial-store" and node.rep >= 0:
            stored += 1
    nodes = sum(counts.values())
    return {"nodes": nodes, "stored_ids": stored, "space": nodes + stored, "kinds": counts,
            "max_lsf_steps": max_lsf_steps(root)}


def max_lsf_steps(root) -> int:
    best = 0
    stack = [(root, 0)]
    while stack:
        node, steps = stack.pop()
        if node.kind == "lsf-step":
            steps += 1
        best = max(best, steps)
        stack.extend((ch, steps) for ch in children_of(node))
    return best


def to_dot(root, max_nodes: int = 5000) -> str:
    lines = ["digraph decision_tree {", "  node [shape=box, fontsize=9];"]
    ids: dict = {}
    for node, parent, _ in walk(root):
        if len(ids) >= max_nodes:
            lines.append(f'  truncated [label="... truncated at {max_nodes} nodes"];')
            break
        ids[id(node)] = len(ids)
        label = node.kind
        if node.kind == "leaf-store":
            label += f"\\n|P|={len(node.ids)} k={node.k}"
        elif node.kind in ("process_sphere", "process_ball"):
            label += f"\\nR={node.R:.3g} |P|={node.size} k={node.k}"
        elif node.kind == "lsf-step":
            label += f"\\nT={node.T} kids={len(node.children)} k={node.k}"
        lines.append(f'  n{ids[id(node)]} [label="{label}"];')
        if parent is not None and id(parent) in ids:
            lines.append(f"  n{ids[id(parent)]} -> n{ids[id(node)]};")
    lines.append("}")
    return "\n".join(lines)


# --- serialization ---------------------------------------------------------------------------

def save_decision_tree(tree: DecisionTree, path) -> Path:
    """npz archive: a JSON node table (kind tags, scalars, child indices) plus one array per stored vector field."""
    arrays: dict = {}
    table = []
    index: dict = {}

    def put(name, arr, dtype):
        key = f"a{len(arrays)}"
        arrays[key] = np.asarray(arr, dtype=dtype)
        return key

    order = [node for node, _, _ in walk(tree.root)]
    for i, node in enumerate(order):
        index[id(node)] = i
    for node in order:
        k = node.kind
        rec: dict = {"kind": k}
        if k == "leaf-store":
            rec.update(ids=put("ids", node.ids, np.int64), k=node.k)
        elif k == "trivial-store":
            rec.update(rep=node.rep, k=node.k, r1=node.r1, r2=node.r2, R=node.R)
        elif k == "lsf-step":
            rec.update(eta=node.eta, eta_prime=node.eta_prime, T=node.T, k=node.k, infeasible=node.infeasible,
                       slots=put("slots", node.slots, np.int32), dirs=put("dirs", node.dirs, np.float32),
                       children=[index[id(ch)] for ch in node.children])
        elif k == "process_sphere":
            rec.update(o=put("o", node.o, np.float64), R=node.R, r1=node.r1, r2=node.r2, k=node.k, size=node.size,
                       clusters=[[put("c", cl.center, np.float64), cl.radius, index[id(cl.child)]]
                                 for cl in node.clusters],
                       lsf=None if node.lsf is None else index[id(node.lsf)])
        elif k == "process_ball":
            rec.update(o=put("o", node.o, np.float64), R=node.R, r1=node.r1, r2=node.r2, k=node.k,
                       delta=node.delta, size=node.size, parent_R=node.parent_R,
                       children=[[int(i), int(j), index[id(ch)]] for (i, j), ch in node.children.items()])
        elif k == "process":
            rec.update(shift=put("shift", node.shift, np.float64), cell_side=node.cell_side, r1=node.r1,
                       r2=node.r2,
                       cells=[{"key": list(cell.key),
                               "clusters": [[put("c", cl.center, np.float64), cl.radius, index[id(cl.child)]]
                                            for cl in cell.clusters],
                               "o": None if cell.o is None else put("o", cell.o, np.float64), "M": cell.M,
                               "child": None if cell.child is None else index[id(cell.child)]}
                              for cell in node.cells.values()])
        table.append(rec)
    p = tree.params
    meta = {"format": "lsfann-decision-tree", "version": 1, "n": tree.n, "c": tree.c, "r": tree.r, "K": tree.K,
            "T": tree.T, "eta": tree.eta, "params": {f: getattr(p, f) for f in p.__dataclass_fields__}}
    buf = {"table": np.frombuffer(json.dumps({"meta": meta, "nodes": table}).encode(), dtype=np.uint8),
           "points": tree.points, **arrays}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **buf)
    return path


def load_decision_tree(path) -> DecisionTree:
    with np.load(path) as z:
        doc = json.loads(bytes(z["table"]).decode())
        arrays = {k: z[k] for k in z.files if k not in ("table",)}
    meta, table = doc["meta"], doc["nodes"]
    if meta.get("format") != "lsfann-decision-tree":
        raise ValueError(f"{path}: not a decision-tree archive")
    built: list = [None] * len(table)
    for i in range(len(table) - 1, -1, -1):  # children always follow parents in pre-order
        rec = table[i]
        k = rec["kind"]
        if k == "leaf-store":
            built[i] = LeafStore(arrays[rec["ids"]], rec["k"])
        elif k == "trivial-store":
            built[i] = TrivialStore(rec["rep"], rec["k"], rec["r1"], rec["r2"], rec["R"])
        elif k == "lsf-step":
            built[i] = LsfStep(rec["eta"], rec["eta_prime"], rec["T"], arrays[rec["slots"]], arrays[rec["dirs"]],
                               [built[c] for c in rec["children"]], rec["k"], rec["infeasible"])
        elif k == "process_sphere":
            built[i] = SphereNode(arrays[rec["o"]], rec["R"], rec["r1"], rec["r2"], rec["k"], rec["size"],
                                  [ClusterChild(arrays[a], rad, built[c]) for a, rad, c in rec["clusters"]],
                                  None if rec["lsf"] is None else built[rec["lsf"]])
        elif k == "process_ball":
            built[i] = BallNode(arrays[rec["o"]], rec["R"], rec["r1"], rec["r2"], rec["k"], rec["delta"], rec["size"],
                                {(a, b): built[c] for a, b, c in rec["children"]}, rec["parent_R"])
        elif k == "process":
            cells = {}
            for cr in rec["cells"]:
                key = tuple(cr["key"])
                cells[key] = CellEntry(key, [ClusterChild(arrays[a], rad, built[c]) for a, rad, c in cr["clusters"]],
                                       None if cr["o"] is None else arrays[cr["o"]], cr["M"],
                                       None if cr["child"] is None else built[cr["child"]])
            built[i] = ProcessNode(arrays[rec["shift"]], rec["cell_side"], rec["r1"], rec["r2"], cells)
        else:
            raise ValueError(f"unknown node kind {k}")
    params = ReductionParams(**meta["params"])
    return DecisionTree(built[0], arrays["points"], params, meta["n"], meta["c"], meta["r"], meta["K"], meta["T"],
                        meta["eta"])


# --- dimension reduction ----------------------------------------------------------------------

def jl_target_dimension(n: int) -> int:
    lg = math.log2(max(n, 4))
    return max(2, math.ceil(lg * math.log2(lg)))


def jl_project(points: np.ndarray, target_d: int | None = None, seed: int = 0) -> np.ndarray:
    """Gaussian random projection scaled by 1/sqrt(k); not applied by ``process`` unless the caller does."""
    X = np.asarray(points, dtype=np.float64)
    k = jl_target_dimension(len(X)) if target_d is None else int(target_d)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2,))))
    G = rng.standard_normal((X.shape[1], k)) / math.sqrt(k)
    return X @ G


def jl_distortion(X: np.ndarray, Y: np.ndarray, pairs: int = 2000, seed: int = 0) -> float:
    """Largest |(projected distance / original distance) - 1| over random pairs."""
    rng = np.random.default_rng(seed)
    i = rng.integers(len(X), size=pairs)
    j = rng.integers(len(X), size=pairs)
    keep = i != j
    a = np.linalg.norm(X[i[keep]] - X[j[keep]], axis=1)
    b = np.linalg.norm(Y[i[keep]] - Y[j[keep]], axis=1)
    ok = a > 0
    return float(np.abs(b[ok] / a[ok] - 1.0).max()) if ok.any() else 0.0
