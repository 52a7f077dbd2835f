"""Gaussian-filter tree for near-neighbor search on the sphere.

A tree of depth K and branching factor T. Every non-root node v holds a
Gaussian direction z_v ~ N(0, I_d); a data point p is stored in leaf v iff
<z_u, p> >= eta * R for every non-root node u on the path to v, and a query
q descends into every child u with <z_u, q> >= eta' * R.

Only nodes with a nonempty point set are materialized ("pruned build"). The
T x d block of child directions of a node is drawn from a stream keyed by
the node's path (slot indices from the root), so the directions of a node
never depend on which other nodes exist, and any block can be regenerated.

Membership is decided by :func:`passes`, whose value is defined by a
fixed-order dot product; BLAS is used only where its rounding cannot change
the outcome, so rebuilding or re-verifying always reproduces the same sets.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import caps
from .fit import loglog_fit

DEFAULT_SUCCESS_FACTOR = 100.0
DEFAULT_MAX_TREE_NODES = 6_000_000

# Entries whose BLAS score lies within this (relative) band of the threshold
# are re-decided with the fixed-order dot product. BLAS error for d <= 10^4
# is below 1e-12 relative, far inside the band.
_AMBIGUITY_BAND = 1e-9


class InfeasibleParameters(ValueError):
    """No thresholds satisfy the requested success factor for this (n, K, T)."""


class ResourceCapExceeded(RuntimeError):
    """The build would materialize more nodes than allowed."""


@dataclass(frozen=True)
class TreeParams:
    K: int
    T: int
    eta: float
    eta_prime: float
    R: float = 1.0
    rho_s: float = 1.0
    seed: int = 0
    max_tree_nodes: int = DEFAULT_MAX_TREE_NODES
    c: float = math.nan
    n: int = 0
    success_factor: float = DEFAULT_SUCCESS_FACTOR

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be >= 1")
        if math.isnan(self.eta) or math.isnan(self.eta_prime):
            raise ValueError("thresholds must not be NaN")
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.rho_s < 1.0 - 1e-12:
            raise ValueError("rho_s must be >= 1")

    @property
    def alpha(self) -> float:
        return caps.planted_alpha(self.c)

    @property
    def survival(self) -> float:
        """Per-level probability tail(eta) that a point passes one filter."""
        return caps.tail(self.eta).value

    @property
    def joint_survival(self) -> float:
        """Per-level probability that a planted pair passes one filter (data and query side)."""
        return caps.joint_cap(self.eta, self.eta_prime, self.alpha).value


def default_depth(n: int) -> int:
    return max(1, int(round(math.sqrt(math.log2(n)))))


def select_params(n: int, c: float, R: float = 1.0, rho_s: float = 1.0, *, K: int | None = None,
                  success_factor: float = DEFAULT_SUCCESS_FACTOR, seed: int = 0,
                  max_tree_nodes: int = DEFAULT_MAX_TREE_NODES) -> TreeParams:
    """Thresholds and shape for a target space exponent rho_s.

    K = round(sqrt(log2 n)) (overridable), tail(eta) = n^(-1/K),
    T = ceil(n^(rho_s/K)), and eta' is the largest threshold with
    joint_cap(eta, eta', 1 - 1/c^2) >= success_factor / T. eta' may come out
    negative; it is not clamped, since clamping would break the success
    guarantee. Raises :class:`InfeasibleParameters` when success_factor / T
    is at least tail(eta), the largest value joint_cap can reach.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if not c > 1.0:
        raise ValueError("c must exceed 1")
    if rho_s < 1.0:
        raise ValueError("rho_s must be >= 1")
    K = default_depth(n) if K is None else int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    level_p = n ** (-1.0 / K)
    eta = caps.inv_tail(level_p)
    T = int(math.ceil(n ** (rho_s / K) * (1.0 - 1e-12)))
    target = success_factor / T
    limit = caps.tail(eta).value
    if target >= limit:
        raise InfeasibleParameters(
            f"success_factor/T = {success_factor}/{T} = {target:.4g} is not below tail(eta) = {limit:.4g} "
            f"(n={n}, K={K}, rho_s={rho_s}); need success_factor < T * tail(eta) = {T * limit:.4g}")
    eta_prime = caps.inv_joint_cap_eta_prime(eta, caps.planted_alpha(c), target)
    return TreeParams(K=K, T=T, eta=eta, eta_prime=eta_prime, R=float(R), rho_s=float(rho_s),
                      seed=int(seed), max_tree_nodes=int(max_tree_nodes), c=float(c), n=int(n),
                      success_factor=float(success_factor))


# --- filter evaluation --------------------------------------------------------

def canonical_scores(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """X @ Z.T accumulated coordinate by coordinate in a fixed order.

    The value of each entry depends only on its own row and column, never on
    the shapes of X and Z, which makes it the reference for membership.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    out = X[:, 0:1] * Z[None, :, 0]
    for j in range(1, X.shape[1]):
        out += X[:, j:j + 1] * Z[None, :, j]
    return out


def passes(X: np.ndarray, Z: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean matrix [i, t]: canonical <X_i, Z_t> >= threshold."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if math.isinf(threshold):
        return np.full((X.shape[0], Z.shape[0]), threshold < 0)
    fast = X @ Z.T
    out = fast >= threshold
    scale = np.abs(X).sum(axis=1)[:, None] * np.abs(Z).max(axis=1)[None, :] + abs(threshold) + 1e-300
    close = np.abs(fast - threshold) <= _AMBIGUITY_BAND * scale
    if close.any():
        rows, cols = np.nonzero(close)
        for i in np.unique(rows):
            sel = cols[rows == i]
            out[i, sel] = canonical_scores(X[i:i + 1], Z[sel])[0] >= threshold
    return out


def child_directions(seed: int, path: tuple[int, ...], T: int, d: int) -> np.ndarray:
    """The T x d block of child directions of the node at ``path`` (float32)."""
    ss = np.random.SeedSequence(seed, spawn_key=(len(path), *path))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal((T, d)).astype(np.float32)


# --- tree -----------------------------------------------------------------------

@dataclass
class Level:
    """Materialized nodes of one depth, grouped contiguously by parent."""
    parent: np.ndarray        # index into the previous level (root level: all 0)
    slot: np.ndarray          # child slot 0..T-1 within the parent's block
    dirs: np.ndarray          # float32 directions, one row per node
    child_start: np.ndarray   # range of this node's children in the next level
    child_end: np.ndarray

    @property
    def size(self) -> int:
        return len(self.parent)


@dataclass
class QueryStats:
    nodes_visited: int = 0
    inner_products: int = 0
    candidates_scanned: int = 0
    result: int | None = None
    distance_found: float | None = None

    @property
    def found(self) -> bool:
        return self.result is not None

    @property
    def work(self) -> int:
        return self.candidates_scanned + self.nodes_visited


@dataclass
class FilterTree:
    params: TreeParams
    d: int
    levels: list[Level]
    bucket_offsets: np.ndarray    # CSR over leaves (last level)
    bucket_ids: np.ndarray
    points: np.ndarray | None = field(default=None, repr=False)

    @property
    def node_count(self) -> int:
        return sum(lv.size for lv in self.levels)

    @property
    def leaf_count(self) -> int:
        return self.levels[-1].size if self.levels else 0

    @property
    def bucket_mass(self) -> int:
        return int(len(self.bucket_ids))

    @property
    def space(self) -> int:
        """Materialized nodes plus stored point ids."""
        return self.node_count + self.bucket_mass

    def stats(self) -> dict:
        return {"nodes": self.node_count, "leaves": self.leaf_count, "bucket_mass": self.bucket_mass,
                "level_sizes": [lv.size for lv in self.levels]}

    def node_path(self, level: int, index: int) -> tuple[int, ...]:
        """Slot path (from the root) of node ``index`` at depth ``level`` (1-based)."""
        path = []
        for lv in range(level, 0, -1):
            path.append(int(self.levels[lv - 1].slot[index]))
            index = int(self.levels[lv - 1].parent[index])
        return tuple(reversed(path))

    def bucket(self, leaf: int) -> np.ndarray:
        return self.bucket_ids[self.bucket_offsets[leaf]:self.bucket_offsets[leaf + 1]]

    def query(self, q: np.ndarray, r_threshold: float, trace: list | None = None) -> QueryStats:
        return query(self, q, r_threshold, trace)


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, e) for each pair."""
    lengths = ends - starts
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offs = np.repeat(starts - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
    return np.arange(total, dtype=np.int64) + offs


def build(points: np.ndarray, params: TreeParams) -> FilterTree:
    """Build the pruned tree over ``points`` (rows on the radius-R sphere)."""
    X = np.ascontiguousarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n, d = X.shape
    norms = np.linalg.norm(X, axis=1) if n else np.empty(0)
    if n and not np.allclose(norms, params.R, rtol=1e-6, atol=0):
        raise ValueError(f"points must lie on the sphere of radius R={params.R}")
    thr = params.eta * params.R if not math.isinf(params.eta) else params.eta
    T = params.T

    # members of the nodes of the current level, CSR
    cur_offsets = np.array([0, n], dtype=np.int64)
    cur_ids = np.arange(n, dtype=np.int64)
    cur_paths: list[tuple[int, ...]] = [()]
    levels: list[Level] = []
    total_nodes = 0
    for depth in range(1, params.K + 1):
        parents, slots, dirs, new_paths = [], [], [], []
        member_chunks, sizes = [], []
        child_start = np.zeros(len(cur_paths), dtype=np.int64)
        child_end = np.zeros(len(cur_paths), dtype=np.int64)
        made = 0
        for pi, path in enumerate(cur_paths):
            child_start[pi] = made
            ids = cur_ids[cur_offsets[pi]:cur_offsets[pi + 1]]
            if len(ids) == 0:
                child_end[pi] = made
                continue
            Z = child_directions(params.seed, path, T, d)
            ok = passes(X[ids], Z, thr)
            counts = ok.sum(axis=0)
            live = np.nonzero(counts)[0]
            if total_nodes + made + len(live) > params.max_tree_nodes:
                raise ResourceCapExceeded(
                    f"build exceeds max_tree_nodes={params.max_tree_nodes} at depth {depth}")
            for t in live:
                parents.append(pi)
                slots.append(t)
                new_paths.append(path + (int(t),))
                member_chunks.append(ids[ok[:, t]])
                sizes.append(int(counts[t]))
            if len(live):
                dirs.append(Z[live])
            made += len(live)
            child_end[pi] = made
        if levels:
            levels[-1].child_start = child_start
            levels[-1].child_end = child_end
        total_nodes += made
        levels.append(Level(
            parent=np.asarray(parents, dtype=np.int64),
            slot=np.asarray(slots, dtype=np.int32),
            dirs=np.concatenate(dirs) if dirs else np.empty((0, d), dtype=np.float32),
            child_start=np.zeros(made, dtype=np.int64),
            child_end=np.zeros(made, dtype=np.int64)))
        cur_offsets = np.concatenate(([0], np.cumsum(sizes, dtype=np.int64))) if sizes else np.zeros(1, np.int64)
        cur_ids = np.concatenate(member_chunks) if member_chunks else np.empty(0, dtype=np.int64)
        cur_paths = new_paths
    return FilterTree(params, d, levels, cur_offsets, cur_ids, X)


def query(tree: FilterTree, q: np.ndarray, r_threshold: float, trace: list | None = None) -> QueryStats:
    """Descend every child whose filter q passes; scan leaf buckets for a point within r_threshold.

    Counters: ``inner_products`` counts materialized children whose filter is
    evaluated, ``nodes_visited`` those that q passes, ``candidates_scanned``
    every bucket entry examined (duplicates across leaves included) up to and
    including the first hit. If ``trace`` is a list, the visited node indices
    of each level are appended to it.
    """
    qv = np.asarray(q, dtype=np.float64).reshape(1, -1)
    if qv.shape[1] != tree.d:
        raise ValueError(f"query has dimension {qv.shape[1]}, tree expects {tree.d}")
    stats = QueryStats()
    if tree.leaf_count == 0:
        return stats
    p = tree.params
    thr = p.eta_prime * p.R if not math.isinf(p.eta_prime) else p.eta_prime
    frontier = np.zeros(1, dtype=np.int64)
    for depth, lv in enumerate(tree.levels):
        if depth == 0:
            cand = np.arange(lv.size, dtype=np.int64)
        else:
            prev = tree.levels[depth - 1]
            cand = _ranges(prev.child_start[frontier], prev.child_end[frontier])
        stats.inner_products += len(cand)
        if len(cand) == 0:
            frontier = cand
            break
        ok = passes(qv, lv.dirs[cand], thr)[0]
        frontier = cand[ok]
        stats.nodes_visited += len(frontier)
        if trace is not None:
            trace.append(frontier.copy())
        if len(frontier) == 0:
            break
    if len(frontier) == 0 or len(tree.levels) == 0 or tree.points is None:
        return stats
    # candidates in leaf order, scanned in growing chunks until the first hit
    order = tree.bucket_ids[_ranges(tree.bucket_offsets[frontier], tree.bucket_offsets[frontier + 1])]
    r2 = r_threshold * r_threshold
    start, chunk = 0, 256
    while start < len(order):
        ids = order[start:start + chunk]
        diff = tree.points[ids] - qv
        dist2 = np.einsum("ij,ij->i", diff, diff)
        hit = np.nonzero(dist2 <= r2)[0]
        if len(hit):
            k = int(hit[0])
            stats.candidates_scanned += k + 1
            stats.result = int(ids[k])
            stats.distance_found = float(math.sqrt(dist2[k]))
            return stats
        stats.candidates_scanned += len(ids)
        start += chunk
        chunk = min(chunk * 4, 65536)
    return stats


# --- verification ---------------------------------------------------------------

def verify_buckets(tree: FilterTree, points: np.ndarray | None = None, check_pruned: bool = True) -> None:
    """Re-derive every node's point set from stored directions and compare exactly.

    For each materialized node the set of parent members passing its filter
    must equal the set recorded by the build; with ``check_pruned`` every
    child slot that was not materialized is regenerated from its path seed
    and must be passed by no parent member. Raises AssertionError on mismatch.
    """
    X = tree.points if points is None else np.asarray(points, dtype=np.float64)
    p = tree.params
    thr = p.eta * p.R if not math.isinf(p.eta) else p.eta
    n = X.shape[0]
    members = [np.arange(n, dtype=np.int64)]   # members of nodes at the previous depth
    for depth, lv in enumerate(tree.levels, start=1):
        new_members = []
        for i in range(lv.size):
            parent_members = members[int(lv.parent[i])]
            ok = passes(X[parent_members], lv.dirs[i:i + 1].astype(np.float64), thr)[:, 0]
            got = parent_members[ok]
            if len(got) == 0:
                raise AssertionError(f"materialized node {depth}:{i} has an empty point set")
            new_members.append(got)
        if check_pruned:
            prev_size = 1 if depth == 1 else tree.levels[depth - 2].size
            for pi in range(prev_size):
                if depth == 1:
                    path, kids = (), np.arange(lv.size)
                else:
                    prev = tree.levels[depth - 2]
                    path = tree.node_path(depth - 1, pi)
                    kids = np.arange(prev.child_start[pi], prev.child_end[pi])
                Z = child_directions(p.seed, path, p.T, tree.d)
                stored = set(int(s) for s in lv.slot[kids])
                if not np.array_equal(Z[sorted(stored)], lv.dirs[kids][np.argsort(lv.slot[kids])]):
                    raise AssertionError(f"stored directions under {path} differ from their seed")
                missing = [t for t in range(p.T) if t not in stored]
                if missing and len(members[pi]):
                    ok = passes(X[members[pi]], Z[missing].astype(np.float64), thr)
                    if ok.any():
                        raise AssertionError(f"pruned child under {path} has a nonempty point set")
        members = new_members
    for leaf in range(tree.leaf_count):
        if not np.array_equal(np.sort(tree.bucket(leaf)), np.sort(members[leaf])):
            raise AssertionError(f"leaf {leaf} bucket differs from its filter predicate")


# --- exponents --------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentFit:
    rho_q_hat: float
    rho_u_hat: float
    work_stderr: float
    space_stderr: float

    @property
    def space_slope(self) -> float:
        return 1.0 + self.rho_u_hat

    def __iter__(self):
        return iter((self.rho_q_hat, self.rho_u_hat))


def measured_exponents(ns, work, space) -> ExponentFit:
    """Slopes of log(work) and log(space) against log(n); space slope = 1 + rho_u."""
    w = loglog_fit(ns, work)
    s = loglog_fit(ns, space)
    return ExponentFit(w.slope, s.slope - 1.0, w.stderr, s.stderr)


# --- serialization --------------------------------------------------------------------

TREE_MAGIC = b"LSFTREE\0"
TREE_VERSION = 1
_TREE_HEADER = struct.Struct("<8sIIqqqddddqqdd")
# magic, version, K, T, d, n, eta, eta_prime, R, rho_s, seed, max_tree_nodes, c, success_factor


def save_tree(tree: FilterTree, path) -> Path:
    """Flat little-endian layout.

    Header ``<8s I I q q q d d d d q q d d``: magic ``LSFTREE\\0``, version,
    K, T, d, n, eta, eta', R, rho_s, seed, max_tree_nodes, c,
    success_factor. Then for each depth 1..K: node count (q) followed by
    parent (q[]), slot (i[]), child_start (q[]), child_end (q[]) and the
    directions (f32[count * d], row-major). Finally the leaf bucket table:
    offsets (q[leaves + 1]) and ids (q[mass]). Points are not stored.
    """
    p = tree.params
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_TREE_HEADER.pack(TREE_MAGIC, TREE_VERSION, p.K, p.T, tree.d, p.n, p.eta, p.eta_prime,
                                   p.R, p.rho_s, p.seed, p.max_tree_nodes, p.c, p.success_factor))
        for lv in tree.levels:
            fh.write(struct.pack("<q", lv.size))
            for arr, dt in ((lv.parent, "<i8"), (lv.slot, "<i4"), (lv.child_start, "<i8"),
                            (lv.child_end, "<i8"), (lv.dirs, "<f4")):
                fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        fh.write(struct.pack("<q", len(tree.bucket_offsets)))
        fh.write(np.ascontiguousarray(tree.bucket_offsets, dtype="<i8").tobytes())
        fh.write(struct.pack("<q", len(tree.bucket_ids)))
        fh.write(np.ascontiguousarray(tree.bucket_ids, dtype="<i8").tobytes())
    return path


def load_tree(path, points: np.ndarray | None = None) -> FilterTree:
    raw = Path(path).read_bytes()
    (magic, version, K, T, d, n, eta, eta_prime, R, rho_s, seed, cap, c, sf) = _TREE_HEADER.unpack_from(raw)
    if magic != TREE_MAGIC:
        raise ValueError(f"{path}: not a filter-tree file")
    if version != TREE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    params = TreeParams(K=K, T=T, eta=eta, eta_prime=eta_prime, R=R, rho_s=rho_s, seed=seed,
                        max_tree_nodes=cap, c=c, n=n, success_factor=sf)
    off = _TREE_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype, count, off).copy()
        off += arr.nbytes
        return arr

    levels = []
    for _ in range(K):
        (m,) = struct.unpack_from("<q", raw, off)
        off += 8
        parent = take("<i8", m)
        slot = take("<i4", m)
        cs = take("<i8", m)
        ce = take("<i8", m)
        dirs = take("<f4", m * d).reshape(m, d)
        levels.append(Level(parent, slot, dirs, cs, ce))
    (lo,) = struct.unpack_from("<q", raw, off)
    off += 8
    offsets = take("<i8", lo)
    (li,) = struct.unpack_from("<q", raw, off)
    off += 8
    ids = take("<i8", li)
    pts = None if points is None else np.ascontiguousarray(points, dtype=np.float64)
    return FilterTree(params, d, levels, offsets, ids, pts)


def params_dict(p: TreeParams) -> dict:
    return asdict(p)
