"""Planted random ANN instances on the hypercube and the sphere.

RNG layout: every instance draws from ``numpy.random.PCG64`` streams derived
from one ``SeedSequence(seed)`` by spawn keys. Points use key ``(0,)``; query
``j`` uses key ``(1, j)``, so query ``j`` does not depend on how many queries
were requested and queries can be generated in any order or in parallel.
Bit-level reproducibility is promised only for this implementation.

Hamming points are stored packed, 64 coordinates per ``uint64`` word, bit
``i`` of word ``w`` holding coordinate ``64 w + i``; a set bit means ``-1``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

STREAM_POINTS = 0
STREAM_QUERIES = 1
STREAM_EXTRA = 2

MAGIC = b"LSFINST\0"
FORMAT_VERSION = 1
_METRIC_CODES = {"hamming": 0, "sphere": 1, "euclidean": 2}
_HEADER = struct.Struct("<8sIIqqqdqd")  # magic, version, metric, n, d, q_count, c, seed, R


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def default_dimension(n: int) -> int:
    """ceil(log2 n * log2 log2 n), at least 2."""
    lg = math.log2(max(n, 4))
    return max(2, math.ceil(lg * math.log2(lg)))


def words_for(d: int) -> int:
    return (d + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (m, d) boolean array into (m, ceil(d/64)) uint64 words (little-endian bit order)."""
    bits = np.asarray(bits, dtype=bool)
    m, d = bits.shape
    w = words_for(d)
    padded = np.zeros((m, w * 64), dtype=bool)
    padded[:, :d] = bits
    as_bytes = np.packbits(padded.reshape(m, w * 8, 8), axis=-1, bitorder="little")
    return as_bytes.reshape(m, w * 8).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, d: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    m = words.shape[0]
    as_bytes = words.view(np.uint8).reshape(m, -1)
    return np.unpackbits(as_bytes, axis=-1, bitorder="little")[:, :d].astype(bool)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Popcount Hamming distance between packed rows; broadcasts over leading axes."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


def hamming_cross(queries: np.ndarray, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    """All-pairs Hamming distances, shape (len(queries), len(points))."""
    out = np.empty((len(queries), len(points)), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        out[s:s + chunk] = hamming_distance(q[:, None, :], points[None, :, :])
    return out


def to_pm1(words: np.ndarray, d: int) -> np.ndarray:
    """Packed bits -> {-1, +1} float matrix (set bit = -1)."""
    return 1.0 - 2.0 * unpack_bits(words, d)


@dataclass(frozen=True, eq=False)
class HammingInstance:
    n: int
    d: int
    c: float
    points: np.ndarray       # (n, words) uint64
    queries: np.ndarray      # (q, words) uint64
    planted: np.ndarray      # (q,) int64 ids into points
    seed: int
    metric: str = field(default="hamming", init=False)

    @property
    def flip_probability(self) -> float:
        return 1.0 / (2.0 * self.c)

    @property
    def near_radius(self) -> float:
        """Expected planted distance d/(2c)."""
        return self.d / (2.0 * self.c)

    def point_bits(self) -> np.ndarray:
        return unpack_bits(self.points, self.d)

    def query_pairs(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.queries, self.planted.tolist()))


@dataclass(frozen=True, eq=False)
class SphereInstance:
    n: int
    d: int
    c: float
    R: float
    points: np.ndarray       # (n, d) float64, norm R
    queries: np.ndarray      # (q, d) float64, norm R
    planted: np.ndarray      # (q,) int64
    seed: int
    metric: str = field(default="sphere", init=False)

    @property
    def near_radius(self) -> float:
        """Cap radius sqrt(2) R / c that bounds every planted distance."""
        return math.sqrt(2.0) * self.R / self.c

    def query_pairs(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.queries, self.planted.tolist()))


@dataclass(frozen=True, eq=False)
class EuclideanInstance:
    """Arbitrary points in R^d with planted near queries (worst-case tests)."""
    n: int
    d: int
    c: float
    r: float
    points: np.ndarray
    queries: np.ndarray
    planted: np.ndarray
    seed: int
    metric: str = field(default="euclidean", init=False)

    @property
    def near_radius(self) -> float:
        return self.r


def _check_common(n: int, d: int, c: float, q_count: int, min_d: int = 1):
    if n < 1:
        raise ValueError("n must be >= 1")
    if d < min_d:
        raise ValueError(f"d must be >= {min_d}")
    if not c > 1.0:
        raise ValueError(f"approximation factor c must exceed 1, got {c}")
    if q_count < 1:
        raise ValueError("q_count must be >= 1")


def gen_hamming(n: int, d: int, c: float, q_count: int, seed: int) -> HammingInstance:
    """Uniform points in {-1,1}^d; each query flips a planted point's bits w.p. 1/(2c)."""
    _check_common(n, d, c, q_count)
    rng = stream(seed, STREAM_POINTS)
    points = pack_bits(rng.random((n, d)) < 0.5)
    flip = 1.0 / (2.0 * c)
    queries = np.empty((q_count, words_for(d)), dtype=np.uint64)
    planted = np.empty(q_count, dtype=np.int64)
    for j in range(q_count):
        qr = stream(seed, STREAM_QUERIES, j)
        pid = int(qr.integers(n))
        mask = pack_bits((qr.random(d) < flip)[None, :])[0]
        queries[j] = points[pid] ^ mask
        planted[j] = pid
    return HammingInstance(n, d, float(c), points, queries, planted, int(seed))


def uniform_sphere(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    g = rng.standard_normal((m, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_cap_cosine(rng: np.random.Generator, d: int, min_cos: float, size=None):
    """Sample cos(angle to the cap centre) for a point uniform on the cap {cos >= min_cos} of S^{d-1}.

    The surface measure of the sphere at polar cosine t is proportional to
    (1 - t^2)^{(d-3)/2}; with u = (1 + t)/2 this is a Beta((d-1)/2, (d-1)/2)
    density in u. Truncating to u >= (1 + min_cos)/2 and inverting the
    survival function samples t exactly.
    """
    a = 0.5 * (d - 1)
    u0 = 0.5 * (1.0 + min_cos)
    # Beta(a, a) is symmetric, so P(U >= u) = I_{1-u}(a, a); working on the
    # survival side keeps precision when the cap is tiny
    upper = special.betainc(a, a, 1.0 - u0)
    v = rng.random(size) * upper
    u = 1.0 - special.betaincinv(a, a, v)
    return 2.0 * u - 1.0


def cap_point(rng: np.random.Generator, center: np.ndarray, min_cos: float) -> np.ndarray:
    """A point uniform on the unit-sphere cap of points with <x, center> >= min_cos."""
    d = center.shape[0]
    t = float(sample_cap_cosine(rng, d, min_cos))
    g = rng.standard_normal(d)
    g -= (g @ center) * center
    nrm = np.linalg.norm(g)
    if nrm == 0.0:  # measure-zero event
        return center.copy()
    u = g / nrm
    x = t * center + math.sqrt(max(0.0, 1.0 - t * t)) * u
    return x / np.linalg.norm(x)


def gen_sphere(n: int, d: int, c: float, R: float, q_count: int, seed: int) -> SphereInstance:
    """Uniform points on the radius-R sphere; queries uniform on the sqrt(2)R/c cap of a planted point."""
    _check_common(n, d, c, q_count, min_d=2)
    if not R > 0.0:
        raise ValueError("R must be positive")
    rng = stream(seed, STREAM_POINTS)
    unit = uniform_sphere(rng, n, d)
    min_cos = 1.0 - 1.0 / (c * c)
    queries = np.empty((q_count, d))
    planted = np.empty(q_count, dtype=np.int64)
    for j in range(q_count):
        qr = stream(seed, STREAM_QUERIES, j)
        pid = int(qr.integers(n))
        queries[j] = cap_point(qr, unit[pid], min_cos)
        planted[j] = pid
    return SphereInstance(n, d, float(c), float(R), unit * R, queries * R, planted, int(seed))


def hamming_to_sphere(inst: HammingInstance) -> SphereInstance:
    """Map x in {-1,1}^d to x / sqrt(d) on the unit sphere.

    Hamming distance h becomes Euclidean distance 2 sqrt(h / d). A planted
    distance of d/(2c) therefore lands at sqrt(2/c) = sqrt(2)/c' with
    c' = sqrt(c), which is the approximation factor of the returned instance.
    """
    scale = 1.0 / math.sqrt(inst.d)
    pts = to_pm1(inst.points, inst.d) * scale
    qs = to_pm1(inst.queries, inst.d) * scale
    return SphereInstance(inst.n, inst.d, math.sqrt(inst.c), 1.0, pts, qs,
                          inst.planted.copy(), inst.seed)


def gen_clustered(n: int, d: int, c: float, q_count: int, seed: int, *, r: float = 1.0,
                  n_clusters: int = 2, cluster_fraction: float = 0.5,
                  cluster_radius: float | None = None, noise_side: float | None = None
                  ) -> EuclideanInstance:
    """Dense Gaussian clusters plus uniform box noise in R^d, with planted queries at distance r.

    ``cluster_fraction`` of the points are split evenly across ``n_clusters``
    tight Gaussian blobs (per-coordinate std chosen so the blob radius is
    ``cluster_radius``, default r/4); the rest are uniform in a cube of side
    ``noise_side`` (default 4 r sqrt(n)). Each query sits at distance exactly
    ``r`` from its planted point in a uniformly random direction.
    """
    _check_common(n, d, c, q_count)
    rng = stream(seed, STREAM_POINTS)
    cluster_radius = r / 4.0 if cluster_radius is None else cluster_radius
    noise_side = 4.0 * r * math.sqrt(n) if noise_side is None else noise_side
    n_clustered = int(round(cluster_fraction * n))
    pts = np.empty((n, d))
    centers = rng.uniform(0.0, noise_side, size=(n_clusters, d))
    sizes = np.full(n_clusters, n_clustered // n_clusters)
    sizes[: n_clustered % n_clusters] += 1
    std = cluster_radius / math.sqrt(d)
    row = 0
    for k in range(n_clusters):
        pts[row:row + sizes[k]] = centers[k] + std * rng.standard_normal((sizes[k], d))
        row += sizes[k]
    pts[row:] = rng.uniform(0.0, noise_side, size=(n - row, d))
    perm = rng.permutation(n)
    pts = pts[perm]
    queries = np.empty((q_count, d))
    planted = np.empty(q_count, dtype=np.int64)
    for j in range(q_count):
        qr = stream(seed, STREAM_QUERIES, j)
        pid = int(qr.integers(n))
        direction = qr.standard_normal(d)
        queries[j] = pts[pid] + r * direction / np.linalg.norm(direction)
        planted[j] = pid
    return EuclideanInstance(n, d, float(c), float(r), pts, queries, planted, int(seed))


def distances(inst, query_index: int | None = None) -> np.ndarray:
    """Exact query-to-point distances (Hamming counts or Euclidean norms)."""
    qs = inst.queries if query_index is None else inst.queries[query_index:query_index + 1]
    if inst.metric == "hamming":
        return hamming_cross(qs, inst.points)
    sq = (np.einsum("ij,ij->i", qs, qs)[:, None] + np.einsum("ij,ij->i", inst.points, inst.points)[None, :]
          - 2.0 * qs @ inst.points.T)
    return np.sqrt(np.maximum(sq, 0.0))


def separation_radius(inst) -> float:
    """Half-way point between the planted scale and the typical random distance.

    Hamming: (d/(2c) + d/2) / 2. Sphere: (sqrt(2)R/c + sqrt(2)R) / 2.
    Euclidean instances use c r.
    """
    if inst.metric == "hamming":
        return 0.25 * inst.d * (1.0 + 1.0 / inst.c)
    if inst.metric == "sphere":
        return 0.5 * math.sqrt(2.0) * inst.R * (1.0 + 1.0 / inst.c)
    return inst.c * inst.r


@dataclass
class InstanceStats:
    planted_hist: dict           # distance (int for Hamming, bin left edge for reals) -> count
    planted_distances: np.ndarray
    min_other: np.ndarray        # min non-planted distance per query
    unique_fraction: float
    radius: float


def instance_stats(inst, radius: float | None = None, bins: int = 50) -> InstanceStats:
    """Exact distance statistics over all (query, point) pairs.

    A query counts as unique when its planted point is within ``radius`` and
    no other point is (default: :func:`separation_radius`).
    """
    if len(inst.queries) < 1:
        raise ValueError("instance has no queries")
    radius = separation_radius(inst) if radius is None else float(radius)
    dist = distances(inst).astype(np.float64)
    rows = np.arange(len(dist))
    planted_d = dist[rows, inst.planted].copy()
    others = dist.copy()
    others[rows, inst.planted] = np.inf
    if inst.n > 1:
        # a duplicate of the planted point is a distinct id at distance 0
        min_other = others.min(axis=1)
    else:
        min_other = np.full(len(dist), np.inf)
    unique = (planted_d <= radius) & (min_other > radius)
    if inst.metric == "hamming":
        vals, counts = np.unique(planted_d.astype(np.int64), return_counts=True)
        hist = {int(v): int(k) for v, k in zip(vals, counts)}
    else:
        counts, edges = np.histogram(planted_d, bins=bins)
        hist = {float(e): int(k) for e, k in zip(edges[:-1], counts)}
    return InstanceStats(hist, planted_d, min_other, float(unique.mean()), radius)


# --- serialization -----------------------------------------------------------

def save_instance(inst, path) -> Path:
    """Write the flat binary instance file plus a ``.json`` metadata sidecar.

    Layout (little-endian): header ``<8s I I q q q d q d`` = magic
    ``LSFINST\\0``, version, metric code (0 hamming, 1 sphere, 2 euclidean), n,
    d, query count, c, seed, R (sphere radius, or r for euclidean, 0 for
    hamming); then points, queries (row-major; packed uint64 words for
    hamming, float64 otherwise) and planted ids as int64.
    """
    path = Path(path)
    radius = {"hamming": 0.0, "sphere": getattr(inst, "R", 0.0), "euclidean": getattr(inst, "r", 0.0)}
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _METRIC_CODES[inst.metric], inst.n, inst.d,
                          len(inst.queries), inst.c, inst.seed, radius[inst.metric])
    dtype = "<u8" if inst.metric == "hamming" else "<f8"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(inst.points, dtype=dtype).tobytes())
        fh.write(np.ascontiguousarray(inst.queries, dtype=dtype).tobytes())
        fh.write(np.ascontiguousarray(inst.planted, dtype="<i8").tobytes())
    meta = {"metric": inst.metric, "n": inst.n, "d": inst.d, "c": inst.c, "seed": inst.seed,
            "queries": int(len(inst.queries)), "format_version": FORMAT_VERSION,
            "payload": "points, queries, planted ids; packed <u8 words for hamming, <f8 otherwise"}
    if inst.metric == "sphere":
        meta["R"] = inst.R
    if inst.metric == "euclidean":
        meta["r"] = inst.r
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_instance(path):
    raw = Path(path).read_bytes()
    magic, version, metric, n, d, q, c, seed, radius = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an instance file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    metric_name = {v: k for k, v in _METRIC_CODES.items()}[metric]
    if metric_name == "hamming":
        w = words_for(d)
        pts = np.frombuffer(raw, "<u8", n * w, off).reshape(n, w).astype(np.uint64)
        off += 8 * n * w
        qs = np.frombuffer(raw, "<u8", q * w, off).reshape(q, w).astype(np.uint64)
        off += 8 * q * w
    else:
        pts = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d).copy()
        off += 8 * n * d
        qs = np.frombuffer(raw, "<f8", q * d, off).reshape(q, d).copy()
        off += 8 * q * d
    planted = np.frombuffer(raw, "<i8", q, off).copy()
    if metric_name == "hamming":
        return HammingInstance(n, d, c, pts, qs, planted, seed)
    if metric_name == "sphere":
        return SphereInstance(n, d, c, radius, pts, qs, planted, seed)
    return EuclideanInstance(n, d, c, radius, pts, qs, planted, seed)
