"""Experiment orchestration: n-ladders x seeds x rho_s, counter aggregation, slope fits, CSV."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bounds, filter_tree as ft, instances as inst, reduction as rd
from .fit import loglog_fit

CSV_VERSION = 1
STRUCTURES = ("filter-tree", "reduction")
METRICS = ("sphere", "hamming", "clustered")
RADIUS_MODES = ("auto", "planted", "separation", "cr")


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep: every (rho_s, n, seed) combination becomes a record.

    ``d = None`` picks :func:`instances.default_dimension` per n. For
    ``metric = "hamming"`` the points are mapped onto the unit sphere and
    the approximation factor becomes sqrt(c). ``radius`` selects the query
    success radius: "planted" (cap radius sqrt(2) R / c), "separation"
    (midpoint between planted and random scale), "cr" (c times the near
    radius) or "auto" (planted for sphere, separation for hamming, cr for
    clustered).
    """
    ns: tuple = (2**10,)
    metric: str = "sphere"
    structure: str = "filter-tree"
    c: float = math.sqrt(2.0)
    d: int | None = None
    R: float = 1.0
    rho_s: tuple = (1.0,)
    K: int | None = None
    success_factor: float = ft.DEFAULT_SUCCESS_FACTOR
    seeds: tuple = (0,)
    queries: int = 100
    radius: str = "auto"
    max_tree_nodes: int = ft.DEFAULT_MAX_TREE_NODES
    reduction: dict = field(default_factory=dict)   # extra ReductionParams fields
    output: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ns", tuple(int(n) for n in self.ns))
        object.__setattr__(self, "rho_s", tuple(float(x) for x in self.rho_s))
        seeds = (tuple(range(self.seeds)) if isinstance(self.seeds, int) else tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "seeds", seeds)
        if not self.ns or any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValueError("n-ladder must be nonempty and strictly increasing")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.radius not in RADIUS_MODES:
            raise ValueError(f"radius must be one of {RADIUS_MODES}")
        if self.queries < 1:
            raise ValueError("queries must be >= 1")
        if not self.rho_s:
            raise ValueError("rho_s schedule must be nonempty")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass(frozen=True)
class RunRecord:
    # inputs
    structure: str
    metric: str
    n: int
    d: int
    c: float
    rho_s: float
    K: int
    success_factor: float
    seed: int
    queries: int
    radius: float
    # measured
    recall: float = math.nan
    planted_rate: float = math.nan
    mean_work: float = math.nan
    median_work: float = math.nan
    mean_nodes_visited: float = math.nan
    mean_inner_products: float = math.nan
    mean_candidates: float = math.nan
    space: int = 0
    nodes: int = 0
    bucket_mass: int = 0
    build_seconds: float = 0.0
    query_seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    def counters(self) -> tuple:
        """Every measured field except wall time."""
        skip = {"build_seconds", "query_seconds"}
        return tuple(getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in skip)


def make_instance(spec: ExperimentSpec, n: int, seed: int):
    d = inst.default_dimension(n) if spec.d is None else spec.d
    if spec.metric == "sphere":
        return inst.gen_sphere(n, d, spec.c, spec.R, spec.queries, seed)
    if spec.metric == "hamming":
        return inst.hamming_to_sphere(inst.gen_hamming(n, d, spec.c, spec.queries, seed))
    return inst.gen_clustered(n, d, spec.c, spec.queries, seed)


def success_radius(spec: ExperimentSpec, instance) -> float:
    mode = spec.radius
    if mode == "auto":
        mode = {"sphere": "planted", "hamming": "separation", "clustered": "cr"}[spec.metric]
    if mode == "planted":
        return instance.near_radius
    if mode == "separation":
        return inst.separation_radius(instance)
    return instance.c * instance.near_radius


def _measure(structure_query, instance, radius):
    works, nodes, inner, cand = [], [], [], []
    hits = planted = 0
    for q, pid in zip(instance.queries, instance.planted):
        s = structure_query(q, radius)
        works.append(s.work)
        nodes.append(s.nodes_visited)
        inner.append(s.inner_products)
        cand.append(s.candidates_scanned)
        hits += s.found
        planted += s.result == int(pid)
    m = len(works)
    return dict(recall=hits / m, planted_rate=planted / m, mean_work=float(np.mean(works)),
                median_work=float(np.median(works)), mean_nodes_visited=float(np.mean(nodes)),
                mean_inner_products=float(np.mean(inner)), mean_candidates=float(np.mean(cand)))


def run_one(spec: ExperimentSpec, n: int, seed: int, rho_s: float) -> RunRecord:
    """Build and query one structure; failures are recorded in ``error`` instead of raised."""
    K = ft.default_depth(n) if spec.K is None else spec.K
    d = inst.default_dimension(n) if spec.d is None else spec.d
    base = dict(structure=spec.structure, metric=spec.metric, n=n, d=d, c=spec.c, rho_s=rho_s, K=K,
                success_factor=spec.success_factor, seed=seed, queries=spec.queries, radius=math.nan)
    try:
        instance = make_instance(spec, n, seed)
        radius = success_radius(spec, instance)
        base["radius"] = radius
        t0 = time.perf_counter()
        if spec.structure == "filter-tree":
            if spec.metric == "clustered":
                raise ValueError("the filter tree needs points on a sphere; use the reduction")
            params = ft.select_params(n, instance.c, instance.R, rho_s, K=K, success_factor=spec.success_factor,
                                      seed=seed, max_tree_nodes=spec.max_tree_nodes)
            tree = ft.build(instance.points, params)
            space, nodes, mass = tree.space, tree.node_count, tree.bucket_mass
        else:
            rparams = rd.ReductionParams(K=K, rho_s=rho_s, success_factor=spec.success_factor, seed=seed,
                                         **spec.reduction)
            r = instance.near_radius
            tree = rd.process(instance.points, instance.c, r, rparams)
            st = tree.stats()
            space, nodes, mass = st["space"], st["nodes"], st["stored_ids"]
        build_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        measured = _measure(tree.query, instance, radius)
        query_s = time.perf_counter() - t0
        return RunRecord(**base, **measured, space=int(space), nodes=int(nodes), bucket_mass=int(mass),
                         build_seconds=build_s, query_seconds=query_s)
    except (ValueError, RuntimeError, MemoryError) as exc:
        return RunRecord(**base, error=f"{type(exc).__name__}: {exc}".replace("\n", " "))


def run_experiment(spec: ExperimentSpec, progress=None) -> list[RunRecord]:
    records = []
    for rho_s in spec.rho_s:
        for n in spec.ns:
            for seed in spec.seeds:
                rec = run_one(spec, n, seed, rho_s)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    if spec.output:
        Path(spec.output).write_text(emit_csv(records))
    return records


def rerun(spec: ExperimentSpec, record: RunRecord) -> RunRecord:
    """Rebuild one record of ``spec`` from the inputs it embeds."""
    return run_one(spec, record.n, record.seed, record.rho_s)


# --- fitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class Comparison:
    quantity: str
    fitted: float
    stderr: float
    predicted: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.fitted - self.predicted) <= self.tolerance


@dataclass(frozen=True)
class FitReport:
    work: Comparison
    space: Comparison
    ns: tuple
    mean_work: tuple
    mean_space: tuple

    @property
    def passed(self) -> bool:
        return self.work.passed and self.space.passed


def fit_and_compare(records, rho_q: float, rho_u: float, tolerance: float = 0.15) -> FitReport:
    """Fit log(work) and log(space) against log(n) over seed means; compare with rho_q and 1 + rho_u."""
    good = [r for r in records if r.ok]
    ns = sorted({r.n for r in good})
    if len(ns) < 3:
        raise ValueError("need successful records at >= 3 distinct n")
    w = [float(np.mean([r.mean_work for r in good if r.n == n])) for n in ns]
    s = [float(np.mean([r.space for r in good if r.n == n])) for n in ns]
    fw, fs = loglog_fit(ns, w), loglog_fit(ns, s)
    return FitReport(Comparison("work", fw.slope, fw.stderr, rho_q, tolerance),
                     Comparison("space", fs.slope, fs.stderr, 1.0 + rho_u, tolerance), tuple(ns), tuple(w), tuple(s))


def predicted_exponents(c: float, rho_s: float, metric: str = "sphere") -> tuple[float, float]:
    """(rho_q, rho_u) on the tree curve for a given space exponent rho_s = 1 + rho_u."""
    c_eff = math.sqrt(c) if metric == "hamming" else c
    pt = bounds.solve_tradeoff("tree", c_eff, rho_s - 1.0)
    return pt.rho_q, pt.rho_u


# --- CSV -----------------------------------------------------------------------------

CSV_FIELDS = [f.name for f in dataclasses.fields(RunRecord)]
_TYPES = {f.name: f.type for f in dataclasses.fields(RunRecord)}


def emit_csv(records) -> str:
    buf = io.StringIO()
    buf.write(f"# lsfann-results v{CSV_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in dataclasses.asdict(r).items()})
    return buf.getvalue()


def parse_csv(text: str) -> list[RunRecord]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# lsfann-results v"):
        raise ValueError("missing results header")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != CSV_VERSION:
        raise ValueError(f"unsupported results version {version}")
    out = []
    for row in csv.DictReader(lines[1:]):
        kw = {}
        for k, v in row.items():
            t = _TYPES[k]
            kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
        out.append(RunRecord(**kw))
    return out
