"""Command-line entry point: ``lsfann <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds, caps, filter_tree as ft, harness, instances as inst, reduction as rd


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _emit_csv(rows: list[dict]) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _instance_for_tree(path):
    data = inst.load_instance(path)
    if data.metric == "hamming":
        data = inst.hamming_to_sphere(data)
    return data


def cmd_gen(a) -> int:
    d = inst.default_dimension(a.n) if a.d is None else a.d
    if a.metric == "sphere":
        data = inst.gen_sphere(a.n, d, a.c, a.R, a.queries, a.seed)
    elif a.metric == "hamming":
        data = inst.gen_hamming(a.n, d, a.c, a.queries, a.seed)
    else:
        data = inst.gen_clustered(a.n, d, a.c, a.queries, a.seed)
    inst.save_instance(data, a.out)
    out = {"path": str(a.out), "metric": data.metric, "n": data.n, "d": data.d, "queries": len(data.queries)}
    if a.stats:
        s = inst.instance_stats(data)
        out.update(unique_fraction=s.unique_fraction, planted_mean=float(s.planted_distances.mean()),
                   radius=s.radius)
    _emit(out)
    return 0


def cmd_caps(a) -> int:
    try:
        expo = caps.joint_cap_asymptotic_exponent(a.eta, a.eta_prime, a.alpha)
    except ValueError:
        expo = math.nan
    out = {"eta": a.eta, "eta_prime": a.eta_prime, "alpha": a.alpha,
           "value": caps.joint_cap(a.eta, a.eta_prime, a.alpha).value,
           "log_value": caps.log_joint_cap(a.eta, a.eta_prime, a.alpha),
           "asymptotic_exponent": expo}
    if a.mc_check:
        p, se = caps.joint_cap_mc(a.eta, a.eta_prime, a.alpha, a.mc_check, a.seed)
        out.update(mc=p, mc_stderr=se)
    _emit_csv([out])
    return 0


def cmd_build(a) -> int:
    data = _instance_for_tree(a.instance)
    params = ft.select_params(data.n, data.c, data.R, a.rho_s, K=a.K, success_factor=a.success_factor,
                              seed=a.seed, max_tree_nodes=a.max_nodes)
    tree = ft.build(data.points, params)
    ft.save_tree(tree, a.out)
    _emit({"path": str(a.out), "params": ft.params_dict(params), **tree.stats()})
    return 0


def _show_report(rep: dict, fmt: str) -> None:
    if fmt == "csv":
        _emit_csv([rep])
    else:
        _emit(rep)


def _report(stats, data, radius):
    found = [s.found for s in stats]
    return {"queries": len(stats), "radius": radius, "recall": float(np.mean(found)),
            "planted_rate": float(np.mean([s.result == int(p) for s, p in zip(stats, data.planted)])),
            "mean_work": float(np.mean([s.work for s in stats])),
            "median_work": float(np.median([s.work for s in stats]))}


def cmd_query(a) -> int:
    data = _instance_for_tree(a.instance)
    tree = ft.load_tree(a.tree, data.points)
    radius = data.near_radius if a.radius is None else a.radius
    _show_report(_report([tree.query(q, radius) for q in data.queries], data, radius), a.report)
    return 0


def cmd_reduce_build(a) -> int:
    data = _instance_for_tree(a.instance)
    extra = {}
    if a.params:
        text = Path(a.params).read_text() if Path(a.params).is_file() else a.params
        extra = json.loads(text)
    params = rd.ReductionParams(K=a.K, rho_s=a.rho_s, success_factor=a.success_factor, seed=a.seed, **extra)
    tree = rd.process(data.points, data.c, data.near_radius, params)
    rd.save_decision_tree(tree, a.out)
    if a.dump_dot:
        Path(a.dump_dot).write_text(rd.to_dot(tree.root))
    _emit({"path": str(a.out), "K": tree.K, "T": tree.T, **tree.stats()})
    return 0


def cmd_reduce_query(a) -> int:
    data = _instance_for_tree(a.instance)
    tree = rd.load_decision_tree(a.tree)
    radius = tree.root.r2 if a.radius is None else a.radius
    _show_report(_report([tree.query(q, radius) for q in data.queries], data, radius), a.report)
    return 0


def cmd_tradeoff(a) -> int:
    if a.sweep:
        top = bounds.max_rho_u(a.curve, a.c)
        points = [bounds.solve_tradeoff(a.curve, a.c, top * i / (a.sweep - 1)) for i in range(a.sweep)]
    elif a.rho_s is not None:
        points = [bounds.solve_tradeoff(a.curve, a.c, a.rho_s - 1.0)]
    else:
        points = [bounds.solve_tradeoff(a.curve, a.c, a.rho_u)]
    _emit_csv([{"c": pt.c, "rho_u": pt.rho_u, "rho_q": pt.rho_q, "residual": pt.residual} for pt in points])
    return 0


def cmd_expansion(a) -> int:
    p, q = bounds.ptw_schedule(a.n, a.sigma)
    cands = bounds.expansion_candidates(a.d, a.sigma, a.a, a.gamma, seed=a.seed)
    est = min(cd.ratio for cd in cands)
    bound = bounds.robust_expansion_bound(a.sigma, 1.0 / a.a, a.gamma, p, q)
    _emit({"p": p, "q": q, "bound": bound, "estimate": est, "ratio": est / bound,
           "candidates": [{"family": cd.family, "size_a": cd.size_a, "size_b": cd.size_b, "ratio": cd.ratio}
                          for cd in cands]})
    return 0


def cmd_bench(a) -> int:
    spec = harness.ExperimentSpec.from_json(Path(a.spec).read_text())
    records = harness.run_experiment(spec, progress=(lambda r: print(
        f"n={r.n} seed={r.seed} rho_s={r.rho_s:.4g} recall={r.recall:.3f} work={r.mean_work:.1f} "
        f"space={r.space} {r.error}", file=sys.stderr)) if a.verbose else None)
    Path(a.out).write_text(harness.emit_csv(records))
    failed = [r for r in records if not r.ok]
    verdicts = []
    if a.min_recall is not None:
        verdicts += [r.recall >= a.min_recall for r in records if r.ok]
    for rho_s in spec.rho_s:
        group = [r for r in records if r.rho_s == rho_s]
        if len({r.n for r in group if r.ok}) >= 3:
            rq, ru = harness.predicted_exponents(spec.c, rho_s, spec.metric)
            rep = harness.fit_and_compare(group, rq, ru, a.tolerance)
            print(f"rho_s={rho_s:.4g}: work slope {rep.work.fitted:.3f} (pred {rq:.3f}), "
                  f"space slope {rep.space.fitted:.3f} (pred {1 + ru:.3f})", file=sys.stderr)
            verdicts += [rep.work.passed, rep.space.passed]
    print(f"{len(records)} records, {len(failed)} failed -> {a.out}", file=sys.stderr)
    if a.assert_bands and (failed or not all(verdicts)):
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsfann", description="Filter-tree nearest-neighbor experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an instance file")
    g.add_argument("--metric", choices=["sphere", "hamming", "clustered"], default="sphere")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int)
    g.add_argument("--c", type=float, default=math.sqrt(2))
    g.add_argument("--R", type=float, default=1.0)
    g.add_argument("--queries", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--stats", action="store_true", help="also report uniqueness statistics")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("caps", help="evaluate the joint cap probability")
    c.add_argument("--eta", type=float, required=True)
    c.add_argument("--eta-prime", type=float, required=True)
    c.add_argument("--alpha", type=float, required=True)
    c.add_argument("--mc-check", type=int, default=0, metavar="SAMPLES",
                   help="Monte Carlo samples for a cross-check")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_caps)

    for name, fn, extra in (("build", cmd_build, "filter tree"), ("reduce-build", cmd_reduce_build,
                                                                  "reduction decision tree")):
        b = sub.add_parser(name, help=f"build a {extra} over an instance file")
        b.add_argument("--instance", type=Path, required=True)
        b.add_argument("--rho-s", type=float, default=4.0 / 3.0)
        b.add_argument("--K", type=int)
        b.add_argument("--success-factor", type=float, default=2.0)
        b.add_argument("--seed", type=int, default=0)
        b.add_argument("--out", type=Path, required=True)
        if name == "build":
            b.add_argument("--max-nodes", type=int, default=ft.DEFAULT_MAX_TREE_NODES)
        else:
            b.add_argument("--params", help="JSON object (inline or file) of extra reduction parameters")
            b.add_argument("--dump-dot", type=Path, metavar="PATH", help="write a Graphviz rendering of the tree")
        b.set_defaults(func=fn)

    for name, fn in (("query", cmd_query), ("reduce-query", cmd_reduce_query)):
        q = sub.add_parser(name, help="run the instance queries against a saved structure")
        q.add_argument("--instance", type=Path, required=True)
        q.add_argument("--tree", type=Path, required=True)
        q.add_argument("--radius", type=float)
        q.add_argument("--report", choices=["json", "csv"], default="json")
        q.set_defaults(func=fn)

    t = sub.add_parser("tradeoff", help="solve a space-time trade-off curve")
    t.add_argument("--curve", choices=list(bounds.CURVES), default="eq1")
    t.add_argument("--c", type=float, required=True)
    grp = t.add_mutually_exclusive_group(required=True)
    grp.add_argument("--rho-u", type=float)
    grp.add_argument("--rho-s", type=float)
    grp.add_argument("--sweep", type=int, metavar="POINTS", help="evenly spaced rho_u over the admissible range")
    t.set_defaults(func=cmd_tradeoff)

    e = sub.add_parser("expansion", help="robust-expansion bound versus estimate on the hypercube")
    e.add_argument("--d", type=int, default=12)
    e.add_argument("--sigma", type=float, default=0.5)
    e.add_argument("--a", type=float, default=2.0**-4, help="measure of the set A")
    e.add_argument("--gamma", type=float, default=0.5)
    e.add_argument("--n", type=float, default=2.0**20, help="n used by the (p, q) schedule")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_expansion)

    be = sub.add_parser("bench", help="run an experiment spec and write CSV")
    be.add_argument("--spec", type=Path, required=True)
    be.add_argument("--out", type=Path, required=True)
    be.add_argument("--assert", dest="assert_bands", action="store_true",
                    help="exit nonzero if a record fails or a slope band is missed")
    be.add_argument("--tolerance", type=float, default=0.15)
    be.add_argument("--min-recall", type=float)
    be.add_argument("--verbose", action="store_true")
    be.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"lsfann: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
