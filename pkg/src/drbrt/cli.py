"""Command-line front end: build trees, evaluate coverage, run sweeps,
validate edges by Monte Carlo, and emit plot-ready CSV/JSON artifacts.

All commands are deterministic given their configuration and seeds; artifacts
are written atomically (temp file + rename) and partial outputs are removed
on failure, with a machine-readable error object on stderr.
"""

from __future__ import annotations

import json
import math
import os
import sys
import traceback
from multiprocessing import Pool

import click
import numpy as np

from .beliefs import GaussianBelief
from .brt import (
    BuilderKind,
    build_paired_ball_trees,
    build_paired_ell_trees,
    build_tree,
    connect_query,
    load_tree,
    save_tree,
)
from .dynamics import monte_carlo_rollout
from .scenes import (
    evaluate_coverage,
    load_scene,
    quadrotor_scene,
    sample_query_beliefs,
    sweep_noise_control,
)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6g}"


class _Artifacts:
    """Atomic artifact writer: stage to temp names, commit on success."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.staged = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_text(self, name: str, text: str):
        tmp = self.path(f".tmp-{name}")
        with open(tmp, "w") as fh:
            fh.write(text)
        self.staged.append((tmp, self.path(name)))

    def write_tree(self, name: str, tree):
        tmp = self.path(f".tmp-{name}")
        save_tree(tree, tmp)
        self.staged.append((tmp, self.path(name)))

    def commit(self):
        for tmp, final in self.staged:
            os.replace(tmp, final)
        self.staged = []

    def abort(self):
        for tmp, _ in self.staged:
            if os.path.exists(tmp):
                os.remove(tmp)
        self.staged = []


def _run_command(fn):
    try:
        fn()
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        sys.stderr.write(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "trace": traceback.format_exc(limit=4),
        }) + "\n")
        sys.exit(1)


def _parse_seeds(seed, seeds) -> list:
    if seeds:
        values = [int(s) for s in str(seeds).replace(",", " ").split()]
    else:
        values = [int(seed)]
    if len(set(values)) != len(values):
        raise ValueError("seeds must be distinct")
    return values


def _parse_grid(raw: str) -> list:
    return [float(v) for v in str(raw).replace(",", " ").split()]


def _csv(rows: list, header: list) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (int, float)) or v is None
                              else str(v) for v in row))
    return "\n".join(lines) + "\n"


@click.group()
def main():
    """Distributionally robust backward reachable trees."""


@main.command()
@click.option("--scene", "scene_name", required=True, help="scene name or config path")
@click.option("--builder", default="max_cov_ball", show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=".", show_default=True)
def build(scene_name, builder, iters, seed, out):
    """Build one tree; writes the tree file and a per-iteration JSONL log."""

    def run():
        scene = load_scene(scene_name)
        kind = BuilderKind(builder)
        tree = build_tree(scene, kind, iters, seed)
        art = _Artifacts(out)
        art.write_tree(f"tree_{kind.value}_{seed}.json", tree)
        log_lines = [json.dumps(entry, sort_keys=True) for entry in tree.log]
        art.write_text(f"build_{kind.value}_{seed}.jsonl", "\n".join(log_lines) + "\n")
        art.commit()
        accepted = sum(1 for e in tree.log if e.get("status") == "accepted")
        click.echo(f"built {len(tree.nodes)} nodes ({accepted}/{iters} accepted) "
                   f"-> tree_{kind.value}_{seed}.json")

    _run_command(run)


def _coverage_worker(args):
    scene_name, builder, iters, seed, n_queries, sigma0, mode, query_seed = args
    scene = load_scene(scene_name)
    kind = BuilderKind(builder)
    tree = build_tree(scene, kind, iters, seed)
    queries = sample_query_beliefs(scene, n_queries, sigma0 * np.eye(scene.n),
                                   seed=query_seed)
    report = evaluate_coverage([tree], queries, mode=mode, scene=scene)
    return seed, report.fractions[0]


@main.command()
@click.option("--scene", "scene_name", required=True)
@click.option("--builder", default="max_cov_ball", show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--seeds", default="", help="comma/space separated seed list")
@click.option("--queries", default=100, show_default=True)
@click.option("--sigma0", default=0.01, show_default=True)
@click.option("--mode", default="membership", show_default=True,
              type=click.Choice(["membership", "steer"]))
@click.option("--query-seed", default=7777, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@click.option("--out", default=".", show_default=True)
def coverage(scene_name, builder, iters, seed, seeds, queries, sigma0, mode,
             query_seed, jobs, out):
    """Per-seed connected fractions plus summary statistics (CSV)."""

    def run():
        seed_list = _parse_seeds(seed, seeds)
        jobs_args = [(scene_name, builder, iters, s, queries, sigma0, mode, query_seed)
                     for s in seed_list]
        if jobs > 1:
            with Pool(jobs) as pool:
                results = pool.map(_coverage_worker, jobs_args)
        else:
            results = [_coverage_worker(a) for a in jobs_args]
        results.sort(key=lambda r: seed_list.index(r[0]))
        fractions = [f for _, f in results]
        arr = np.asarray(fractions)
        rows = [[s, builder, f, None, None, None, None, None, None]
                for s, f in results]
        rows.append(["all", builder, None, float(arr.min()), float(arr.mean()),
                     float(np.median(arr)), float(np.percentile(arr, 75)),
                     float(np.percentile(arr, 90)), float(arr.max())])
        art = _Artifacts(out)
        art.write_text(f"coverage_{builder}.csv", _csv(rows, [
            "seed", "builder", "fraction", "min", "mean", "median", "p75", "p90", "max"]))
        art.commit()
        click.echo(f"mean coverage {arr.mean():.6g} over {len(seed_list)} seeds")

    _run_command(run)


@main.command()
@click.option("--scene", "scene_name", default="quadrotor", show_default=True)
@click.option("--wc-grid", required=True, help="comma-separated W_c values")
@click.option("--umax-grid", required=True, help="comma-separated u_max values")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--iters", default=25, show_default=True)
@click.option("--queries", default=100, show_default=True)
@click.option("--sigma0", default=0.01, show_default=True)
@click.option("--out", default=".", show_default=True)
def sweep(scene_name, wc_grid, umax_grid, seeds, iters, queries, sigma0, out):
    """Paired coverage-gain grid over (W_c, u_max) cells (CSV)."""

    def run():
        if scene_name not in ("quadrotor",):
            raise ValueError("the sweep scene family is the quadrotor")
        wcs = _parse_grid(wc_grid)
        umaxes = _parse_grid(umax_grid)
        seed_list = _parse_seeds(0, seeds)

        def family(w_c, u_max):
            return quadrotor_scene(c=math.sqrt(w_c / 0.2), u_max=u_max)

        result = sweep_noise_control(family, wcs, umaxes, seed_list, iters,
                                     n_queries=queries, sigma0_scale=sigma0)
        rows = [[c["w_c"], c["u_max"], c["gain"], c["fraction"]]
                for c in result["cells"]]
        art = _Artifacts(out)
        art.write_text("sweep.csv", _csv(rows, ["w_c", "u_max", "gain", "fraction"]))
        art.commit()
        click.echo(f"sweep grid {len(wcs)}x{len(umaxes)} written to sweep.csv")

    _run_command(run)


@main.command()
@click.option("--tree", "tree_path", required=True)
@click.option("--scene", "scene_name", required=True)
@click.option("--mc-samples", default=10_000, show_default=True)
@click.option("--edges", default=0, show_default=True, help="0 audits every edge")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=".", show_default=True)
def validate(tree_path, scene_name, mc_samples, edges, seed, out):
    """Monte Carlo audit of a stored tree: roll each node's set boundary to the
    goal through the stored policies (JSON report)."""

    def run():
        scene = load_scene(scene_name)
        tree = load_tree(tree_path, scene=scene)
        report = validate_tree(scene, tree, mc_samples, max_edges=edges or None,
                               seed=seed)
        art = _Artifacts(out)
        art.write_text("validate.json", json.dumps(report, indent=2, sort_keys=True))
        art.commit()
        ok = all(e["pass"] for e in report["edges"])
        click.echo(f"validated {len(report['edges'])} edges: "
                   f"{'all pass' if ok else 'FAILURES PRESENT'}")
        if not ok:
            sys.exit(1)

    _run_command(run)


def validate_tree(scene, tree, mc_samples: int, max_edges=None, seed: int = 0) -> dict:
    """Rollout audit shared by the CLI and the acceptance suite."""
    from .brt import edge_state_constraints

    goal = scene.goal_region()
    if float(np.abs(scene.goal_shape).max()) > 0 and not tree.kind.is_ellipsoid_family:
        # ball trees certify the Euclidean ball component of the goal
        goal = type(goal).ball(scene.goal_center, scene.goal_radius)
    eps = scene.eps_sets
    margin = 3.0 * math.sqrt(eps * (1.0 - eps) / mc_samples)
    entries = []
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    node_ids = [i for i in range(1, len(tree.nodes))]
    rng.shuffle(node_ids)
    if max_edges:
        node_ids = node_ids[:max_edges]
    for idx in node_ids:
        node = tree.nodes[idx]
        if node.radius <= 1e-9:
            continue
        direction = rng.standard_normal(scene.n)
        direction /= np.linalg.norm(direction)
        ns = tree.node_set(idx)
        q = ns.primary.quantile
        # boundary belief: half the radius in mean offset, half in covariance
        mean = node.mu + 0.5 * node.radius * direction
        cov = (0.5 * node.radius / q) ** 2 * np.eye(scene.n)
        belief = GaussianBelief(mean, cov)
        path = [tree.edges[e] for e in tree.path_to_root(idx)]
        segments = [e.policy for e in path]
        cons = [edge_state_constraints(scene, tree.nodes[tree.edges[e].child].mu)
                + scene.control_constraints() for e in tree.path_to_root(idx)]
        stats = monte_carlo_rollout(scene.system, segments, belief, cons, goal,
                                    mc_samples, seed=seed + idx)
        goal_ok = stats.goal_frequency >= 1.0 - eps - margin
        viol_ok = stats.max_violation() <= eps + margin
        entries.append({
            "node": idx,
            "depth": node.depth,
            "goal_frequency": stats.goal_frequency,
            "max_violation_frequency": stats.max_violation(),
            "pass": bool(goal_ok and viol_ok),
        })
    return {"tree_seed": tree.seed, "builder": tree.kind.value,
            "n_samples": mc_samples, "edges": entries}


def _compare_worker(args):
    scene_name, iters, seed, n_queries, sigma0, family, query_seed = args
    scene = load_scene(scene_name)
    if family == "ell":
        ours, base = build_paired_ell_trees(scene, iters, seed=seed)
    else:
        ours, base = build_paired_ball_trees(scene, iters, seed=seed)
    queries = sample_query_beliefs(scene, n_queries, sigma0 * np.eye(scene.n),
                                   seed=query_seed)
    report = evaluate_coverage([ours, base], queries, scene=scene)
    f_ours, f_base = report.fractions
    return seed, f_ours, f_base


@main.command()
@click.option("--scene", "scene_name", required=True)
@click.option("--family", default="ball", type=click.Choice(["ball", "ell"]),
              show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--queries", default=100, show_default=True)
@click.option("--sigma0", default=0.01, show_default=True)
@click.option("--query-seed", default=7777, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@click.option("--out", default=".", show_default=True)
def compare(scene_name, family, iters, seeds, queries, sigma0, query_seed, jobs, out):
    """Paired builder run sharing samples; per-seed dominance booleans (CSV)."""

    def run():
        seed_list = _parse_seeds(0, seeds)
        jobs_args = [(scene_name, iters, s, queries, sigma0, family, query_seed)
                     for s in seed_list]
        if jobs > 1:
            with Pool(jobs) as pool:
                results = pool.map(_compare_worker, jobs_args)
        else:
            results = [_compare_worker(a) for a in jobs_args]
        results.sort(key=lambda r: seed_list.index(r[0]))
        rows = [[s, f_ours, f_base, str(f_ours >= f_base).lower()]
                for s, f_ours, f_base in results]
        art = _Artifacts(out)
        art.write_text(f"compare_{family}.csv", _csv(rows, [
            "seed", "fraction_ours", "fraction_baseline", "dominates"]))
        art.commit()
        dominance = all(f_ours >= f_base for _, f_ours, f_base in results)
        click.echo(f"dominance on every seed: {dominance}")

    _run_command(run)


if __name__ == "__main__":
    main()
