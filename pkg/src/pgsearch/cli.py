"""Command-line front end: ``pgsearch <command> ...``.

Output files land under ``--out`` (or the config's ``output.dir``), which
is resolved against ``$PGS_OUTPUT_ROOT`` when that is set.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import CqlConfig, cql_train, load_agent, sac_train, save_agent
from .config import Config, ConfigError, config_hash, dump_config, load_config, stable_hash
from .osel import hyperparameter_select, load_encoder, save_encoder, save_grid, train_encoder
from .search import (
    Report,
    RunConfig,
    SeedArtifacts,
    StageError,
    _stage,
    aggregate,
    evaluate_candidates,
    grad_baseline,
    pgs_search,
    pick_starts,
    search_and_report,
)
from .surrogate import SurrogateConfig, load_surrogate, save_surrogate, train_surrogate
from .tasks import TASKS, d_best, generate_offline_dataset, get_task, load_dataset, save_dataset
from .trajectories import (
    ActionBound,
    build_transition_set,
    load_transition_set,
    save_transition_set,
    select_top_p,
    surrogate_hash,
    synthesize_trajectories,
)

log = logging.getLogger("pgsearch")

OUTPUT_ROOT_ENV = "PGS_OUTPUT_ROOT"

RESULT_COLUMNS = [
    "task",
    "method",
    "p",
    "epochs",
    "T_test",
    "m_traj",
    "seed",
    "score100",
    "score50",
    "d_best",
    "mean_action_norm_first_step",
    "mean_action_norm_last_step",
    "wall_seconds",
    "score100_std",
    "score50_std",
    "config_hash",
]

ABLATIONS = ("traj-length", "n-traj", "method", "top-p", "monotonic")


def resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------ cached stages


class ArtifactCache:
    """Stage outputs keyed by a hash of everything that determines them."""

    def __init__(self, root: Path):
        self.root = root / "cache"
        self.root.mkdir(parents=True, exist_ok=True)

    def dataset(self, cfg: RunConfig, seed: int):
        key = stable_hash("dataset", cfg.task, cfg.pool_size, cfg.keep_percentile, seed)
        path = self.root / f"data-{key}.csv"
        if path.exists():
            log.info("cache hit %s", path.name)
            return load_dataset(path), key
        ds = _stage("dataset", generate_offline_dataset, get_task(cfg.task), cfg.pool_size, cfg.keep_percentile, seed)
        save_dataset(ds, path)
        return load_dataset(path), key

    def surrogate(self, cfg: RunConfig, seed: int, ds, data_key: str):
        scfg = replace(cfg.surrogate, seed=seed)
        key = stable_hash("surrogate", data_key, scfg)
        path = self.root / f"surrogate-{key}.ckpt"
        if path.exists():
            log.info("cache hit %s", path.name)
            return load_surrogate(path), key
        s = _stage("surrogate", train_surrogate, ds, scfg)
        save_surrogate(s, path, {"config_hash": key})
        return s, key

    def agent(self, cfg: RunConfig, seed: int, ds, s, sur_key: str):
        traj_key = (cfg.p, cfg.m, cfg.T, cfg.monotonic, cfg.full_data, cfg.alpha_scale, cfg.eps_g)
        key = stable_hash("agent", sur_key, cfg.method, traj_key, cfg.agent, seed)
        path = self.root / f"agent-{key}.ckpt"
        if path.exists():
            log.info("cache hit %s", path.name)
            return load_agent(path)
        top = _stage("select_top_p", select_top_p, ds, 100.0 if cfg.full_data else cfg.p)
        traj = _stage(
            "trajectories", synthesize_trajectories, top, cfg.m, cfg.T, seed, sort_by=ds.outputs if cfg.monotonic else None
        )
        bound = ActionBound.from_scale(cfg.alpha_scale, ds.dim)
        ts = _stage("transitions", build_transition_set, traj, s, ds, bound, cfg.eps_g)
        log.info("transitions %s", ts.stats())
        trainer = cql_train if cfg.method == "pgs-cql" else sac_train
        agent = _stage("agent", trainer, ts, replace(cfg.agent, a_max=bound.a_max), seed).agent
        save_agent(agent, path, {"config_hash": key})
        return agent


def _seed_job(args) -> list[Report]:
    cfg, seed, out_dir, T_tests, verbose = args
    _setup_logging(verbose)
    t0 = time.perf_counter()
    cache = ArtifactCache(out_dir)
    ds, dkey = cache.dataset(cfg, seed)
    s, skey = cache.surrogate(cfg, seed, ds, dkey)
    agent = None
    if cfg.method == "grad":
        log.info("method grad: agent training skipped")
    else:
        agent = cache.agent(cfg, seed, ds, s, skey)
    art = SeedArtifacts(ds, s, agent, time.perf_counter() - t0)
    return [_stage("search", search_and_report, cfg, seed, art, T) for T in T_tests]


def run_pipeline(cfg: RunConfig, out_dir: Path, T_tests=None, jobs: int = 1, verbose: int = 0) -> list[Report]:
    T_tests = tuple(T_tests or (cfg.T_test,))
    tasks = [(cfg, seed, out_dir, T_tests, verbose) for seed in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_seed_job, tasks))
    else:
        per_seed = [_seed_job(t) for t in tasks]
    reports: list[Report] = []
    for i, T in enumerate(T_tests):
        group = [rs[i] for rs in per_seed]
        reports.extend(group)
        reports.append(aggregate(group))
    return reports


def ablation_variants(cfg: RunConfig, axis: str | None, values: str | None):
    """Yield (config, T_tests) pairs, one per result group family."""
    if axis is None:
        yield cfg, (cfg.T_test,)
        return
    if axis == "traj-length":
        Ts = tuple(int(v) for v in (values or "50,60,70,80,90,100").split(","))
        yield cfg, Ts
    elif axis == "n-traj":
        for m in (int(v) for v in (values or "1000,10000,20000").split(",")):
            yield replace(cfg, m=m), (cfg.T_test,)
    elif axis == "method":
        for method in (values or "pgs-cql,pgs-sac,grad").split(","):
            yield replace(cfg, method=method.strip()), (cfg.T_test,)
    elif axis == "top-p":
        yield replace(cfg, full_data=False), (cfg.T_test,)
        yield replace(cfg, full_data=True), (cfg.T_test,)
    elif axis == "monotonic":
        yield replace(cfg, monotonic=False), (cfg.T_test,)
        yield replace(cfg, monotonic=True, full_data=True), (cfg.T_test,)
    else:
        raise ConfigError(f"unknown ablation {axis!r}; choose from {ABLATIONS}")


def _row(r: Report, chash: str) -> list[str]:
    agg = r.seed == "agg"
    return [
        r.task,
        r.method,
        repr(float(r.p)),
        str(r.epochs),
        str(r.T_test),
        str(r.m_traj),
        str(r.seed),
        repr(r.score100),
        repr(r.score50),
        repr(r.d_best),
        repr(r.first_norm),
        repr(r.last_norm),
        f"{r.wall_seconds:.3f}",
        repr(r.score100_std) if agg else "",
        repr(r.score50_std) if agg else "",
        chash,
    ]


def write_results(path: Path, reports: list[Report], chash: str, append: bool = False) -> None:
    new = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("a" if not new else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow(_row(r, chash))


def read_results(path: Path) -> list[dict[str, str]]:
    text = path.read_text() if path.exists() else ""
    if not text.strip():
        return []
    rows = list(csv.DictReader(text.splitlines()))
    required = {"task", "method", "seed", "score100", "d_best"}
    if rows and not required <= set(rows[0]):
        raise ValueError(f"results CSV missing columns {sorted(required - set(rows[0]))}")
    for r in rows:
        float(r["score100"])
        float(r["d_best"])
    return rows


def format_report(rows: list[dict[str, str]]) -> str:
    """Per-task mean ± std of score100 for every method group, plus the dataset-best row."""
    if not rows:
        return "no results"
    groups: dict[str, dict[str, list[float]]] = {}
    dbest: dict[str, list[float]] = {}
    for r in rows:
        if r["seed"] == "agg":
            continue
        label = r["method"]
        if float(r.get("p") or 0) == 100.0 and r["method"] != "grad":
            label += " (p=100)"
        extra = []
        if r.get("T_test") and r["T_test"] != "50":
            extra.append(f"T={r['T_test']}")
        if r.get("m_traj") and r["method"] != "grad" and r["m_traj"] != "2000":
            extra.append(f"m={r['m_traj']}")
        if extra:
            label += " [" + ",".join(extra) + "]"
        groups.setdefault(label, {}).setdefault(r["task"], []).append(float(r["score100"]))
        dbest.setdefault(r["task"], []).append(float(r["d_best"]))
    task_names = sorted(dbest)
    best = {t: max((np.mean(v[t]) for v in groups.values() if t in v), default=-math.inf) for t in task_names}
    width = max([len("D(best)")] + [len(g) for g in groups]) + 2
    lines = ["method".ljust(width) + "".join(t.rjust(22) for t in task_names)]
    lines.append("D(best)".ljust(width) + "".join(f"{np.mean(dbest[t]):.3f}".rjust(22) for t in task_names))
    for label in sorted(groups):
        cells = []
        for t in task_names:
            vals = groups[label].get(t)
            if not vals:
                cells.append("-".rjust(22))
                continue
            mean, std = float(np.mean(vals)), float(np.std(vals))
            star = "*" if mean >= best[t] else " "
            cells.append(f"{mean:.3f} ± {std:.3f}{star}".rjust(22))
        lines.append(label.ljust(width) + "".join(cells))
    return "\n".join(lines)


# ------------------------------------------------------------------ commands


def _setup_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _config(args) -> Config:
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def cmd_gen_data(args) -> int:
    task = get_task(args.task)
    out = resolve_out(args.out)
    ds = generate_offline_dataset(task, args.pool, args.keep, args.seed)
    path = out / f"{task.name}-pool{args.pool}-keep{args.keep:g}-seed{args.seed}.csv"
    chash = stable_hash("dataset", task.name, args.pool, float(args.keep), args.seed)
    save_dataset(ds, path, {"config_hash": chash})
    raw, norm = d_best(ds)
    print(f"wrote {path} (n={ds.n}, d={ds.dim}, d_best={raw:.6g} normalized {norm:.4f})")
    return 0


def cmd_train_surrogate(args) -> int:
    cfg = _config(args).run
    ds = load_dataset(args.data)
    scfg = replace(cfg.surrogate, seed=args.seed)
    s = train_surrogate(ds, scfg)
    save_surrogate(s, args.out, {"config_hash": stable_hash("surrogate", scfg)})
    print(f"wrote {args.out} (final mse {s.mse_log[-1]:.6g})")
    return 0


def cmd_build_transitions(args) -> int:
    cfg = _config(args).run
    ds = load_dataset(args.data)
    s = load_surrogate(args.surrogate)
    top = select_top_p(ds, 100.0 if cfg.full_data else cfg.p)
    traj = synthesize_trajectories(top, cfg.m, cfg.T, args.seed, sort_by=ds.outputs if cfg.monotonic else None)
    bound = ActionBound.from_scale(cfg.alpha_scale, ds.dim)
    ts = build_transition_set(traj, s, ds, bound, cfg.eps_g)
    ts.meta.update(
        p=cfg.p, seed=args.seed, surrogate_hash=surrogate_hash(s), config_hash=config_hash(cfg), full_data=cfg.full_data
    )
    save_transition_set(ts, args.out)
    print(f"wrote {args.out} {ts.stats()}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _config(args).run
    ts = load_transition_set(args.transitions)
    a_max = float(ts.meta.get("a_max", ActionBound.from_scale(cfg.alpha_scale, ts.dim).a_max))
    acfg = replace(cfg.agent, a_max=a_max)
    trainer = sac_train if cfg.method == "pgs-sac" else cql_train
    result = trainer(ts, acfg, args.seed)
    out = Path(args.out)
    chash = config_hash(cfg)
    save_agent(result.agent, out, {"config_hash": chash})
    for epoch, agent in result.checkpoints:
        save_agent(agent, out.with_name(f"{out.stem}-epoch{epoch}{out.suffix}"), {"config_hash": chash, "epoch": epoch})
    print(f"wrote {out} and {len(result.checkpoints)} epoch checkpoints")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args).run
    ds = load_dataset(args.data)
    s = load_surrogate(args.surrogate)
    starts = pick_starts(ds, min(cfg.N, ds.n))
    if args.agent:
        trace = pgs_search(starts, s, load_agent(args.agent), cfg.T_test)
    else:
        trace = grad_baseline(starts, s, cfg.T_test, cfg.eta)
    s100, s50 = evaluate_candidates(get_task(ds.task_name), ds, trace.final)
    if args.out:
        np.savetxt(args.out, trace.final, delimiter=",", fmt="%r")
    print(f"score100={s100:.6f} score50={s50:.6f} d_best={d_best(ds)[1]:.6f}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = resolve_out(args.out or cfg.output_dir)
    chash = config_hash(cfg)
    (out / "config.txt").write_text(f"# config_hash={chash}\n" + dump_config(cfg))
    results = out / "results.csv"
    reports: list[Report] = []
    for variant, T_tests in ablation_variants(cfg.run, args.ablation, args.values):
        reports.extend(run_pipeline(variant, out, T_tests, args.jobs, args.verbose))
    write_results(results, reports, chash)
    print(f"wrote {results} ({len(reports)} rows)")
    return 0


def cmd_tune(args) -> int:
    cfg = _config(args)
    run = cfg.run
    out = resolve_out(args.out or cfg.output_dir)
    chash = config_hash(cfg)
    seed = run.seeds[0]
    cache = ArtifactCache(out)
    ds, dkey = cache.dataset(run, seed)
    s, skey = cache.surrogate(run, seed, ds, dkey)
    enc_path = out / "cache" / f"encoder-{stable_hash('encoder', dkey, cfg.osel.encoder, seed)}.ckpt"
    if enc_path.exists():
        enc = load_encoder(enc_path)
    else:
        enc = _stage("encoder", train_encoder, ds, cfg.osel.encoder, seed)
        save_encoder(enc, enc_path)
    result = hyperparameter_select(
        ds,
        s,
        enc,
        cfg.osel.grid,
        run.seeds,
        run.agent,
        m=run.m,
        T=run.T,
        N=run.N,
        k=cfg.osel.k,
        k_tie=cfg.osel.k_tie,
        alpha_scale=run.alpha_scale,
    )
    grid_path = out / "grid.csv"
    save_grid(result, grid_path, chash)
    if result.tie_scores:
        print(f"tie broken by k={cfg.osel.k_tie} re-score: {result.tie_scores}")
    for p in result.missing:
        print(f"p={p:g} infeasible, cell missing")
    p_sel, e_sel = result.selected
    print(f"selected p={p_sel:g} epochs={e_sel} (osel score {result.scores[result.selected]:.6g}); wrote {grid_path}")
    return 0


def cmd_report(args) -> int:
    print(format_report(read_results(Path(args.results))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgsearch", description="Policy-guided gradient search for offline optimization")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = sub.add_parser("gen-data", help="sample a truncated offline dataset")
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--pool", type=int, default=5000)
    p.add_argument("--keep", type=float, default=40.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train-surrogate", help="fit the surrogate to a dataset CSV"))
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_surrogate)

    p = with_config(sub.add_parser("build-transitions", help="synthesize trajectories and the transition set"))
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_transitions)

    p = with_config(sub.add_parser("train-policy", help="train a CQL or SAC agent on a transition set"))
    p.add_argument("--transitions", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_policy)

    p = with_config(sub.add_parser("search", help="run guided (or plain) gradient search and score it"))
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--agent", help="agent checkpoint; omit for the fixed-step baseline")
    p.add_argument("--out", help="CSV of final designs")
    p.set_defaults(func=cmd_search)

    p = with_config(sub.add_parser("pipeline", help="end-to-end experiment to a results CSV"))
    p.add_argument("--out")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("values", nargs="?", help="comma-separated ablation values")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = with_config(sub.add_parser("tune", help="OSEL grid search over (p, epochs)"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="mean ± std table from a results CSV")
    p.add_argument("results")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
