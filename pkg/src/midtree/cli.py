"""Command-line entry point: ``midtree {train,eval,compare,oracle,make-pairs,plot}``.

Output layout under the run directory::

    config.yaml      snapshot of the resolved config
    checkpoints/     step_*.ckpt and final.ckpt
    logs/            train_log.csv (and abort.json after a non-finite loss)
    reports/         pairs.csv, evaluation reports, winning tables
    figures/         SVG path renderings

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 non-finite loss abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from . import neural as nn
from . import oracle
from .baselines.pg import load_stack, pg_train
from .baselines.seq import load_agent, ppo_train
from .config import TREE_METHODS, dump_config, load_config
from .exceptions import DomainError, InvalidInputError, NonFiniteLossError
from .figures import render_paths_svg
from .geometry import load_env, obstacle_free_euclid2d
from .learner import TreePolicy, load_state, save_state, train

log = logging.getLogger("midtree")

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_NONFINITE = 0, 1, 2, 3
OUT_ENV_VAR = "MIDTREE_OUT"
LOG_COLUMNS = ("timestep", "cycle", "depth", "success_rate")


def resolve_out(arg_out, cfg_out=None):
    """``--out`` wins; otherwise ``cfg_out`` (or ``runs``) below ``$MIDTREE_OUT`` when set."""
    if arg_out:
        return Path(arg_out)
    rel = Path(cfg_out or "runs")
    root = os.environ.get(OUT_ENV_VAR)
    if root and not rel.is_absolute():
        return Path(root) / rel
    return rel


def make_layout(out):
    out = Path(out)
    for sub in ("checkpoints", "logs", "reports", "figures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def write_log_csv(path, rows):
    if not rows:
        return
    # checkpoint metadata comes back with sorted keys, so fix the column order here
    lead = [k for k in LOG_COLUMNS if k in rows[0]]
    keys = lead + sorted(set(rows[0]) - set(lead))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    Path(path).write_text(buf.getvalue())


def latest_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    final = ckpt_dir / "final.ckpt"
    if final.exists():
        return final
    steps = sorted(ckpt_dir.glob("step_*.ckpt"))
    return steps[-1] if steps else None


def load_policy(path):
    """(env, policy, meta) for a checkpoint of any method."""
    _, _, header, _ = nn.load_checkpoint(path)
    method = header["meta"].get("method")
    if method == "midpoint_tree":
        env, cfg, state = load_state(path)
        return env, TreePolicy(state.actor, env), header["meta"]
    if method == "seq":
        env, cfg, agent, meta = load_agent(path)
        return env, agent, meta
    if method == "pg":
        env, cfg, stack, meta = load_stack(path)
        return env, stack, meta
    raise InvalidInputError(f"{path} has unknown method {method!r}")


def _policy_depth(meta):
    cfg = meta["config"]
    if "D_max" in cfg:
        return cfg["D_max"]
    return int(cfg["horizon"]).bit_length() - 1


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.T is not None:
        cfg.T = args.T
    out = make_layout(resolve_out(args.out, cfg.out))
    dump_config(cfg, out / "config.yaml")
    env = cfg.env
    if args.pairs:
        pairs = ev.check_env_compat(env, ev.read_pairs(args.pairs))
    else:
        spec = ev.EvalTaskSpec(2**cfg.D_max, cfg.epsilon, cfg.pair_count, cfg.pair_seed)
        pairs = ev.make_eval_set(env, spec, out / "reports" / "pairs.csv")
    task = ev.EvalTaskSpec(2**cfg.D_max, cfg.epsilon, len(pairs))

    if cfg.method in TREE_METHODS:
        lcfg = cfg.learner_config()
        if not lcfg.checkpoint_every:
            lcfg.checkpoint_every = max(1, cfg.T // 10)
        state = None
        resume = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(out / "checkpoints")
        if resume is not None:
            _, rcfg, state = load_state(resume)
            if (rcfg.seed, rcfg.D_max, rcfg.variant) != (lcfg.seed, lcfg.D_max, lcfg.variant):
                raise InvalidInputError(f"{resume} was written by a different configuration")
            log.info("resuming from %s at timestep %d", resume, state.timestep)
        try:
            if state is None or state.timestep < lcfg.T:
                state = train(env, lcfg, pairs, out, state=state, stop_after=args.stop_after)
        except NonFiniteLossError as exc:
            (out / "logs" / "abort.json").write_text(json.dumps(exc.record, indent=2, default=repr))
            raise
        if state.timestep < lcfg.T:
            # interrupted on request: leave a resumable checkpoint
            save_state(out / "checkpoints" / f"step_{state.timestep:012d}.ckpt", env, lcfg, state)
        write_log_csv(out / "logs" / "train_log.csv", state.log)
        policy, timestep = TreePolicy(state.actor, env), state.timestep
    elif cfg.method == "seq":
        policy, history = ppo_train(env, cfg.ppo_config(), pairs, out)
        write_log_csv(out / "logs" / "train_log.csv", history)
        timestep = history[-1]["timestep"] if history else 0
    else:
        policy, history, ledger = pg_train(env, cfg.pg_config(), pairs, out)
        write_log_csv(out / "logs" / "train_log.csv", history)
        timestep = ledger.total()

    report = ev.evaluate_success(policy, env, pairs, task, timestep)
    report.method = cfg.method
    ev.write_report(out / "reports" / f"final_{cfg.method}.csv", report)
    print(f"{cfg.method}: timestep={timestep} success_rate={report.success_rate:.3f}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint or not args.pairs:
        raise InvalidInputError("eval needs --checkpoint and --pairs")
    env, policy, meta = load_policy(args.checkpoint)
    pairs = ev.check_env_compat(env, ev.read_pairs(args.pairs))
    depth = args.depth if args.depth is not None else _policy_depth(meta)
    task = ev.EvalTaskSpec(2**depth, meta["config"]["epsilon"], len(pairs))
    report = ev.evaluate_success(policy, env, pairs, task, meta.get("timestep", 0), depth)
    method = args.name or meta["method"]
    report.method = method
    out = make_layout(resolve_out(args.out))
    path = out / "reports" / f"eval_{method}.csv"
    ev.write_report(path, report)
    print(f"{method}: success_rate={report.success_rate:.3f} -> {path}")
    if args.plot:
        _plot(env, policy, pairs[: args.plot], depth, out / "figures" / f"paths_{method}.svg")
    return EXIT_OK


def _plot(env, policy, pairs, depth, path):
    if env.d_rep != 2 and env.kind != "carlike":
        raise InvalidInputError(f"{env.kind} paths are not planar; nothing to render")
    d = env.d_rep
    paths = policy.generate(pairs[:, :d], pairs[:, d:], depth)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(render_paths_svg(env, list(paths)))
    print(f"wrote {path}")


def cmd_plot(args):
    if not args.checkpoint or not args.pairs:
        raise InvalidInputError("plot needs --checkpoint and --pairs")
    env, policy, meta = load_policy(args.checkpoint)
    pairs = ev.check_env_compat(env, ev.read_pairs(args.pairs))
    depth = args.depth if args.depth is not None else _policy_depth(meta)
    out = make_layout(resolve_out(args.out))
    _plot(env, policy, pairs[: args.count], depth, out / "figures" / f"paths_{meta['method']}.svg")
    return EXIT_OK


def cmd_compare(args):
    if len(args.reports) < 2:
        raise InvalidInputError("compare needs at least two reports")
    reports = {}
    for p in args.reports:
        rep = ev.read_report(p)
        name = rep.method or Path(p).stem
        while name in reports:
            name += "'"
        reports[name] = rep
    names, rows = ev.winning_table(reports)
    text = ev.render_table(names, rows)
    out = make_layout(resolve_out(args.out))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + names)
    for name, cells in rows:
        w.writerow([name] + cells)
    (out / "reports" / "winning_table.csv").write_text(buf.getvalue())
    (out / "reports" / "winning_table.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


ANALYTIC_MID = np.sqrt(2.5) - 1.0  # true midpoint of [0, 1] under the 1D fixture


def run_oracle(fixture, grid=None, iters=None, env_path=None):
    """Returns (report dict, passed). ``report['check']`` names the tolerance applied."""
    if env_path:
        env = load_env(env_path)
        if env.d_rep != 2 or env.disk_bounded:
            raise InvalidInputError("oracle grids are supported for 2D box environments")
        k = grid or 17
        nodes = oracle.euclid_grid(k, env.lower[0], env.upper[0])
        h = (env.upper[0] - env.lower[0]) / (k - 1)
        reference = oracle.graph_distance(env, nodes, edge_cap=1.5 * h)
        table, report = oracle.vi_converge(oracle.vi_init(nodes, env), 8 if iters is None else iters,
                                           reference)
        report["check"] = "graph distance, informational"
        return report, True
    if fixture == "analytic1d":
        k = grid or 129
        nodes = oracle.Analytic1D.grid(k)
        if len(nodes) > oracle.MAX_NODES:
            raise InvalidInputError(f"{len(nodes)} nodes exceed the cap of {oracle.MAX_NODES}")
        reference = oracle.Analytic1D.distance_matrix(nodes)
        table, report = oracle.vi_converge(oracle.vi_init(nodes, oracle.Analytic1D.cost),
                                           8 if iters is None else iters, reference, tol=0.0)
        v01 = float(table.V[0, -1])
        mid = float(nodes[table.mid_index[0, -1], 0])
        cell = 1.0 / (k - 1)
        rel = abs(v01 - 1.5) / 1.5
        passed = rel < 0.03 and abs(mid - ANALYTIC_MID) <= cell
        report.update({"V_0_1": v01, "V_0_1_rel_err": rel, "midpoint": mid,
                       "check": "|V(0,1) - 1.5| / 1.5 < 0.03 and midpoint within one cell"})
        return report, passed
    if fixture == "euclid2d":
        k = grid or 17
        nodes = oracle.euclid_grid(k)
        if len(nodes) > oracle.MAX_NODES:
            raise InvalidInputError(f"{len(nodes)} nodes exceed the cap of {oracle.MAX_NODES}")
        env = obstacle_free_euclid2d()
        reference = np.linalg.norm(nodes[:, None] - nodes[None], axis=-1)
        table, report = oracle.vi_converge(oracle.vi_init(nodes, env),
                                           8 if iters is None else iters, reference)
        passed = report["max_rel_err"] < 1e-9
        report["check"] = "max relative error against Euclidean distance < 1e-9"
        return report, passed
    raise InvalidInputError(f"unknown oracle fixture {fixture!r}")


def cmd_oracle(args):
    report, passed = run_oracle(args.fixture, args.grid, args.iters, args.env)
    report["passed"] = bool(passed)
    out = make_layout(resolve_out(args.out))
    stem = Path(args.env).stem if args.env else args.fixture
    (out / "reports" / f"oracle_{stem}.json").write_text(oracle.report_json(report) + "\n")
    (out / "reports" / f"oracle_{stem}.csv").write_text(oracle.report_csv(report))
    print(f"oracle {stem}: iterations={report['iterations']} "
          f"max_rel_err={report['max_rel_err']:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_make_pairs(args):
    cfg = load_config(args.config)
    seed = cfg.pair_seed if args.seed is None else args.seed
    spec = ev.EvalTaskSpec(2**cfg.D_max, cfg.epsilon, args.count or cfg.pair_count, seed)
    out = make_layout(resolve_out(args.out, cfg.out))
    path = out / "reports" / "pairs.csv"
    ev.make_eval_set(cfg.env, spec, path)
    print(f"wrote {spec.pair_count} pairs to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="midtree", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a planner from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--checkpoint", help="resume from this checkpoint (default: latest in --out)")
    t.add_argument("--pairs", help="evaluation pair file (default: generated)")
    t.add_argument("--T", type=int, help="override the timestep budget")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a pair file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pairs", required=True)
    e.add_argument("--depth", type=int)
    e.add_argument("--out")
    e.add_argument("--name", help="method label in the report")
    e.add_argument("--plot", type=int, default=0, help="render the first N pairs as SVG")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="winning-rate table from evaluation reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="value-iteration convergence check")
    o.add_argument("--fixture", choices=("analytic1d", "euclid2d"), default="analytic1d")
    o.add_argument("--env", help="environment file instead of a fixture")
    o.add_argument("--grid", type=int)
    o.add_argument("--iters", type=int)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    m = sub.add_parser("make-pairs", help="write a seeded evaluation pair file")
    m.add_argument("--config", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--count", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_make_pairs)

    g = sub.add_parser("plot", help="render planar paths as SVG")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--pairs", required=True)
    g.add_argument("--depth", type=int)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--out")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (InvalidInputError, DomainError, OSError, KeyError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
