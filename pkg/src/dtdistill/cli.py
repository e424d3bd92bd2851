"""Command line entry point: ``dtdistill run|sweep|ablate|inspect-tree``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from . import plotting
from .bandit import write_log
from .dtree import deserialize, feature_names_of, render, serialize
from .errors import ConfigError, DistillError, StageError, TreeParseError
from .pipeline import STAGES, ExperimentConfig, expert_for, run

OUTPUT_ENV = "DTDISTILL_OUTPUT_DIR"
FLAGS = ("disable_cq", "disable_tra", "disable_vrucb")

log = logging.getLogger("dtdistill")


class UsageError(Exception):
    pass


def parse_value(text: str):
    """JSON if it parses (numbers, booleans, lists), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = parse_value(value)
    return out


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = parse_overrides(args.override)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return cfg.with_overrides(overrides) if overrides else cfg


def output_dir(args, cfg) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _runtime_row(prefix, report):
    row = dict(prefix)
    row["seed"] = report.seed
    row.update({s: f"{report.stage_seconds[s]:.6f}" for s in STAGES})
    row["wall_seconds"] = f"{report.wall_seconds:.6f}"
    return row


def _run_grid(cfg, labelled):
    """Run every (label columns, config) pair over all seeds."""
    rows, runtimes, reports = [], [], []
    for prefix, c in labelled:
        try:
            expert_for(c.env, c.solver_tol)  # solve outside the timed runs
        except DistillError as exc:
            raise StageError("setup", exc) from exc
        for seed in c.seeds:
            rep = run(c, seed)
            rows.append({**prefix, **rep.row()})
            runtimes.append(_runtime_row(prefix, rep))
            reports.append((prefix, rep))
    return rows, runtimes, reports


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    rows, runtimes, reports = _run_grid(cfg, [({}, cfg)])
    _write_csv(out / "report.csv", rows)
    _write_csv(out / "runtime.csv", runtimes)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    write_log(out / "ucb_log.csv",
              [(rep.seed, t, st) for _, rep in reports for t, st in enumerate(rep.bandits)])
    game, _ = expert_for(cfg.env, cfg.solver_tol)
    tree_dir = out / "trees"
    tree_dir.mkdir(exist_ok=True)
    for _, rep in reports:
        for i, tree in enumerate(rep.trees):
            (tree_dir / f"seed{rep.seed}_agent{i}.tree").write_text(
                serialize(tree, game.feature_names[i]))
        if cfg.dump_dataset and rep.dataset is not None:
            rep.dataset.dump(out / f"dataset_dump_seed{rep.seed}.tsv")
        if rep.graph is not None:
            rep.graph.dump(out / f"agent_graph_seed{rep.seed}.txt", rep.teams)
    plotting.plot_runtime({"run": [r.stage_seconds for _, r in reports]}, out / "runtime.png")
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values needs at least one value")
    labelled = [({"param": args.param, "value": json.dumps(v)}, cfg.with_overrides({args.param: v}))
                for v in values]
    out = output_dir(args, cfg)
    rows, runtimes, reports = _run_grid(cfg, labelled)
    _write_csv(out / "report.csv", rows)
    _write_csv(out / "runtime.csv", runtimes)
    groups = {}
    for prefix, rep in reports:
        groups.setdefault(prefix["value"], []).append(rep.mean_return)
    plotting.plot_sweep(args.param, groups, out / "sweep.png")
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    labelled = []
    for combo in itertools.product((False, True), repeat=len(FLAGS)):
        flags = dict(zip(FLAGS, combo))
        labelled.append(({k: int(v) for k, v in flags.items()}, cfg.with_overrides(flags)))
    out = output_dir(args, cfg)
    rows, runtimes, reports = _run_grid(cfg, labelled)
    _write_csv(out / "report.csv", rows)
    _write_csv(out / "runtime.csv", runtimes)
    groups, times = {}, {}
    for prefix, rep in reports:
        label = "-".join(k.split("_")[1] for k in FLAGS if prefix[k]) or "full"
        groups.setdefault(label, []).append(rep.mean_return)
        times.setdefault(label, []).append(rep.stage_seconds)
    plotting.plot_ablation(groups, out / "ablation.png")
    plotting.plot_runtime(times, out / "runtime.png")
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return 0


def cmd_inspect(args) -> int:
    try:
        text = Path(args.tree).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {args.tree}: {exc.strerror}") from None
    tree = deserialize(text)
    names = args.features.split(",") if args.features else feature_names_of(text)
    if names is not None and len(names) != tree.n_features:
        raise UsageError(f"{len(names)} feature names for a tree over {tree.n_features} features")
    sys.stdout.write(render(tree, names))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtdistill", description="Distil tabular team experts into decision trees.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults used if omitted)")
        sp.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="replace a config entry; dotted keys reach into env, e.g. env.horizon=8")
        sp.add_argument("--output-dir", help=f"output directory (else ${OUTPUT_ENV}, else the config's)")

    sp = sub.add_parser("run", help="run one configuration over its seeds")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("sweep", help="vary one config entry over a list of values")
    common(sp)
    sp.add_argument("--param", required=True, help="config key to vary (dotted keys allowed)")
    sp.add_argument("--values", required=True, help="comma-separated values, JSON-parsed")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("ablate", help="run the 2x2x2 grid of disable_cq/disable_tra/disable_vrucb")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("inspect-tree", help="pretty-print a serialized tree")
    sp.add_argument("tree", help="path to a .tree file")
    sp.add_argument("--features", help="comma-separated feature names (default: from the file)")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dtdistill: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"dtdistill: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, ConfigError) else 1
    except TreeParseError as exc:
        print(f"dtdistill: error: cannot parse tree: {exc}", file=sys.stderr)
        return 1
    except DistillError as exc:
        print(f"dtdistill: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
