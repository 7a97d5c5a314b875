"""Command line entry point: ``bmil {demos,train,eval,ablate,verify,plot}``.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .demos import expert_policy, record_demos
from .envs import ENV_IDS, make_env
from .trainer import MODES, TrainConfig, TrainingAborted, evaluate, load_or_record_demos, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_ABORT = 0, 1, 2, 3

ABLATION_CELLS = OrderedDict([
    ("bmil", {"mode": "bmil"}),
    ("bmil-noreg", {"mode": "bmil-noreg"}),
    ("task-agnostic", {"mode": "task-agnostic"}),
    ("forward-only", {"mode": "bmil", "only": "forward"}),
    ("inverse-only", {"mode": "bmil", "only": "inverse"}),
    ("action-only", {"mode": "bmil", "only": "action"}),
    ("k1", {"mode": "bmil", "k": "1"}),
    ("k1-5", {"mode": "bmil", "k": "1,5"}),
    ("k1-10", {"mode": "bmil", "k": "1,10"}),
])
ABLATION_SUITES = {
    "all": list(ABLATION_CELLS),
    "modes": ["bmil", "bmil-noreg", "task-agnostic"],
    "components": ["bmil", "forward-only", "inverse-only", "action-only"],
    "offsets": ["k1", "k1-5", "k1-10"],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_keys_help() -> str:
    cfg = TrainConfig()
    lines = ["configuration keys (--set KEY=VALUE; the part after the dot alone also works):"]
    for k in cfg.keys():
        v = cfg.get(k)
        shown = ",".join(map(str, v)) if isinstance(v, tuple) else v
        lines.append(f"  {k} (default {shown})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    keys_help = _config_keys_help()
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="bmil", description="Belief-module imitation learning on partially observed toys.",
                epilog=keys_help, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("demos", help="record expert demonstrations", formatter_class=fmt)
    d.add_argument("--env", required=True, help=f"environment id ({', '.join(ENV_IDS)})")
    d.add_argument("--n", type=int, default=50, help="number of episodes (default 50)")
    d.add_argument("--seed", type=int, default=1000, help="recording seed (default 1000)")
    d.add_argument("--out", required=True, help="output demo file")

    def add_train_flags(sp):
        sp.add_argument("--config", help="INI config file; --set and other flags override it")
        sp.add_argument("--env", help="environment id (env.id)")
        sp.add_argument("--demos", help="demo file (env.demos); omitted records demos in memory")
        sp.add_argument("--out", help="output directory (run.out_dir)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key; repeatable")

    t = sub.add_parser("train", help="train one run", epilog=keys_help, formatter_class=fmt)
    add_train_flags(t)
    t.add_argument("--mode", help=f"training mode ({', '.join(MODES)})")
    t.add_argument("--seed", type=int, help="run seed (run.seed)")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    e.add_argument("--env", help="environment id (default: the one trained on)")
    e.add_argument("--episodes", type=int, default=10, help="evaluation episodes (default 10)")
    e.add_argument("--seed", type=int, default=2024, help="evaluation seed (default 2024)")

    a = sub.add_parser("ablate", help="run an ablation grid", epilog=keys_help, formatter_class=fmt)
    add_train_flags(a)
    a.add_argument("--suite", default="all", choices=sorted(ABLATION_SUITES),
                   help="cells to run: all, modes (bmil/bmil-noreg/task-agnostic), "
                        "components (forward/inverse/action only) or offsets (k sets); default all")
    a.add_argument("--seeds", type=int, default=5, help="seeds per cell, starting at --seed (default 5)")
    a.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    a.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes (default 1)")

    v = sub.add_parser("verify", help="run a verification suite", formatter_class=fmt)
    v.add_argument("--suite", required=True, choices=["dpi", "grad"],
                   help="dpi: divergence chain on random tabular POMDPs; grad: finite-difference checks")
    v.add_argument("--instances", type=int, default=100, help="random instances (default 100)")
    v.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    v.add_argument("--identical", action="store_true", help="dpi only: compare a policy with itself")

    pl = sub.add_parser("plot", help="render learning curves to SVG", formatter_class=fmt)
    pl.add_argument("--metrics", nargs="+", required=True, help="metrics CSV files; _s<seed> suffixes are grouped")
    pl.add_argument("--out", required=True, help="output SVG file")
    pl.add_argument("--x", default="env_steps", help="x column (default env_steps)")
    pl.add_argument("--y", default="return_mean", help="y column (default return_mean)")
    pl.add_argument("--title", default="", help="figure title")
    return p


# ---------------------------------------------------------------------------
# commands


def config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    for flag, key in (("env", "env.id"), ("demos", "env.demos"), ("out", "run.out_dir"),
                      ("mode", "run.mode"), ("seed", "run.seed")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(key, val)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg.set(key.strip(), value.strip())
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def cmd_demos(args) -> int:
    try:
        env = make_env(args.env)
        expert = expert_policy(args.env)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    buf = record_demos(env, expert, args.n, np.random.default_rng(args.seed), path=args.out, seed=args.seed)
    print(f"recorded {len(buf)} episodes to {args.out}; expert mean return {buf.meta['expert_mean_return']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    metrics, ckpt = train(cfg)
    print(f"metrics {metrics}\ncheckpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    res = evaluate(args.checkpoint, args.env, args.episodes, np.random.default_rng(args.seed))
    print(f"return_mean {res['mean']:.6f} return_std {res['std']:.6f} belief_var {res['belief_var']:.6e}")
    return EXIT_OK


def ablation_configs(base: TrainConfig, suite: str, seeds: int, first_seed: int = 0) -> list[TrainConfig]:
    """One config per (cell, seed), named ``{env}_{cell}_s{seed}``."""
    out = []
    for cell in ABLATION_SUITES[suite]:
        for seed in range(first_seed, first_seed + seeds):
            cfg = TrainConfig.from_dict(base.to_dict())
            for k, v in ABLATION_CELLS[cell].items():
                cfg.set(k, v)
            cfg.run.seed = seed
            cfg.run.name = f"{cfg.env.id}_{cell}_s{seed}"
            out.append(cfg)
    return out


def _train_cell(cfg_dict: dict) -> str:
    cfg = TrainConfig.from_dict(cfg_dict)
    metrics, _ = train(cfg, load_or_record_demos(cfg))
    return str(metrics)


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    cells = ablation_configs(base, args.suite, args.seeds, args.seed)
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            paths = list(pool.map(_train_cell, [c.to_dict() for c in cells]))
    else:
        paths = [_train_cell(c.to_dict()) for c in cells]
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify
    if args.instances < 0:
        raise UsageError("--instances must be nonnegative")
    if args.suite == "dpi":
        try:
            reports = verify.run_dpi_suite(args.instances, args.seed, identical=args.identical)
        except verify.EnumerationGuardError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VERIFY
        for r in reports:
            print(r.line())
        ok = all(r.ok for r in reports)
    else:
        if args.instances == 0:
            return EXIT_OK
        results = verify.run_grad_suite(args.instances, args.seed)
        for r in results:
            print(r.line(), flush=True)
        ok = all(r.passed for r in results)
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# plotting


class MalformedMetrics(ValueError):
    pass


def read_metrics(path, x: str = "env_steps", y: str = "return_mean") -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or x not in reader.fieldnames or y not in reader.fieldnames:
            raise MalformedMetrics(f"{path}: missing column {x!r} or {y!r}")
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(float(row[x]))
                ys.append(float(row[y]))
            except (TypeError, ValueError) as exc:
                raise MalformedMetrics(f"{path}:{lineno}: non-numeric {x}/{y}") from exc
    if not xs:
        raise MalformedMetrics(f"{path}: no rows")
    return np.array(xs), np.array(ys)


def group_name(path) -> str:
    return re.sub(r"_s\d+$", "", Path(path).stem)


def group_curves(paths, x: str = "env_steps", y: str = "return_mean") -> "OrderedDict[str, tuple]":
    """Per group: x values shared by every member, mean and std across members."""
    runs: OrderedDict[str, list] = OrderedDict()
    for p in paths:
        runs.setdefault(group_name(p), []).append(read_metrics(p, x, y))
    out = OrderedDict()
    for name, members in runs.items():
        common = members[0][0]
        for xs, _ in members[1:]:
            common = np.intersect1d(common, xs)
        ys = np.stack([m[1][np.searchsorted(m[0], common)] for m in members])
        out[name] = (common, ys.mean(axis=0), ys.std(axis=0), len(members))
    return out


def render_svg(groups, out, xlabel: str = "env_steps", ylabel: str = "return_mean", title: str = "") -> None:
    """Mean line per group and a +-1 std band when the group has several runs."""
    import matplotlib
    from matplotlib.figure import Figure

    with matplotlib.rc_context({"svg.hashsalt": "bmil", "svg.fonttype": "none"}):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        for name, (xs, mean, std, n) in groups.items():
            line, = ax.plot(xs, mean, label=f"{name} (n={n})")
            if n > 1:
                ax.fill_between(xs, mean - std, mean + std, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})


def cmd_plot(args) -> int:
    try:
        groups = group_curves(args.metrics, args.x, args.y)
    except (OSError, MalformedMetrics) as exc:
        raise UsageError(str(exc)) from exc
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    render_svg(groups, args.out, args.x, args.y, args.title)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"demos": cmd_demos, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "verify": cmd_verify, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bmil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"bmil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, ad.NonFiniteError) as exc:
        print(f"bmil {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
