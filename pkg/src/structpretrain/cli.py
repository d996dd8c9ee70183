"""``structpretrain`` command line: corpus generation, targets, pre-training and adaptation.

Exit codes: 0 success, 1 user error (bad flags, config, input files), 2 internal error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import adapt as A
from . import model as M
from .centrality import ConvergenceError, centrality_targets, write_centrality_csv
from .checkpoint import (Checkpoint, CheckpointError, MetricsWriter, OptimizerState, file_checksum,
                         check_against_config, read_checkpoint, write_checkpoint)
from .config import RunConfig
from .features import assemble_features, write_features_csv
from .graph import GraphInputError, read_graph
from .pretrain import TrainingError, pretrain_run, validation_loss
from .synth import ConfigError, generate_corpus, load_corpus

THREADS_ENV = "STRUCTPRETRAIN_THREADS"
CONFIG_ECHO = "config.cfg"

log = logging.getLogger("structpretrain")

USER_ERRORS = (ConfigError, GraphInputError, CheckpointError, A.AdaptError, FileNotFoundError,
               IsADirectoryError, PermissionError, ConvergenceError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS, no wall-clock fields in logs")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="structpretrain", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write synthetic DCBM graphs, sidecars and a manifest")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force-regimes", action="store_true", default=None)

    for name, what in (("features", "local structural features"), ("centrality", "centrality targets")):
        p = sub.add_parser(name, help=f"CSV of {what} for one graph file")
        _common(p)
        p.add_argument("graph")
        p.add_argument("--out", help="output CSV (default: stdout)")

    p = sub.add_parser("pretrain", help="self-supervised pre-training on a corpus manifest")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    for name in ("finetune", "sweep-boundary"):
        p = sub.add_parser(name, help="fine-tune on a synthetic downstream task" if name == "finetune"
                           else "fine-tune over fix-tune boundaries, pretrained vs random above b")
        _common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--task", choices=A.TASK_KINDS)
        p.add_argument("--seeds", type=int)
        p.add_argument("--epochs", type=int)
        if name == "finetune":
            p.add_argument("--boundary", type=int)
            p.add_argument("--init-mode", choices=A.INIT_MODES)
        else:
            p.add_argument("--boundaries", help="comma-separated, default 0..L+1")

    p = sub.add_parser("eval", help="validation losses of a checkpoint on a corpus")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))

    p = sub.add_parser("inspect-checkpoint", help="print header, arrays and checksum of a checkpoint")
    p.add_argument("path")
    return ap


_FLAG_KEYS = {
    "count": "gen.count", "out": "path.out", "corpus": "path.corpus", "steps": "pretrain.max_steps",
    "checkpoint": "path.checkpoint", "task": "adapt.task", "seeds": "adapt.seeds",
    "epochs": "adapt.epochs", "boundary": "adapt.boundary", "init_mode": "adapt.init_mode",
    "boundaries": "adapt.boundaries", "force_regimes": "gen.force_regimes",
}


def resolve_config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = str(val)
    if getattr(args, "seed", None) is not None:
        overrides["gen.seed" if args.command == "gen-corpus" else "seed"] = str(args.seed)
    if args.deterministic:
        overrides["deterministic"] = "true"
    return RunConfig.load(args.config, overrides)


def thread_limit(cfg: RunConfig):
    """Context limiting BLAS threads: config ``threads``, else $STRUCTPRETRAIN_THREADS, 1 if deterministic."""
    n = cfg["threads"]
    if n == 0 and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    if cfg["deterministic"]:
        n = 1
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _out_dir(cfg: RunConfig, command: str) -> Path:
    if not cfg["path.out"]:
        raise ConfigError(f"{command} needs an output directory (--out or path.out)")
    out = Path(cfg["path.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_echo(path: Path, cfg: RunConfig, command: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# structpretrain {command}; rerun with --config {path.name}\n")
        fh.write(cfg.dump())


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg, "gen-corpus")
    write_echo(out / CONFIG_ECHO, cfg, "gen-corpus")
    manifest = generate_corpus(cfg["gen.count"], cfg.ranges(), cfg["gen.seed"], out,
                               force_regimes=cfg["gen.force_regimes"], train_fraction=cfg["gen.train_fraction"])
    print(json.dumps({"graphs": len(manifest), "manifest": str(out / "manifest.jsonl")}))
    return 0


def _graph_table(args, cfg: RunConfig, kind: str) -> int:
    g, _ = read_graph(args.graph)
    if kind == "features":
        feats = assemble_features(g)
        writer = lambda path: write_features_csv(path, feats)  # noqa: E731
    else:
        scores = centrality_targets(g)
        writer = lambda path: write_centrality_csv(path, scores)  # noqa: E731
    if args.out:
        out = Path(args.out)
        writer(out)
        write_echo(out.with_name(out.name + ".cfg"), cfg, kind)
    else:
        writer(sys.stdout)
    return 0


def _beta_rows(step: int, beta: dict) -> list[tuple]:
    return [(step, task, layer + 1, repr(float(b))) for task, row in beta.items() for layer, b in enumerate(row)]


def cmd_pretrain(args, cfg: RunConfig) -> int:
    if not cfg["path.corpus"]:
        raise ConfigError("pretrain needs a corpus manifest (--corpus or path.corpus)")
    out = _out_dir(cfg, "pretrain")
    write_echo(out / CONFIG_ECHO, cfg, "pretrain")
    corpus = load_corpus(cfg["path.corpus"])
    model_cfg, pcfg = cfg.model_config(), cfg.pretrain_config()
    with_time = not cfg["deterministic"]
    beta_path = out / "beta.csv"
    with MetricsWriter(out / "metrics.jsonl") as mw, open(beta_path, "w", newline="") as bfh:
        bw = csv.writer(bfh, lineterminator="\n")
        bw.writerow(("step", "task", "layer", "beta"))

        def on_step(m):
            mw.write(m.record(with_time=with_time))
            bw.writerows(_beta_rows(m.step, m.beta))

        res = pretrain_run(corpus, pcfg, model_cfg, on_step=on_step)
    meta = {"best_step": res.best_step, "best_val": res.best_val, "initial_val": res.initial_val,
            "seed": pcfg.seed, "steps": pcfg.max_steps}
    best_sum = write_checkpoint(out / "best.ckpt", Checkpoint(model_cfg.to_dict(), res.best_arrays,
                                                              meta=dict(meta, which="best")))
    last_sum = write_checkpoint(out / "last.ckpt", Checkpoint(model_cfg.to_dict(), res.final_arrays,
                                                              OptimizerState.from_adam(res.optimizer),
                                                              meta=dict(meta, which="last")))
    final_beta = res.metrics[-1].beta if res.metrics else {}
    summary = dict(meta, best_checksum=best_sum, last_checksum=last_sum, final_beta=final_beta)
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"best_step": res.best_step, "best_val": res.best_val, "best_checksum": best_sum,
                      "final_beta": final_beta}))
    return 0


def build_task(cfg: RunConfig) -> A.DownstreamTask:
    rng = np.random.default_rng([cfg["adapt.task_seed"], 101])
    kind = cfg["adapt.task"]
    if kind == "node":
        return A.make_synthetic_task("node", rng, node_cfg=cfg.node_task_config())
    if kind == "graph":
        return A.make_synthetic_task("graph", rng, ranges=cfg.task_ranges(),
                                     per_regime=cfg["adapt.graph_per_regime"])
    return A.make_synthetic_task("link", rng, ranges=cfg.task_ranges())


def _load_ckpt(cfg: RunConfig, required: bool) -> Checkpoint | None:
    path = cfg["path.checkpoint"]
    if not path:
        if required:
            raise ConfigError("a checkpoint is required (--checkpoint or path.checkpoint)")
        return None
    ckpt = read_checkpoint(path)
    A.check_config_match(ckpt.model_config(), cfg.model_config())
    return ckpt


def cmd_finetune(args, cfg: RunConfig) -> int:
    mode = cfg["adapt.init_mode"]
    ckpt = _load_ckpt(cfg, required=mode != "scratch")
    out = _out_dir(cfg, "finetune")
    write_echo(out / CONFIG_ECHO, cfg, "finetune")
    task = build_task(cfg)
    ft = cfg.finetune_config()
    rows = [A.run_cell(ckpt, task, cfg.model_config(), cfg["adapt.boundary"], mode, s, ft)
            for s in range(cfg["adapt.seeds"])]
    A.write_results_csv(out / "results.csv", rows)
    summary = A.summarize(rows)
    A.write_summary_csv(out / "summary.csv", summary)
    print(json.dumps(summary))
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(cfg, required=True)
    out = _out_dir(cfg, "sweep-boundary")
    write_echo(out / CONFIG_ECHO, cfg, "sweep-boundary")
    model_cfg = cfg.model_config()
    bs = cfg["adapt.boundaries"] or tuple(range(model_cfg.num_layers + 2))
    res = A.boundary_sweep(ckpt, build_task(cfg), model_cfg, bs, range(cfg["adapt.seeds"]),
                           cfg.finetune_config())
    A.write_results_csv(out / "results.csv", res.rows)
    A.write_summary_csv(out / "summary.csv", res.summary)
    for r in res.summary:
        print(f"b={r['boundary']} {r['init_mode']:<10} {r['mean_f1']:.4f} +- {r['std_f1']:.4f} (n={r['n_seeds']})")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = _load_ckpt(cfg, required=True)
    check_against_config(ckpt)
    if not cfg["path.corpus"]:
        raise ConfigError("eval needs a corpus manifest (--corpus or path.corpus)")
    corpus = load_corpus(cfg["path.corpus"])
    graphs = corpus if args.split == "all" else [c for c in corpus if c.split == args.split]
    if not graphs:
        raise ConfigError(f"corpus has no {args.split} graphs")
    params = M.from_arrays(ckpt.arrays)
    total = validation_loss(graphs, params, cfg.pretrain_config(), ckpt.model_config())
    print(json.dumps({"split": args.split, "graphs": len(graphs), "mean_total_loss": total}))
    return 0


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.path)
    info = {"checksum": file_checksum(args.path), "config": ckpt.config, "meta": ckpt.meta,
            "arrays": {k: list(v.shape) for k, v in ckpt.arrays.items()},
            "n_values": int(sum(v.size for v in ckpt.arrays.values())),
            "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.t}
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "sweep-boundary": cmd_sweep, "eval": cmd_eval,
            "features": lambda a, c: _graph_table(a, c, "features"),
            "centrality": lambda a, c: _graph_table(a, c, "centrality")}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.command == "inspect-checkpoint":
            return cmd_inspect(args)
        cfg = resolve_config(args)
        with thread_limit(cfg):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except USER_ERRORS as exc:
        detail = getattr(exc, "details", None)
        sys.stderr.write(f"error: {exc}\n" + (f"details: {json.dumps(detail, default=str)}\n" if detail else ""))
        return 1
    except TrainingError as exc:
        sys.stderr.write(f"training failed: {exc}\n")
        return 2
    except Exception:  # noqa: BLE001
        sys.stderr.write("internal error:\n" + traceback.format_exc())
        return 2


if __name__ == "__main__":
    sys.exit(main())
