"""Command-line entry point.

Every subcommand reads an experiment config (``--config``, JSON) and works
on the first cell it defines: ``method``, ``K``, ``seed`` and
``data_fraction`` pick the cell, and ``split`` picks the novel source
domains. The grid commands (``experiment``, ``sweep-k``, ``sweep-fraction``,
``ablate-gamma``) run the whole grid instead.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fewdomain import pipeline
from fewdomain.config import load_config
from fewdomain.model import ParameterSet
from fewdomain.pipeline import HEADER, NOVEL_HEAD, ExperimentConfig
from fewdomain.taskbench import write_feature_file

log = logging.getLogger("fewdomain")


class CLIError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, seeds=None)
    if args.out is not None and args.command in GRID_COMMANDS:
        cfg = replace(cfg, output_path=args.out)
    return cfg


def _cell(cfg: ExperimentConfig) -> pipeline.Cell:
    return pipeline.prepare_cells(cfg, cfg.method, cfg.K, cfg.seed, cfg.data_fraction)[0]


def _load_params(path, cell: pipeline.Cell) -> ParameterSet:
    if path is None:
        return cell.params
    params = ParameterSet.load(path)
    params.validate()
    if params.input_dim != cell.params.input_dim:
        raise CLIError(f"{path}: input dimension {params.input_dim} does not match the novel task's "
                       f"{cell.params.input_dim}")
    if NOVEL_HEAD not in params.heads:
        raise CLIError(f"{path}: no novel-task head")
    return params


def _need_out(args) -> Path:
    if args.out is None:
        raise CLIError(f"{args.command} requires --out")
    return Path(args.out)


def cmd_pretrain(args, cfg):
    out = _need_out(args)
    cell = _cell(cfg)
    pre = pipeline.pretrain_cell(cell, cfg)
    pre.params.save(out)
    print(f"pretrained {cell.method} for {cfg.pretrain_iters if cell.method != 'erm' else 0} iterations, "
          f"{len(pre.refreshes)} similarity refreshes; parameters written to {out}")


def cmd_finetune(args, cfg):
    out = _need_out(args)
    cell = _cell(cfg)
    tuned = pipeline.finetune_cell(cell, _load_params(args.params, cell), cfg)
    tuned.save(out)
    print(f"fine-tuned on {','.join(d.domain_id for d in cell.sources)}; parameters written to {out}")


def cmd_evaluate(args, cfg):
    cell = _cell(cfg)
    rec = pipeline.evaluate_cell(cell, _load_params(args.params, cell), cfg)
    text = "\n".join([HEADER, *rec.rows()]) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_similarity(args, cfg):
    cell = _cell(cfg)
    records = pipeline.similarity_records(cell, cfg, _load_params(args.params, cell) if args.params else None)
    text = "\n".join(["task_id,s,q,sim,p", *(r.row() for r in records)]) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_experiment(args, cfg):
    records = pipeline.run_experiment(cfg)
    where = f" in {cfg.output_path}" if cfg.output_path else ""
    print(f"{len(records)} records{where}")
    if not cfg.output_path:
        sys.stdout.write("\n".join([HEADER] + [row for r in records for row in r.rows()]) + "\n")


def _summary_cmd(fn):
    def run(args, cfg):
        summary, _ = fn(cfg)
        print(summary.render())
    return run


def cmd_gen_tasks(args, cfg):
    out = _need_out(args)
    base, novel = pipeline.build_tasks(cfg, cfg.seed)
    write_feature_file(out, [*base, novel])
    print(f"wrote {len(base) + 1} tasks to {out}")


COMMANDS = {
    "pretrain": (cmd_pretrain, "episodic pre-training on the base pool; saves parameters"),
    "finetune": (cmd_finetune, "fine-tune on the visible novel source domains; saves parameters"),
    "evaluate": (cmd_evaluate, "OOD accuracy on the novel target domains"),
    "similarity": (cmd_similarity, "score every base task against the novel task"),
    "experiment": (cmd_experiment, "run the configured grid and append metrics rows"),
    "sweep-k": (_summary_cmd(pipeline.sweep_k), "accuracy table over K"),
    "sweep-fraction": (_summary_cmd(pipeline.sweep_fraction), "accuracy table over data fractions"),
    "ablate-gamma": (_summary_cmd(pipeline.ablate_gamma), "uniform vs gamma=0 vs full similarity"),
    "gen-tasks": (cmd_gen_tasks, "write the configured synthetic tasks to a feature file"),
}
GRID_COMMANDS = {"experiment", "sweep-k", "sweep-fraction", "ablate-gamma"}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not clobber flags given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config", **kw)
    common.add_argument("--seed", type=int, help="override the config seed (and its seed grid)", **kw)
    common.add_argument("--out", help="output path", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewdomain", parents=[_common(False)],
                                     description="Few-domain generalization with adaptive task sampling.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[_common(True)])
        if name in ("finetune", "evaluate", "similarity"):
            p.add_argument("--params", help="parameter file (.npz) from an earlier step")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "params"):
        args.params = None
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](args, cfg)
    except (CLIError, ValueError, KeyError, TypeError, OSError, ArithmeticError,
            pipeline.LeakageError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
