"""Command-line entry point: ``satdiff <command> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from satdiff import dataset as ds
from satdiff.diffusion import make_schedule, reverse_sample_batch
from satdiff.evaluate import (
    ArgmaxSampler,
    DiffusionSampler,
    TimingCase,
    UniformSampler,
    eval_accuracy,
    eval_agreement,
    eval_timing,
    eval_uniqueness,
    write_summary_csv,
)
from satdiff.formula import DimacsError, format_solution, read_dimacs, write_solutions
from satdiff.generators import gen_3sat
from satdiff.model import CheckpointError, GnnDenoiser, ModelConfig, load_checkpoint
from satdiff.oracle import DEFAULT_CAP, ExactDenoiser, enumerate_solutions
from satdiff.train import TrainConfig, train_loop

log = logging.getLogger("satdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if a < 1 or b < a:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return a, b


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(args) -> int:
    seed = 0 if args.seed is None else args.seed
    print(f"seed={seed}", file=sys.stderr)
    return seed


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="satdiff", description="Diffusion sampling of SAT solutions.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on numeric worker threads (default: all available)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a dataset directory")
    gen_sub = gen.add_subparsers(dest="family", required=True, parser_class=_Parser)
    g3 = gen_sub.add_parser("3sat")
    g3.add_argument("--vars", type=_range, required=True, metavar="A..B")
    g3.add_argument("--mode", default="threshold", help="threshold or ratio:R")
    gc = gen_sub.add_parser("clique")
    gc.add_argument("--vertices", type=_range, required=True, metavar="A..B")
    for g in (g3, gc):
        g.add_argument("--count", type=int, required=True)
        g.add_argument("--seed", type=int)
        g.add_argument("--out", required=True, metavar="DIR")
        g.add_argument("--enumerate-cap", type=int, default=None, metavar="K",
                       help="also write .solutions files, enumerating up to K solutions")

    en = sub.add_parser("enumerate", help="list all solutions of a CNF file")
    en.add_argument("--cnf", required=True)
    en.add_argument("--cap", type=int, default=DEFAULT_CAP)
    en.add_argument("--out", default=None, help="solution file (default: stdout)")

    tr = sub.add_parser("train", help="train a denoiser")
    tr.add_argument("--data", required=True, metavar="DIR")
    tr.add_argument("--steps", type=int, default=20_000)
    tr.add_argument("--t-steps", type=int, default=128)
    tr.add_argument("--dim", type=int, default=64)
    tr.add_argument("--iters", type=int, default=32)
    tr.add_argument("--solution-mode", choices=["first", "uniform"], default="first")
    tr.add_argument("--max-vars", type=int, default=2000)
    tr.add_argument("--lr", type=float, default=3e-3)
    tr.add_argument("--lr-schedule", choices=["constant", "cosine"], default="constant")
    tr.add_argument("--clip", type=float, default=None)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--log", default=None)
    tr.add_argument("--resume", action="store_true")

    sa = sub.add_parser("sample", help="sample assignments for one CNF file")
    sa.add_argument("--ckpt", default=None)
    sa.add_argument("--cnf", required=True)
    sa.add_argument("--samples", type=int, default=1)
    sa.add_argument("--t-steps", type=int, default=32)
    sa.add_argument("--seed", type=int)
    sa.add_argument("--oracle", action="store_true", help="use the exact enumeration denoiser")
    sa.add_argument("--cap", type=int, default=DEFAULT_CAP)

    ev = sub.add_parser("eval", help="evaluate a sampler on a dataset")
    ev.add_argument("metric", choices=["accuracy", "diversity", "agreement", "timing"])
    ev.add_argument("--ckpt", default=None)
    ev.add_argument("--data", default=None, metavar="DIR")
    ev.add_argument("--csv", required=True)
    ev.add_argument("--t-steps", type=int, default=32)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--runs", type=int, default=5)
    ev.add_argument("--samples", type=int, default=100)
    ev.add_argument("--repetitions", type=int, default=10)
    ev.add_argument("--sampler", choices=["diffusion", "argmax", "uniform", "oracle"], default="diffusion")
    ev.add_argument("--sizes", type=_int_list, default=[20, 40, 60, 80, 100],
                    help="timing sweep when no --data is given")
    ev.add_argument("--batch", type=int, default=8, help="timing batch size")
    ev.add_argument("--cap", type=int, default=DEFAULT_CAP)
    return p


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    seed = _seed(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.family == "3sat":
        paths = ds.generate_3sat(args.out, args.vars, args.mode, args.count, seed, args.enumerate_cap)
    else:
        if args.vertices[0] < 4:
            raise UsageError("--vertices must start at 4 or more")
        paths = ds.generate_clique(args.out, args.vertices, args.count, seed, args.enumerate_cap)
    print(f"wrote {len(paths)} instances to {args.out}", file=sys.stderr)
    return 0


def cmd_enumerate(args) -> int:
    if args.cap < 1:
        raise UsageError("--cap must be positive")
    f = read_dimacs(args.cnf)
    sols, truncated = enumerate_solutions(f, args.cap)
    text = write_solutions(sols)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{len(sols)} solutions{' (truncated at cap)' if truncated else ''}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    seed = _seed(args)
    instances = ds.load_instances(args.data)
    examples = ds.training_examples(instances, args.solution_mode, seed)
    if not examples:
        raise ValueError(f"no satisfiable instances in {args.data}")
    print(f"{len(examples)} satisfiable of {len(instances)} instances", file=sys.stderr)
    cfg = TrainConfig(steps=args.steps, max_vars=args.max_vars, T=args.t_steps, seed=seed,
                      lr=args.lr, lr_schedule=args.lr_schedule, clip=args.clip,
                      checkpoint_path=args.ckpt, log_path=args.log,
                      model=ModelConfig(d=args.dim, R=args.iters, seed=seed))
    train_loop(examples, cfg, resume=args.resume)
    return 0


def _load_model(path):
    if path is None:
        raise UsageError("--ckpt is required unless an oracle sampler is used")
    return load_checkpoint(path)


def cmd_sample(args) -> int:
    seed = _seed(args)
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    f = read_dimacs(args.cnf)
    if args.oracle:
        sols, _ = enumerate_solutions(f, args.cap)
        if not sols:
            raise ValueError("formula is unsatisfiable; the oracle denoiser needs solutions")
        denoiser = ExactDenoiser.single(sols)
    else:
        denoiser = GnnDenoiser(_load_model(args.ckpt))
    rng = np.random.default_rng(seed)
    schedule = make_schedule(args.t_steps)
    per_batch = max(1, 4000 // f.num_vars)
    remaining = args.samples
    out = sys.stdout
    while remaining:
        chains = min(per_batch, remaining)
        for tr in reverse_sample_batch(f, denoiser, schedule, rng, chains=chains):
            out.write(format_solution(tr.sample()) + "\n")
        remaining -= chains
    return 0


def _eval_instances(args):
    if args.data is None:
        raise UsageError(f"eval {args.metric} needs --data")
    return [inst.formula for inst in ds.load_instances(args.data)]


def _sampler(args):
    if args.sampler == "uniform":
        return UniformSampler(args.cap)
    if args.sampler == "oracle":
        return DiffusionSampler(T=args.t_steps, oracle_cap=args.cap)
    model = _load_model(args.ckpt)
    if args.sampler == "argmax":
        return ArgmaxSampler(model, args.t_steps)
    return DiffusionSampler(model, args.t_steps)


def cmd_eval(args) -> int:
    seed = _seed(args)
    if args.metric == "timing":
        return _eval_timing(args, seed)
    formulas = _eval_instances(args)
    if args.metric == "accuracy":
        if args.sampler not in ("diffusion", "oracle"):
            raise UsageError("accuracy is defined for the diffusion and oracle samplers")
        model = None if args.sampler == "oracle" else _load_model(args.ckpt)
        summary = eval_accuracy(model, formulas, T=args.t_steps, runs=args.runs, seed=seed,
                                oracle_cap=args.cap if args.sampler == "oracle" else None)
        rows = [{"run": i, "accuracy": v} for i, v in enumerate(summary.values)]
        label = "accuracy %"
    elif args.metric == "diversity":
        summary = eval_uniqueness(_sampler(args), formulas, args.samples, seed)
        rows = [{"instance": i, "unique_pct": v, "invalid": bad}
                for i, (v, bad) in enumerate(zip(summary.values, summary.notes["invalid"]))]
        label = "unique %"
    else:
        summary = eval_agreement(_sampler(args), formulas, args.repetitions, seed=seed)
        rows = [{"value": v} for v in summary.values]
        if summary.notes["skipped"]:
            print(f"skipped instances: {summary.notes['skipped']}", file=sys.stderr)
        label = "agreement %"
    write_summary_csv(args.csv, rows)
    print(f"{label}: {summary} over {len(formulas)} instances")
    return 0


def _eval_timing(args, seed: int) -> int:
    sampler = _sampler(args)
    if args.data is not None:
        groups: dict[tuple[str, int], list] = {}
        for inst in ds.load_instances(args.data):
            groups.setdefault((inst.family, inst.size), []).append(inst.formula)
        sweep = [TimingCase(fam, fs) for (fam, _), fs in sorted(groups.items())]
    else:
        sweep = [TimingCase("3sat", [gen_3sat(n, "threshold", seed=seed * 1000 + n * 100 + b)
                                     for b in range(args.batch)])
                 for n in args.sizes]
    rows = eval_timing(sampler.sample_many, sweep, args.csv, seed=seed)
    for row in rows:
        print(f"{row['family']} n={row['n']} m={row['m']} batch={row['batch']} "
              f"{row['sec_per_sample']:.4g} s/sample")
    return 0


COMMANDS = {"gen": cmd_gen, "enumerate": cmd_enumerate, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        threads = args.threads or os.cpu_count() or 1
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, DimacsError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
