"""Command-line entry point: ``unidiff {gen-data, train, sample, eval, bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure (NaN/Inf).
Every command appends one JSON line to ``<out>/runs.jsonl``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

import unidiff
from unidiff import codec, evaluation, train, world
from unidiff._runtime import NumericalError, thread_count
from unidiff.checkpoint import CheckpointError, load_model
from unidiff.config import ConfigError, RunConfig
from unidiff.flow import GuidanceScales, SampleSpec, sample
from unidiff.model import ModelConfig
from unidiff.text import embed, inject_external, null_prompt, tokenize

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
MANIFEST = "runs.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Manifest:
    """One record per command, appended to ``runs.jsonl`` under the output root."""

    def __init__(self, command: str, argv: Sequence[str], seed: int | None):
        self.record = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "version": unidiff.__version__,
            "threads": thread_count(),
            "start": time.time(),
            "config": {},
            "outputs": [],
            "warnings": [],
        }

    def write(self, root: Path, status: str) -> None:
        self.record.update(end=time.time(), status=status)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / MANIFEST, "a") as fh:
            fh.write(json.dumps(self.record, sort_keys=True) + "\n")


def _csv_list(raw: str, allowed: Sequence[str], what: str) -> list[str]:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    bad = [s for s in items if s not in allowed]
    if bad or not items:
        raise UsageError(f"invalid {what} {bad or raw!r}; choose from {', '.join(allowed)}")
    return items


# -- gen-data ----------------------------------------------------------------------------

def cmd_gen_data(args, manifest: Manifest) -> None:
    kinds = _csv_list(args.kinds, world.KINDS, "kind") if args.kinds else list(world.KINDS)
    if args.n_per_task < 0:
        raise UsageError("--n-per-task must be >= 0")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    index = []
    for kind in kinds:
        for i in range(args.n_per_task):
            s = world.random_sample(kind, rng, heldout_split=args.heldout)
            d = out / kind / f"{i:05d}"
            d.mkdir(parents=True, exist_ok=True)
            codec.write_ppm(d / "input.ppm", s.input_image)
            codec.write_pgm(d / "mask.pgm", s.input_mask)
            codec.write_ppm(d / "target.ppm", s.target_image)
            if s.external is not None:
                codec.write_ppm(d / "external.ppm", s.external)
            record = world.sample_record(s)
            (d / "sample.json").write_text(json.dumps(record, sort_keys=True) + "\n")
            files = {"input": "input.ppm", "mask": "mask.pgm", "target": "target.ppm"}
            if s.external is not None:
                files["external"] = "external.ppm"
            index.append({"path": f"{kind}/{i:05d}", "files": files, **record})
    (out / "index.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in index))
    manifest.record["config"] = {"kinds": kinds, "n_per_task": args.n_per_task, "heldout": args.heldout}
    manifest.record["outputs"] = [str(out / "index.jsonl")]


# -- train -------------------------------------------------------------------------------

def cmd_train(args, manifest: Manifest) -> None:
    if args.resume:
        state = train.load_state(args.resume)
        run = RunConfig.load(args.config) if args.config else state.run
    elif args.config:
        run = RunConfig.load(args.config)
        state = train.create_state(run)
    else:
        raise UsageError("train needs --config (or --resume)")
    stages = train.default_stages(run)
    names = list(train.STAGE_ORDER) if args.stage == "all" else [args.stage]
    out = Path(args.out)
    manifest.record["config"] = run.to_kv()
    manifest.record["stages"] = {n: stages[n].mixture.ratios for n in names}
    manifest.record["resumed_from"] = {"path": args.resume, "step": state.step} if args.resume else None
    for name in names:
        if args.force or not (name in state.completed and args.stage == "all"):
            train.run_stage(stages[name], state, out, force=args.force)
    manifest.record["outputs"] = [str(out / f"stage-{n}") for n in names] + [str(out / "metrics.csv")]
    manifest.record["final_step"] = state.step


# -- sample ------------------------------------------------------------------------------

def cmd_sample(args, manifest: Manifest) -> None:
    model = load_model(args.ckpt)
    cfg = model.config
    tokens = tokenize(args.prompt, l_max=cfg.l_max)
    size = cfg.image_size
    if args.input_image:
        v_img = codec.read_ppm(args.input_image)
        mask = codec.read_pgm(args.mask) if args.mask else np.ones((size, size), dtype=np.float32)
    else:
        if args.mask:
            raise UsageError("--mask needs --input-image")
        v_img = np.full((size, size, 3), -1.0, dtype=np.float32)
        mask = np.ones((size, size), dtype=np.float32)
    if v_img.shape != (size, size, 3) or mask.shape != (size, size):
        raise UsageError(f"input image and mask must be {size}x{size}")
    with torch.no_grad():
        prompt = embed(tokens, model.text)
        if args.external:
            crop = codec.read_ppm(args.external)
            prompt = inject_external(prompt, model.identity(torch.as_tensor(crop)))
        spec = SampleSpec(
            prompt=prompt,
            null_prompt=null_prompt(model.text),
            v=codec.encode(v_img, cfg.codec_factor),
            mask=codec.resize_mask(mask, cfg.latent_size, cfg.latent_size),
            steps=args.steps,
            seed=args.seed,
            scales=GuidanceScales(args.alpha_x, args.alpha_v),
        )
        image = np.clip(sample(model, spec, factor=cfg.codec_factor), -1.0, 1.0)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    codec.write_ppm(path, image)
    manifest.record["config"] = {"ckpt": args.ckpt, "prompt": args.prompt, "alpha_x": args.alpha_x,
                                 "alpha_v": args.alpha_v, "steps": args.steps,
                                 "task": "edit" if args.input_image else "t2i"}
    manifest.record["outputs"] = [str(path)]


# -- eval --------------------------------------------------------------------------------

def _generator(args):
    if args.oracle:
        return evaluation.oracle_generator
    if args.copy_input:
        return evaluation.copy_input_generator
    if not args.ckpt:
        raise UsageError("eval needs --ckpt unless --oracle or --copy-input is given")
    return evaluation.model_generator(load_model(args.ckpt), args.steps)


def cmd_eval(args, manifest: Manifest) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.record["config"] = {"suite": args.suite, "n": args.n, "ckpt": args.ckpt, "oracle": args.oracle,
                                 "copy_input": args.copy_input, "steps": args.steps}
    if args.suite in evaluation.SUITES:
        report = evaluation.SUITES[args.suite](_generator(args), args.n, args.seed)
        report.to_csv(out / "report.csv")
        text = report.table()
    else:
        run = RunConfig.load(args.config) if args.config else None
        if run is not None:
            manifest.record["config"]["run"] = run.to_kv()
        if args.suite == "ablation":
            if run is None:
                raise UsageError("--suite ablation needs --config")
            rows = ("a", "b", "c", "d", "e") if args.include_c else ("a", "b", "d", "e")
            table = evaluation.run_ablation(run, out, args.n, args.seed, rows=rows,
                                            acknowledge_budget=args.acknowledge_budget, steps=args.steps)
            columns = evaluation.ABLATION_COLUMNS
        else:
            if args.train and run is None:
                raise UsageError("--suite scaling --train needs --config")
            table = evaluation.run_scaling(run, out, args.n, args.seed, train_models=args.train, steps=args.steps)
            columns = evaluation.SCALING_COLUMNS
        evaluation.write_csv(out / "report.csv", columns, table)
        text = evaluation.render_table(columns, table)
    (out / "report.txt").write_text(text)
    print(text, end="")
    manifest.record["outputs"] = [str(out / "report.csv"), str(out / "report.txt")]


# -- bench -------------------------------------------------------------------------------

def cmd_bench(args, manifest: Manifest) -> None:
    size = RunConfig.load(args.config).size if args.config else args.size
    cfg = ModelConfig.from_size(size)
    modes = _csv_list(args.modes, ("channel", "sequence"), "mode")
    tasks = _csv_list(args.tasks, world.KINDS, "task")
    resolutions = [int(r) for r in args.resolutions.split(",")] if args.resolutions else None
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if args.reps < 3:
        manifest.record["warnings"].append(f"reps={args.reps} < 3: medians are not robust")
    report = evaluation.bench_efficiency(cfg, tasks, modes, args.reps, resolutions, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "bench.csv")
    (out / "bench.txt").write_text(report.table())
    print(report.table(), end="")
    manifest.record["config"] = {"size": size, "modes": modes, "tasks": tasks, "reps": args.reps,
                                 "resolutions": resolutions}
    manifest.record["outputs"] = [str(out / "bench.csv")]


# -- wiring ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unidiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=unidiff.__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic task samples")
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-task", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kinds", help="comma-separated subset of " + ",".join(world.KINDS))
    g.add_argument("--heldout", action="store_true", help="draw from the held-out scene split")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage (or all three)")
    t.add_argument("--config")
    t.add_argument("--stage", choices=("I", "II", "III", "all"), required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="training checkpoint directory to continue from")
    t.add_argument("--force", action="store_true", help="skip the stage-order check")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate or edit one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--input-image")
    s.add_argument("--mask")
    s.add_argument("--external", help="16x16 PPM glyph for <p> placeholders")
    s.add_argument("--alpha-x", type=float, default=4.0)
    s.add_argument("--alpha-v", type=float, default=1.5)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True, help="PPM path")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint with the verifier suites")
    e.add_argument("--ckpt")
    e.add_argument("--suite", choices=tuple(evaluation.SUITES) + ("ablation", "scaling"), required=True)
    e.add_argument("--n", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score target renders instead of samples")
    e.add_argument("--copy-input", action="store_true", help="score the unchanged input image")
    e.add_argument("--config", help="run config for ablation/scaling training")
    e.add_argument("--acknowledge-budget", action="store_true")
    e.add_argument("--include-c", action="store_true", help="add ablation row (c)")
    e.add_argument("--train", action="store_true", help="scaling: train every size, not just count parameters")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time forward passes, channel vs. sequence conditioning")
    b.add_argument("--config")
    b.add_argument("--size", default="micro-XL")
    b.add_argument("--modes", default="channel,sequence")
    b.add_argument("--tasks", default="t2i,edit")
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--resolutions", help="comma-separated image sizes, e.g. 32,64")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def _out_root(args) -> Path:
    if args.command == "sample":
        return Path(args.output).parent
    return Path(args.out)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    manifest = Manifest(args.command, argv, getattr(args, "seed", None))
    status, code = "ok", EXIT_OK
    try:
        args.func(args, manifest)
    except NumericalError as exc:
        status, code = "numerical-error", EXIT_NUMERIC
        print(f"unidiff: numerical failure: {exc}", file=sys.stderr)
    except (UsageError, ConfigError, CheckpointError, train.StageOrderError,
            evaluation.BudgetNotAcknowledged, ValueError, OSError) as exc:
        status, code = "usage-error", EXIT_USAGE
        print(f"unidiff: error: {exc}", file=sys.stderr)
    manifest.record["exit_code"] = code
    manifest.write(_out_root(args), status)
    return code


if __name__ == "__main__":
    sys.exit(main())
