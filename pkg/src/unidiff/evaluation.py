"""Verifier-scored evaluation suites, the multi-task ablation, size scaling and the efficiency benchmark."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from unidiff import codec, world
from unidiff.config import RunConfig
from unidiff.flow import GuidanceScales, SampleSpec, sample
from unidiff.model import SIZE_LADDER, MMDiT, ModelConfig, attention_flops, count_tokens, forward_flops, forward_seq_concat
from unidiff.text import embed, inject_external, null_prompt, tokenize

# (sample, per-sample seed) -> generated image in [-1, 1], shape (64, 64, 3)
Generator = Callable[[world.TaskSample, int], np.ndarray]

REPORT_COLUMNS = ("suite", "metric", "value", "count", "seed")
BENCH_COLUMNS = ("task", "mode", "resolution", "tokens", "attention_flops", "forward_flops", "median_seconds", "reps")


def oracle_generator(sample_: world.TaskSample, seed: int) -> np.ndarray:
    return sample_.target_image


def copy_input_generator(sample_: world.TaskSample, seed: int) -> np.ndarray:
    return sample_.input_image


def model_generator(model: MMDiT, steps: int = 50, scales: GuidanceScales = GuidanceScales()) -> Generator:
    """Guided Euler sampling from a channel-mode model."""
    cfg = model.config
    model.eval()

    def generate(sample_: world.TaskSample, seed: int) -> np.ndarray:
        with torch.no_grad():
            prompt = embed(tokenize(sample_.prompt, l_max=cfg.l_max), model.text)
            if sample_.external is not None:
                feats = model.identity(torch.as_tensor(sample_.external, dtype=torch.float32))
                prompt = inject_external(prompt, feats)
            spec = SampleSpec(
                prompt=prompt,
                null_prompt=null_prompt(model.text),
                v=codec.encode(sample_.input_image, cfg.codec_factor),
                mask=codec.resize_mask(sample_.input_mask, cfg.latent_size, cfg.latent_size),
                steps=steps,
                seed=seed,
                scales=scales,
            )
            image = sample(model, spec, factor=cfg.codec_factor)
        return np.clip(image, -1.0, 1.0)

    return generate


@dataclass
class EvalReport:
    suite: str
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return len(self.records)

    def add(self, metric: str, values: Sequence[float]) -> None:
        self.metrics[metric] = float(np.mean(values)) if len(values) else math.nan
        self.counts[metric] = len(values)

    def rows(self) -> list[dict]:
        return [
            {"suite": self.suite, "metric": k, "value": v, "count": self.counts[k], "seed": self.seed}
            for k, v in self.metrics.items()
        ]

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, REPORT_COLUMNS, self.rows())

    def table(self) -> str:
        return render_table(REPORT_COLUMNS, self.rows())


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


def render_table(columns: Sequence[str], rows: Sequence[dict]) -> str:
    cells = [list(columns)] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(s.ljust(w) for s, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def heldout_scene(rng: np.random.Generator, category: str) -> world.Scene:
    while True:
        scene = world.random_scene(rng, category=category)
        if world.heldout(scene):
            return scene


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


def eval_compositional(generator: Generator, n: int, seed: int,
                       categories: Sequence[str] = world.SCENE_CATEGORIES) -> EvalReport:
    rng = np.random.default_rng(seed)
    report = EvalReport("compositional", seed)
    for category in categories:
        passed = []
        for _ in range(n):
            s = world.make_t2i(heldout_scene(rng, category))
            result = world.verify("t2i", s, generator(s, _seed(rng)))
            passed.append(float(result.passed))
            report.records.append({"category": category, "prompt": s.prompt, "passed": result.passed,
                                   "checks": result.checks})
        report.add(category, passed)
    return report


def eval_editing(generator: Generator, n: int, seed: int) -> EvalReport:
    """Instruction success and untouched-region RMSE, reported separately."""
    rng = np.random.default_rng(seed)
    report = EvalReport("edit", seed)
    success, rmse = [], []
    for _ in range(n):
        s = world.random_sample("edit", rng, heldout_split=True)
        result = world.verify("edit", s, generator(s, _seed(rng)))
        success.append(float(result.checks["instruction"]))
        rmse.append(result.scores["preservation_rmse"])
        report.records.append({"prompt": s.prompt, "checks": result.checks, "scores": result.scores})
    report.add("edit_success", success)
    report.add("preservation_rmse", rmse)
    return report


def eval_id(generator: Generator, n: int, seed: int) -> EvalReport:
    rng = np.random.default_rng(seed)
    report = EvalReport("id", seed)
    corr = []
    for _ in range(n):
        s = world.random_sample("id", rng, heldout_split=True)
        result = world.verify("id", s, generator(s, _seed(rng)))
        corr.append(result.scores["correlation"])
        report.records.append({"prompt": s.prompt, "glyph": s.meta.get("glyph"), "scores": result.scores})
    report.add("id_correlation", corr)
    return report


def eval_auxiliary(generator: Generator, n: int, seed: int,
                   kinds: Sequence[str] = ("depth", "pose", "seg")) -> EvalReport:
    rng = np.random.default_rng(seed)
    report = EvalReport("auxiliary", seed)
    for kind in kinds:
        agreement = []
        for _ in range(n):
            s = world.random_sample(kind, rng, heldout_split=True)
            result = world.verify(kind, s, generator(s, _seed(rng)))
            agreement.append(result.scores["agreement"])
            report.records.append({"kind": kind, "prompt": s.prompt, "scores": result.scores})
        report.add(f"{kind}_agreement", agreement)
    return report


SUITES = {
    "compositional": eval_compositional,
    "edit": eval_editing,
    "id": eval_id,
    "auxiliary": eval_auxiliary,
}


# -- full recipe, ablation and scaling ------------------------------------------------------

ABLATION_ROWS = {
    "a": ("t2i",),
    "b": ("t2i", "edit"),
    "c": ("t2i", "edit", "id"),
    "d": ("t2i", "edit", "auxiliary"),
    "e": ("t2i", "inpaint", "outpaint", "edit", "auxiliary", "layout", "id"),
}
ABLATION_COLUMNS = ("row", "tasks", "single_object", "edit_success", "preservation_rmse", "id_correlation")
SCALING_COLUMNS = ("size", "n_layers", "d_model", "n_heads", "parameters", "single_object")


class BudgetNotAcknowledged(RuntimeError):
    pass


def train_recipe(run: RunConfig, out_dir: str | Path, categories: Sequence[str] | None = None) -> MMDiT:
    """Stage I, then Stage II restricted to ``categories``, then Stage III when identity is included."""
    from unidiff import train

    out = Path(out_dir)
    state = train.create_state(run)
    stages = train.default_stages(run)
    train.run_stage(stages["I"], state, out)
    base = train.STAGE_II_MIXTURE
    cats = set(categories) if categories is not None else set(base.names) | {"id"}
    stage_ii = train.restrict(base, [c for c in base.names if c in cats])
    train.run_stage(replace(stages["II"], mixture=stage_ii), state, out)
    if "id" in cats:
        train.run_stage(replace(stages["III"], mixture=train.with_identity(stage_ii)), state, out)
    return state.model


def run_ablation(run: RunConfig, out_dir: str | Path, eval_n: int, seed: int, *,
                 rows: Sequence[str] = ("a", "b", "d", "e"), acknowledge_budget: bool = False,
                 steps: int = 50) -> list[dict]:
    if not acknowledge_budget:
        raise BudgetNotAcknowledged("the ablation trains one model per row; pass acknowledge_budget=True")
    results = []
    for row in rows:
        tasks = ABLATION_ROWS[row]
        model = train_recipe(run, Path(out_dir) / f"row-{row}", tasks)
        gen = model_generator(model, steps)
        comp = eval_compositional(gen, eval_n, seed, ("single_object",))
        edit = eval_editing(gen, eval_n, seed)
        ident = eval_id(gen, eval_n, seed) if "id" in tasks else None
        results.append({
            "row": row,
            "tasks": "+".join(tasks),
            "single_object": comp.metrics["single_object"],
            "edit_success": edit.metrics["edit_success"],
            "preservation_rmse": edit.metrics["preservation_rmse"],
            "id_correlation": ident.metrics["id_correlation"] if ident else math.nan,
        })
    return results


def run_scaling(run: RunConfig, out_dir: str | Path | None = None, eval_n: int = 0, seed: int = 0,
                sizes: Sequence[str] = tuple(SIZE_LADDER), train_models: bool = False, steps: int = 50) -> list[dict]:
    """One row per size: exact parameter count, plus single-object accuracy when ``train_models``."""
    rows = []
    for size in sizes:
        cfg = ModelConfig.from_size(size)
        row = {"size": size, "n_layers": cfg.n_layers, "d_model": cfg.d_model, "n_heads": cfg.n_heads,
               "parameters": MMDiT(cfg).n_parameters(), "single_object": math.nan}
        if train_models:
            if out_dir is None:
                raise ValueError("training a scaling sweep needs an output directory")
            model = train_recipe(replace(run, size=size), Path(out_dir) / size)
            row["single_object"] = eval_compositional(model_generator(model, steps), eval_n, seed,
                                                      ("single_object",)).metrics["single_object"]
        rows.append(row)
    return rows


# -- efficiency benchmark ------------------------------------------------------------------

@dataclass
class BenchReport:
    rows: list[dict]
    reps: int

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, BENCH_COLUMNS, self.rows)

    def table(self) -> str:
        return render_table(BENCH_COLUMNS, self.rows)

    def lookup(self, task: str, mode: str, resolution: int | None = None) -> dict:
        for r in self.rows:
            if r["task"] == task and r["mode"] == mode and (resolution is None or r["resolution"] == resolution):
                return r
        raise KeyError((task, mode, resolution))

    def time_ratio(self, mode: str, num: str = "edit", den: str = "t2i", resolution: int | None = None) -> float:
        return self.lookup(num, mode, resolution)["median_seconds"] / self.lookup(den, mode, resolution)["median_seconds"]

    def rank_correlation(self) -> float:
        flops = [r["forward_flops"] for r in self.rows]
        times = [r["median_seconds"] for r in self.rows]
        return float(spearmanr(flops, times).statistic)


def _bench_inputs(kind: str, cfg: ModelConfig, rng: np.random.Generator):
    s = world.random_sample(kind, rng)
    if cfg.image_size != world.CANVAS:
        size = cfg.latent_size
        z = rng.standard_normal((size, size, cfg.c_lat))
        v = rng.standard_normal((size, size, cfg.c_lat))
        m = np.ones((size, size))
    else:
        z = rng.standard_normal((cfg.latent_size, cfg.latent_size, cfg.c_lat))
        v = codec.encode(s.input_image, cfg.codec_factor)
        m = codec.resize_mask(s.input_mask, cfg.latent_size, cfg.latent_size)
    return s, torch.tensor(z, dtype=torch.float32), torch.tensor(v, dtype=torch.float32), torch.tensor(m, dtype=torch.float32)


def time_interleaved(fns: Sequence[Callable[[], torch.Tensor]], reps: int, warmup: int = 2) -> list[float]:
    """Median wall time per callable; reps alternate between callables so drift hits all of them alike."""
    times: list[list[float]] = [[] for _ in fns]
    with torch.no_grad():
        for fn in fns:
            for _ in range(warmup):
                fn()
        for _ in range(reps):
            for i, fn in enumerate(fns):
                start = time.perf_counter()
                fn()
                times[i].append(time.perf_counter() - start)
    return [statistics.median(t) for t in times]


def _forward_fn(model: MMDiT, kind: str, mode: str, prompt, z, v, m) -> Callable[[], torch.Tensor]:
    if mode == "channel":
        d = torch.cat([z, v, m[..., None]], dim=-1)
        return lambda: model(prompt, 0.5, d)
    if kind in ("t2i", "id"):
        return lambda: forward_seq_concat(model, prompt, 0.5, z)
    return lambda: forward_seq_concat(model, prompt, 0.5, z, v, m)


def bench_efficiency(config: ModelConfig, tasks: Sequence[str] = ("t2i", "edit"),
                     modes: Sequence[str] = ("channel", "sequence"), reps: int = 30,
                     resolutions: Sequence[int] | None = None, seed: int = 0) -> BenchReport:
    """Median wall time of one forward pass per (task, mode, resolution) at batch 1."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    rows = []
    for res in resolutions or (config.image_size,):
        cfg = replace(config, image_size=res)
        for mode in modes:
            model = MMDiT(cfg, mode).eval()
            fns = []
            for kind in tasks:
                s, z, v, m = _bench_inputs(kind, cfg, rng)
                with torch.no_grad():
                    prompt = embed(tokenize(s.prompt, l_max=cfg.l_max), model.text)
                fns.append(_forward_fn(model, kind, mode, prompt, z, v, m))
            medians = time_interleaved(fns, reps)
            for kind, median in zip(tasks, medians):
                tokens = count_tokens(kind, cfg, mode)
                rows.append({
                    "task": kind, "mode": mode, "resolution": res, "tokens": tokens,
                    "attention_flops": attention_flops(tokens, cfg), "forward_flops": forward_flops(tokens, cfg),
                    "median_seconds": median, "reps": reps,
                })
    return BenchReport(rows, reps)
