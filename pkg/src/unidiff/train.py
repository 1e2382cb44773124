"""Mixture sampling, condition dropout, the three-stage recipe and checkpointed training state."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from unidiff import codec, world
from unidiff._runtime import NumericalError
from unidiff.checkpoint import load_json, load_model, read_blobs, save_json, save_model, write_blobs
from unidiff.config import RunConfig
from unidiff.flow import cfm_loss, interpolate, target_velocity
from unidiff.model import PARAMETER_GROUPS, MMDiT, ModelConfig, assemble_input, parameter_group
from unidiff.text import PromptEmbeddings, embed, inject_external, null_prompt, tokenize

log = logging.getLogger(__name__)

AUXILIARY = ("depth", "pose", "seg")
CATEGORIES = ("t2i", "inpaint", "outpaint", "edit", "auxiliary", "layout", "id")
STAGE_II_RATIOS = {"t2i": 0.28, "inpaint": 0.10, "outpaint": 0.10, "edit": 0.47, "auxiliary": 0.03, "layout": 0.02}
STAGE_ORDER = ("I", "II", "III")
METRIC_COLUMNS = ("step", "stage", "loss", "grad_norm", "lr", "wallclock")


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    ratios: dict[str, float]

    def __post_init__(self):
        for name, r in self.ratios.items():
            if name not in CATEGORIES:
                raise ValueError(f"unknown mixture category {name!r}")
            if not r >= 0:
                raise ValueError(f"ratio for {name!r} must be >= 0, got {r}")
        total = sum(self.ratios.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture ratios sum to {total!r}, expected 1")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.ratios)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([self.ratios[n] for n in self.names], dtype=np.float64)


STAGE_I_MIXTURE = MixtureSpec({"t2i": 1.0})
STAGE_II_MIXTURE = MixtureSpec(dict(STAGE_II_RATIOS))


def with_identity(base: MixtureSpec, id_fraction: float = 0.5) -> MixtureSpec:
    """Mix identity samples against the whole base mixture (1:1 by default)."""
    ratios = {"id": id_fraction}
    ratios.update({k: (1 - id_fraction) * v for k, v in base.ratios.items()})
    return MixtureSpec(ratios)


STAGE_III_MIXTURE = with_identity(STAGE_II_MIXTURE)


def restrict(base: MixtureSpec, categories: Sequence[str]) -> MixtureSpec:
    kept = {k: v for k, v in base.ratios.items() if k in categories}
    total = sum(kept.values())
    return MixtureSpec({k: v / total for k, v in kept.items()})


def draw_category(mixture: MixtureSpec, rng: np.random.Generator) -> str:
    return mixture.names[int(rng.choice(len(mixture.names), p=mixture.probabilities))]


def resolve_kind(category: str, rng: np.random.Generator) -> str:
    if category == "auxiliary":
        return AUXILIARY[int(rng.integers(len(AUXILIARY)))]
    return category


def sample_batch(mixture: MixtureSpec, batch: int, rng: np.random.Generator) -> list[world.TaskSample]:
    out = []
    for _ in range(batch):
        kind = resolve_kind(draw_category(mixture, rng), rng)
        out.append(world.random_sample(kind, rng))
    return out


@dataclass(frozen=True)
class StageSpec:
    name: str
    mixture: MixtureSpec
    lr: float
    steps: int
    batch: int
    trains_external_encoder: bool = False

    def __post_init__(self):
        if self.name not in STAGE_ORDER:
            raise ValueError(f"stage must be one of {STAGE_ORDER}")
        if self.name == "III" and not self.trains_external_encoder:
            raise ValueError("stage III must train the external encoder")
        if self.steps < 0 or self.batch < 1 or self.lr < 0:
            raise ValueError("stage steps/batch/lr out of range")


def default_stages(cfg: RunConfig) -> dict[str, StageSpec]:
    return {
        "I": StageSpec("I", STAGE_I_MIXTURE, cfg.lr_I, cfg.steps_I, cfg.batch),
        "II": StageSpec("II", STAGE_II_MIXTURE, cfg.lr_II, cfg.steps_II, cfg.batch),
        "III": StageSpec("III", STAGE_III_MIXTURE, cfg.lr_III, cfg.steps_III, cfg.batch, trains_external_encoder=True),
    }


def model_config(cfg: RunConfig) -> ModelConfig:
    if cfg.size == "custom":
        return ModelConfig(size_tag="custom", n_layers=cfg.n_layers, d_model=cfg.d_model, n_heads=cfg.n_heads)
    return ModelConfig.from_size(cfg.size)


# -- training state ------------------------------------------------------------------

@dataclass
class TrainState:
    model: MMDiT
    optimizer: torch.optim.AdamW
    rng: np.random.Generator
    run: RunConfig
    step: int = 0
    stage: str | None = None
    stage_step: int = 0
    completed: list[str] = field(default_factory=list)

    @property
    def dropout(self) -> tuple[float, float, float]:
        return self.run.drop_text, self.run.drop_image, self.run.drop_both


def make_optimizer(model: MMDiT, run: RunConfig, lr: float = 0.0) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=(run.beta1, run.beta2), weight_decay=run.weight_decay)


def create_state(run: RunConfig, model: MMDiT | None = None) -> TrainState:
    torch.manual_seed(run.seed)
    if model is None:
        model = MMDiT(model_config(run))
    return TrainState(model, make_optimizer(model, run), np.random.default_rng(run.seed), run)


@dataclass
class PreparedBatch:
    tokens: np.ndarray
    crops: list[np.ndarray | None]
    t: torch.Tensor
    d: torch.Tensor
    target: torch.Tensor
    drop_text: np.ndarray
    drop_image: np.ndarray

    def to(self, dtype: torch.dtype) -> "PreparedBatch":
        return PreparedBatch(self.tokens, self.crops, self.t.to(dtype), self.d.to(dtype), self.target.to(dtype),
                             self.drop_text, self.drop_image)


def _draw_t(rng: np.random.Generator, scheme: str) -> float:
    if scheme == "logit_normal":
        return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))
    return float(rng.random())


def prepare_batch(samples: Sequence[world.TaskSample], rng: np.random.Generator, config: ModelConfig,
                  dropout: tuple[float, float, float] = (0.05, 0.05, 0.05),
                  timestep_sampling: str = "uniform") -> PreparedBatch:
    """Encode images, draw noise/time, and apply condition dropout.

    Per sample the RNG is consumed in a fixed order: noise, time, dropout.
    Dropout buckets: text only, image+mask only, both.
    """
    p_text, p_image, p_both = dropout
    size = config.latent_size
    tokens, crops, ts, ds, targets, drop_t, drop_i = [], [], [], [], [], [], []
    for s in samples:
        z = codec.encode(s.target_image, config.codec_factor).astype(np.float64)
        v = codec.encode(s.input_image, config.codec_factor).astype(np.float64)
        m = codec.resize_mask(s.input_mask, size, size).astype(np.float64)
        eps = rng.standard_normal(z.shape)
        t = _draw_t(rng, timestep_sampling)
        u = rng.random()
        dt = u < p_text or p_text + p_image <= u < p_text + p_image + p_both
        di = p_text <= u < p_text + p_image + p_both
        if di:
            v, m = np.zeros_like(v), np.zeros_like(m)
        tokens.append(tokenize(s.prompt, l_max=config.l_max))
        crops.append(s.external)
        ts.append(t)
        ds.append(assemble_input(interpolate(z, eps, t), v, m).numpy())
        targets.append(target_velocity(z, eps))
        drop_t.append(dt)
        drop_i.append(di)
    return PreparedBatch(
        np.stack(tokens), crops, torch.tensor(ts, dtype=torch.float32),
        torch.as_tensor(np.stack(ds), dtype=torch.float32), torch.as_tensor(np.stack(targets), dtype=torch.float32),
        np.array(drop_t), np.array(drop_i),
    )


def batch_prompts(model: MMDiT, batch: PreparedBatch) -> PromptEmbeddings:
    rows = []
    for tokens, crop, dropped in zip(batch.tokens, batch.crops, batch.drop_text):
        if dropped:
            p = null_prompt(model.text)
        else:
            p = embed(tokens, model.text)
            if crop is not None:
                p = inject_external(p, model.identity(torch.as_tensor(crop, dtype=model.identity.fc1.weight.dtype)))
        rows.append(p)
    return PromptEmbeddings.stack(rows)


def batch_loss(model: MMDiT, batch: PreparedBatch) -> torch.Tensor:
    pred = model(batch_prompts(model, batch), batch.t, batch.d)
    return cfm_loss(pred, batch.target)


def train_step(state: TrainState, samples: Sequence[world.TaskSample], lr: float,
               train_external: bool = False) -> dict:
    model, opt = state.model, state.optimizer
    batch = prepare_batch(samples, state.rng, model.config, state.dropout, state.run.timestep_sampling)
    model.train()
    opt.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}", step=state.step)
    loss.backward()
    if not train_external:
        for p in model.identity.parameters():
            p.grad = None
    grad_norm = float(torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.grad is not None], state.run.grad_clip))
    if not np.isfinite(grad_norm):
        raise NumericalError(f"non-finite gradient norm at step {state.step}", step=state.step)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    state.step += 1
    return {
        "step": state.step,
        "loss": float(loss.detach()),
        "grad_norm": grad_norm,
        "lr": lr,
        "dropped_text": int(batch.drop_text.sum()),
        "dropped_image": int(batch.drop_image.sum()),
    }


# -- checkpoints -------------------------------------------------------------------------

def save_state(directory: str | Path, state: TrainState) -> Path:
    directory = Path(directory)
    save_model(directory, state.model)
    names = dict((id(p), n) for n, p in state.model.named_parameters())
    moments = {}
    for p, st in state.optimizer.state.items():
        name = names[id(p)]
        moments[f"{name}.exp_avg"] = st["exp_avg"]
        moments[f"{name}.exp_avg_sq"] = st["exp_avg_sq"]
        moments[f"{name}.step"] = torch.as_tensor(st["step"]).reshape(())
    write_blobs(moments, directory / "optimizer.bin", directory / "optimizer_manifest.txt")
    save_json(directory / "state.json", {
        "step": state.step,
        "stage": state.stage,
        "stage_step": state.stage_step,
        "completed": state.completed,
        "rng": state.rng.bit_generator.state,
        "run": state.run.to_kv(),
    })
    return directory


def load_state(directory: str | Path) -> TrainState:
    directory = Path(directory)
    info = load_json(directory / "state.json")
    run = RunConfig.from_kv(info["run"])
    model = load_model(directory)
    opt = make_optimizer(model, run)
    moments = read_blobs(directory / "optimizer.bin", directory / "optimizer_manifest.txt")
    for name, p in model.named_parameters():
        if f"{name}.exp_avg" in moments:
            opt.state[p] = {
                "step": torch.tensor(float(moments[f"{name}.step"])),
                "exp_avg": torch.from_numpy(moments[f"{name}.exp_avg"]),
                "exp_avg_sq": torch.from_numpy(moments[f"{name}.exp_avg_sq"]),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = info["rng"]
    return TrainState(model, opt, rng, run, info["step"], info["stage"], info["stage_step"], list(info["completed"]))


def append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow(row)


def check_stage_order(stage: str, state: TrainState) -> None:
    if state.stage == stage and stage not in state.completed:
        return  # resuming mid-stage
    if stage in state.completed:
        raise StageOrderError(f"stage {stage} already completed")
    idx = STAGE_ORDER.index(stage)
    needed = STAGE_ORDER[idx - 1] if idx else None
    if needed is None and state.completed:
        raise StageOrderError(f"stage I must run first; completed {state.completed}")
    if needed is not None and needed not in state.completed:
        raise StageOrderError(f"stage {stage} requires stage {needed} first")


def run_stage(stage: StageSpec, state: TrainState, out_dir: str | Path | None = None, *,
              checkpoint_every: int | None = None, force: bool = False,
              on_step: Callable[[dict], None] | None = None) -> TrainState:
    if not force:
        check_stage_order(stage.name, state)
    if state.stage != stage.name:
        state.stage, state.stage_step = stage.name, 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    every = checkpoint_every or state.run.checkpoint_every
    start = time.perf_counter()
    while state.stage_step < stage.steps:
        samples = sample_batch(stage.mixture, stage.batch, state.rng)
        try:
            metrics = train_step(state, samples, stage.lr, train_external=stage.trains_external_encoder)
        except NumericalError:
            if out is not None:
                save_state(out / f"abort-step-{state.step:07d}", state)
            raise
        state.stage_step += 1
        metrics.update(stage=stage.name, wallclock=round(time.perf_counter() - start, 3))
        if out is not None:
            append_metrics(out / "metrics.csv", metrics)
            if state.stage_step % every == 0 and state.stage_step < stage.steps:
                save_state(out / f"step-{state.step:07d}", state)
        if on_step is not None:
            on_step(metrics)
        if state.step % 100 == 0:
            log.info("stage %s step %d loss %.4f", stage.name, state.step, metrics["loss"])
    if stage.name not in state.completed:
        state.completed.append(stage.name)
    if out is not None:
        save_state(out / f"stage-{stage.name}", state)
    return state


# -- gradient check ------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    entries: list[tuple[str, tuple[int, ...], float, float, float]]

    @property
    def groups(self) -> set[str]:
        return {parameter_group(name) for name, *_ in self.entries}


def grad_check(model: MMDiT, sample: world.TaskSample, n_weights: int = 25, seed: int = 0,
               step: float = 1e-5, floor: float = 1e-6) -> GradCheckResult:
    """Central finite differences on randomly chosen weights versus autograd.

    Relative error is ``|g - fd| / max(|g|, |fd|, floor)``. At least one weight
    is drawn from every parameter group the model has.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model (call model.double())")
    rng = np.random.default_rng(seed)
    batch = prepare_batch([sample], rng, model.config, dropout=(0.0, 0.0, 0.0)).to(torch.float64)
    params = dict(model.named_parameters())
    by_group: dict[str, list[str]] = {}
    for name in params:
        by_group.setdefault(parameter_group(name), []).append(name)
    chosen_names = [by_group[g][int(rng.integers(len(by_group[g])))] for g in PARAMETER_GROUPS if g in by_group]
    all_names = list(params)
    while len(chosen_names) < n_weights:
        chosen_names.append(all_names[int(rng.integers(len(all_names)))])

    model.zero_grad(set_to_none=True)
    batch_loss(model, batch).backward()
    entries = []
    worst = 0.0
    for name in chosen_names:
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + step
            up = float(batch_loss(model, batch))
            p[idx] = orig - step
            down = float(batch_loss(model, batch))
            p[idx] = orig
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
        entries.append((name, idx, analytic, numeric, rel))
    return GradCheckResult(worst, entries)
