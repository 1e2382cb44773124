import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from unidiff import NumericalError, codec, world
from unidiff.config import RunConfig
from unidiff.model import PARAMETER_GROUPS, perturb_parameters
from unidiff import train
from unidiff.train import MixtureSpec, StageSpec

from conftest import tiny_config


def tiny_run(**kw) -> RunConfig:
    base = dict(size="custom", seed=7, batch=2, n_layers=1, d_model=32, n_heads=4, steps_I=2, steps_II=2,
                steps_III=1, checkpoint_every=1)
    base.update(kw)
    return RunConfig(**base)


def test_default_mixtures():
    assert train.STAGE_I_MIXTURE.ratios == {"t2i": 1.0}
    assert train.STAGE_II_MIXTURE.ratios == {"t2i": 0.28, "inpaint": 0.10, "outpaint": 0.10, "edit": 0.47,
                                             "auxiliary": 0.03, "layout": 0.02}
    iii = train.STAGE_III_MIXTURE.ratios
    assert iii["id"] == 0.5 and iii["edit"] == pytest.approx(0.235)


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureSpec({"t2i": 0.5, "edit": 0.4})
    with pytest.raises(ValueError):
        MixtureSpec({"t2i": 1.2, "edit": -0.2})
    with pytest.raises(ValueError):
        MixtureSpec({"bogus": 1.0})
    MixtureSpec({"t2i": 0.3, "edit": 0.7 + 5e-10})


def test_degenerate_mixture_all_t2i(rng):
    assert {s.kind for s in train.sample_batch(train.STAGE_I_MIXTURE, 50, rng)} == {"t2i"}


def test_mixture_chi_square():
    rng = np.random.default_rng(0)
    mix = train.STAGE_II_MIXTURE
    draws = [train.draw_category(mix, rng) for _ in range(10_000)]
    observed = [draws.count(n) for n in mix.names]
    expected = [10_000 * mix.ratios[n] for n in mix.names]
    assert chisquare(observed, expected).pvalue > 0.001


def test_auxiliary_split_equally():
    rng = np.random.default_rng(1)
    kinds = [train.resolve_kind("auxiliary", rng) for _ in range(6000)]
    for k in train.AUXILIARY:
        assert abs(kinds.count(k) - 2000) < 3 * math.sqrt(6000 * (1 / 3) * (2 / 3))


def test_sample_batch_deterministic():
    a = train.sample_batch(train.STAGE_II_MIXTURE, 8, np.random.default_rng(4))
    b = train.sample_batch(train.STAGE_II_MIXTURE, 8, np.random.default_rng(4))
    assert [s.prompt for s in a] == [s.prompt for s in b]


def test_stage_specs():
    stages = train.default_stages(RunConfig(size="micro-XL", seed=0))
    assert (stages["I"].lr, stages["II"].lr, stages["III"].lr) == (1e-4, 1e-4, 2e-5)
    assert (stages["I"].steps, stages["II"].steps, stages["III"].steps) == (20_000, 20_000, 2_000)
    assert {s.batch for s in stages.values()} == {64}
    assert stages["I"].mixture.ratios == {"t2i": 1.0}
    assert stages["III"].trains_external_encoder and not stages["II"].trains_external_encoder
    with pytest.raises(ValueError):
        StageSpec("III", train.STAGE_III_MIXTURE, 2e-5, 10, 4, trains_external_encoder=False)


def test_prepare_batch_matches_independent_construction():
    cfg = tiny_config()
    samples = train.sample_batch(train.STAGE_II_MIXTURE, 4, np.random.default_rng(2))
    batch = train.prepare_batch(samples, np.random.default_rng(9), cfg, dropout=(0, 0, 0))
    rng = np.random.default_rng(9)
    for i, s in enumerate(samples):
        z = codec.encode(s.target_image).astype(np.float64)
        eps = rng.standard_normal(z.shape)
        t = rng.random()
        rng.random()
        assert batch.t[i].item() == pytest.approx(t, abs=1e-7)
        assert np.allclose(batch.target[i].numpy(), z - eps, atol=1e-6)
        assert np.allclose(batch.d[i, ..., :12].numpy(), t * z + (1 - t) * eps, atol=1e-6)
        assert np.array_equal(batch.d[i, ..., 12:24].numpy(), codec.encode(s.input_image))
        assert np.array_equal(batch.d[i, ..., 24].numpy(), codec.resize_mask(s.input_mask, 32, 32))


def test_dropout_rates_and_null_image():
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    n = 4000
    samples = [world.make_edit(world.Scene((world.SceneObject("circle", "red", (1, 1), "large"),)),
                               world.Edit("recolor", index=0, color="blue"))] * n
    batch = train.prepare_batch(samples, rng, cfg, dropout=(0.05, 0.05, 0.05))
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert abs(batch.drop_text.sum() - 0.1 * n) < 3 * sigma
    assert abs(batch.drop_image.sum() - 0.1 * n) < 3 * sigma
    both = (batch.drop_text & batch.drop_image).sum()
    assert abs(both - 0.05 * n) < 3 * math.sqrt(n * 0.05 * 0.95)
    idx = np.flatnonzero(batch.drop_image)
    assert not batch.d[idx, ..., 12:].any()
    keep = np.flatnonzero(~batch.drop_image)
    assert batch.d[keep, ..., 12:24].any()


def test_zero_init_first_loss_equals_mean_square_target():
    run = tiny_run(batch=4)
    state = train.create_state(run)
    samples = train.sample_batch(train.STAGE_II_MIXTURE, 4, np.random.default_rng(5))
    probe = np.random.default_rng()
    probe.bit_generator.state = state.rng.bit_generator.state
    batch = train.prepare_batch(samples, probe, state.model.config, state.dropout)
    expected = float((batch.target.double() ** 2).mean())
    metrics = train.train_step(state, samples, lr=1e-4)
    assert metrics["loss"] == pytest.approx(expected, rel=1e-6)


def test_zero_lr_leaves_parameters_unchanged():
    state = train.create_state(tiny_run())
    perturb_parameters(state.model, 0.05, 3)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    samples = train.sample_batch(train.STAGE_II_MIXTURE, 2, state.rng)
    train.train_step(state, samples, lr=0.0, train_external=True)
    for n, p in state.model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_external_encoder_trains_only_when_enabled():
    state = train.create_state(tiny_run())
    perturb_parameters(state.model, 0.05, 3)
    rng = np.random.default_rng(0)
    samples = [world.random_sample("id", rng) for _ in range(2)]
    w0 = state.model.identity.fc1.weight.detach().clone()
    train.train_step(state, samples, lr=1e-3, train_external=False)
    assert torch.equal(state.model.identity.fc1.weight, w0)
    train.train_step(state, samples, lr=1e-3, train_external=True)
    assert not torch.equal(state.model.identity.fc1.weight, w0)


def test_loss_invariant_to_batch_order(perturbed_model):
    cfg = perturbed_model.config
    samples = train.sample_batch(train.STAGE_II_MIXTURE, 4, np.random.default_rng(6))
    batch = train.prepare_batch(samples, np.random.default_rng(1), cfg)
    perm = [2, 0, 3, 1]
    shuffled = train.PreparedBatch(batch.tokens[perm], [batch.crops[i] for i in perm], batch.t[perm],
                                   batch.d[perm], batch.target[perm], batch.drop_text[perm], batch.drop_image[perm])
    with torch.no_grad():
        a = float(train.batch_loss(perturbed_model, batch))
        b = float(train.batch_loss(perturbed_model, shuffled))
    assert a == pytest.approx(b, rel=1e-6)


def test_stage_order_enforced(tmp_path):
    run = tiny_run()
    stages = train.default_stages(run)
    state = train.create_state(run)
    with pytest.raises(train.StageOrderError):
        train.run_stage(stages["II"], state)
    with pytest.raises(train.StageOrderError):
        train.run_stage(stages["III"], state)
    train.run_stage(stages["I"], state, tmp_path)
    with pytest.raises(train.StageOrderError):
        train.run_stage(stages["I"], state)
    with pytest.raises(train.StageOrderError):
        train.run_stage(stages["III"], state)
    train.run_stage(stages["III"], train.create_state(run), force=True)


def test_metrics_csv_and_checkpoints(tmp_path):
    run = tiny_run()
    state = train.create_state(run)
    stages = train.default_stages(run)
    train.run_stage(stages["I"], state, tmp_path)
    train.run_stage(stages["II"], state, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(train.METRIC_COLUMNS)
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert [r["stage"] for r in rows] == ["I", "I", "II", "II"]
    assert (tmp_path / "step-0000001").is_dir() and (tmp_path / "stage-I").is_dir()
    assert (tmp_path / "stage-II" / "optimizer.bin").exists()
    assert state.optimizer.state  # moments carried across stages
    assert state.completed == ["I", "II"]


def test_resume_is_bit_exact(tmp_path):
    run = tiny_run(steps_I=4)
    stage = train.default_stages(run)["I"]
    full = train.create_state(run)
    train.run_stage(stage, full)

    part = train.create_state(run)
    train.run_stage(replace(stage, steps=2), part)
    part.completed.clear()
    train.save_state(tmp_path / "mid", part)
    resumed = train.load_state(tmp_path / "mid")
    assert resumed.step == 2 and resumed.stage_step == 2
    train.run_stage(stage, resumed)
    for (n, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(a, b), n
    assert full.rng.bit_generator.state == resumed.rng.bit_generator.state


def test_same_seed_same_metric_stream():
    run = tiny_run()
    stage = train.default_stages(run)["I"]
    streams = []
    for _ in range(2):
        rows = []
        train.run_stage(stage, train.create_state(run), on_step=lambda m: rows.append((m["loss"], m["grad_norm"])))
        streams.append(rows)
    assert streams[0] == streams[1]


def test_nan_aborts_with_state_dump(tmp_path):
    run = tiny_run()
    state = train.create_state(run)
    with torch.no_grad():
        state.model.latent_in.weight.fill_(float("nan"))
    with pytest.raises(NumericalError):
        train.run_stage(train.default_stages(run)["I"], state, tmp_path)
    assert (tmp_path / "abort-step-0000000" / "state.json").exists()


def test_grad_check_spans_groups():
    torch.manual_seed(0)
    from unidiff.model import MMDiT
    model = MMDiT(tiny_config()).double()
    perturb_parameters(model, 0.05, 4)
    sample = world.random_sample("id", np.random.default_rng(0))
    result = train.grad_check(model, sample, n_weights=25, seed=1)
    assert len(result.entries) >= 25
    assert result.groups == set(PARAMETER_GROUPS)
    assert result.max_rel_error < 1e-4
    with pytest.raises(ValueError):
        train.grad_check(MMDiT(tiny_config()), sample)


def test_pad_rows_get_zero_gradient(perturbed_model):
    m = perturbed_model
    cfg = m.config
    sample = world.make_t2i(world.Scene((world.SceneObject("circle", "red", (1, 1), "large"),)))
    batch = train.prepare_batch([sample], np.random.default_rng(0), cfg, dropout=(0, 0, 0))
    prompts = train.batch_prompts(m, batch)
    rows = prompts.rows.detach().clone().requires_grad_(True)
    pred = m(type(prompts)(rows, prompts.valid), batch.t, batch.d)
    ((pred - batch.target) ** 2).mean().backward()
    pad = ~prompts.valid[0]
    assert pad.any()
    assert not rows.grad[0][pad].any()
    assert rows.grad[0][~pad].abs().sum() > 0
