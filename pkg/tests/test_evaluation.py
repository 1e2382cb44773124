import csv

import numpy as np
import pytest

from unidiff import evaluation as ev
from unidiff import world
from unidiff.config import RunConfig
from unidiff.model import MMDiT, ModelConfig, SIZE_LADDER, count_tokens

from conftest import param_oracle, tiny_config


def test_oracle_scores_perfectly():
    r = ev.eval_compositional(ev.oracle_generator, 8, 0)
    assert set(r.metrics) == set(world.SCENE_CATEGORIES)
    assert all(v == 1.0 for v in r.metrics.values())
    assert r.sample_count == 8 * 5
    e = ev.eval_editing(ev.oracle_generator, 12, 0)
    assert e.metrics == {"edit_success": 1.0, "preservation_rmse": 0.0}
    assert ev.eval_id(ev.oracle_generator, 6, 0).metrics["id_correlation"] >= 0.99
    aux = ev.eval_auxiliary(ev.oracle_generator, 4, 0)
    assert all(v == 1.0 for v in aux.metrics.values())


def test_copy_input_trade_off_extreme():
    e = ev.eval_editing(ev.copy_input_generator, 20, 1)
    assert e.metrics["preservation_rmse"] == 0.0
    non_identity = [r for r in e.records if "instruction" in r["checks"]]
    assert e.metrics["edit_success"] <= 0.05 and len(non_identity) == 20


def test_zero_init_model_hits_floor():
    model = MMDiT(tiny_config(n_layers=1))
    r = ev.eval_compositional(ev.model_generator(model, steps=2), 2, 0)
    assert all(v == 0.0 for v in r.metrics.values())
    assert not any(rec["checks"]["presence"] for rec in r.records)


def test_evaluation_is_deterministic():
    model = MMDiT(tiny_config(n_layers=1))
    from unidiff.model import perturb_parameters
    perturb_parameters(model, 0.05, 0)
    a = ev.eval_id(ev.model_generator(model, steps=2), 2, 5)
    b = ev.eval_id(ev.model_generator(model, steps=2), 2, 5)
    assert a.metrics == b.metrics and a.records == b.records


def test_noise_images_have_low_glyph_correlation():
    rng = np.random.default_rng(0)
    lib = world.glyph_library()
    worst = max(
        world.max_correlation(rng.uniform(-1, 1, (64, 64, 3)).astype(np.float32), lib[rng.integers(64)])
        for _ in range(1000)
    )
    assert worst < 0.3


def test_empty_report_is_valid(tmp_path):
    r = ev.eval_compositional(ev.oracle_generator, 0, 0)
    r.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(ev.REPORT_COLUMNS)
    assert len(rows) == 5 and all(row["count"] == "0" for row in rows)
    assert "single_object" in r.table()


def test_bench_report_structure():
    cfg = tiny_config()
    b = ev.bench_efficiency(cfg, reps=2)
    assert [(r["task"], r["mode"]) for r in b.rows] == [("t2i", "channel"), ("edit", "channel"),
                                                        ("t2i", "sequence"), ("edit", "sequence")]
    for r in b.rows:
        assert r["tokens"] == count_tokens(r["task"], cfg, r["mode"])
    assert b.lookup("edit", "channel")["tokens"] == b.lookup("t2i", "channel")["tokens"]


def test_bench_flops_and_time_rank_correlated():
    b = ev.bench_efficiency(ModelConfig.from_size("micro-B"), reps=5, resolutions=(32, 48, 64))
    channel = {(r["resolution"], r["tokens"]) for r in b.rows if r["mode"] == "channel"}
    assert len({t for _, t in channel}) == 3
    assert b.rank_correlation() >= 0.9


def test_scaling_rows_report_exact_parameter_counts():
    rows = ev.run_scaling(None)
    assert [r["size"] for r in rows] == list(SIZE_LADDER)
    for r in rows:
        assert r["parameters"] == param_oracle(r["n_layers"], r["d_model"])
    assert rows[0]["parameters"] < rows[1]["parameters"] < rows[2]["parameters"]


def test_ablation_requires_budget_flag(tmp_path):
    with pytest.raises(ev.BudgetNotAcknowledged):
        ev.run_ablation(RunConfig(size="micro-XL", seed=0), tmp_path, 1, 0)


def test_ablation_plan_runs_at_toy_scale(tmp_path):
    run = RunConfig(size="custom", seed=0, batch=2, n_layers=1, d_model=32, n_heads=4,
                    steps_I=1, steps_II=1, steps_III=1)
    rows = ev.run_ablation(run, tmp_path, eval_n=1, seed=0, acknowledge_budget=True, steps=1)
    assert [r["row"] for r in rows] == ["a", "b", "d", "e"]
    assert rows[0]["tasks"] == "t2i" and "auxiliary" in rows[2]["tasks"]
    assert (tmp_path / "row-e" / "stage-III").is_dir() and not (tmp_path / "row-a" / "stage-III").exists()
    assert ev.ABLATION_ROWS["c"] == ("t2i", "edit", "id")
