import json
import math

import numpy as np
import pytest

from dilemma.config import TrainConfig, parse_config_text, parse_overrides
from dilemma.model import params_digest
from dilemma.rng import ConfigError, SparsitySchedule
from dilemma.tensor import Tensor, precision
from dilemma.train import (
    AdamWState,
    IterationPlan,
    NonFiniteGradientError,
    TrainingDivergedError,
    adamw_step,
    build_batch,
    compute_losses,
    ema_momentum_schedule,
    init_train_state,
    load_datasets,
    lr_schedule,
    plan_iterations,
    read_metrics,
    run_pretraining,
    toy_batch,
    toy_config,
    toy_union_gradient_errors,
    train_step,
)


def _tiny_cfg(**overrides):
    return toy_config().with_overrides({"data.n_per_class": "10", "data.test_per_class": "2", **overrides})


class TestAdamW:
    def test_hand_computed_two_steps(self):
        # step 1 and 2 with a constant gradient: bias-corrected update is lr * sign(g)
        with precision(np.float64):
            p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamWState()
        for expected in ([0.895, -2.09], [0.790525, -2.17955]):
            p.grad = np.array([0.5, 0.1])
            adamw_step({"w": p}, state, lr=0.1, weight_decay=0.05)
            np.testing.assert_allclose(p.data, expected, atol=1e-7)
        assert state.step == 2

    def test_no_decay_is_plain_adam(self):
        with precision(np.float64):
            p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([-4.0])
        adamw_step({"w": p}, AdamWState(), lr=0.01, weight_decay=0.0)
        np.testing.assert_allclose(p.data, [3.01], atol=1e-9)

    def test_frozen_and_gradless_untouched(self):
        frozen = Tensor(np.ones(2))
        frozen.grad = np.ones(2)
        idle = Tensor(np.ones(2), requires_grad=True)
        adamw_step({"a": frozen, "b": idle}, AdamWState(), lr=0.1)
        np.testing.assert_array_equal(frozen.data, 1.0)
        np.testing.assert_array_equal(idle.data, 1.0)

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NonFiniteGradientError, match="blocks.0.qkv"):
            adamw_step({"blocks.0.qkv": p}, AdamWState(), lr=0.1)
        np.testing.assert_array_equal(p.data, 1.0)


class TestSchedules:
    def test_lr_warmup_and_cosine(self):
        assert lr_schedule(0, 100, 10, 1e-3) == 0.0
        assert lr_schedule(5, 100, 10, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(10, 100, 10, 1e-3) == pytest.approx(1e-3)
        assert lr_schedule(55, 100, 10, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-15)

    def test_lr_scales_with_multiplier(self):
        for step in (3, 10, 40):
            assert lr_schedule(step, 100, 10, 1e-3, 4) == pytest.approx(4 * lr_schedule(step, 100, 10, 1e-3))

    def test_ema_momentum_endpoints(self):
        assert ema_momentum_schedule(0, 100, 0.99) == pytest.approx(0.99)
        assert ema_momentum_schedule(50, 100, 0.99) == pytest.approx(0.995)
        assert ema_momentum_schedule(100, 100, 0.99) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            ema_momentum_schedule(0, 10, 0.0)


class TestPlanning:
    def test_every_sample_once_per_epoch(self):
        cfg = TrainConfig(epochs=3, base_batch=8)
        plans = plan_iterations(cfg, 203)
        for epoch in range(3):
            idx = np.concatenate([p.sample_indices for p in plans if p.epoch == epoch])
            np.testing.assert_array_equal(np.sort(idx), np.arange(203))

    def test_batch_size_follows_multiplier(self):
        cfg = TrainConfig(epochs=1, base_batch=8)
        plans = plan_iterations(cfg, 1000)
        for p in plans[:-1]:
            assert len(p.sample_indices) == 8 * p.multiplier
            assert dict(cfg.schedule.entries)[p.sparsity] == p.multiplier

    def test_drops_singleton_tail(self):
        cfg = TrainConfig(epochs=1, base_batch=2, schedule=SparsitySchedule(((0.5, 1),)))
        plans = plan_iterations(cfg, 5)
        assert [len(p.sample_indices) for p in plans] == [2, 2]

    def test_deterministic_and_seed_dependent(self):
        a = plan_iterations(TrainConfig(epochs=2), 500)
        b = plan_iterations(TrainConfig(epochs=2), 500)
        c = plan_iterations(TrainConfig(epochs=2, master_seed=1), 500)
        assert [p.sparsity for p in a] == [p.sparsity for p in b]
        np.testing.assert_array_equal(a[0].sample_indices, b[0].sample_indices)
        assert not np.array_equal(a[0].sample_indices, c[0].sample_indices)


class TestLossComposition:
    def test_dense_draw_excludes_dilemma(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        bundle = compute_losses(state.student, state.teacher, cfg.vit, toy_batch(cfg, sparsity=0.0), cfg)
        assert not bundle.dilemma_active
        assert bundle.union.item() == bundle.contrastive.item()

    def test_sparse_draw_adds_weighted_dilemma(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        bundle = compute_losses(state.student, state.teacher, cfg.vit, toy_batch(cfg), cfg)
        assert bundle.dilemma_active
        # head starts at the prior: 2 of 8 kept tokens mismatched, logit ln(0.25/0.75) for all,
        # so the BCE is the binary entropy H(0.25) and every token is called "correct"
        h = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        assert bundle.dilemma.item() == pytest.approx(h, abs=1e-6)
        assert bundle.union.item() == pytest.approx(bundle.contrastive.item() + 0.4 * h, abs=1e-5)
        assert bundle.md_accuracy == pytest.approx(1 - 0.25)

    def test_mismatch_bias_starts_at_prior(self):
        state = init_train_state(toy_config(theta=0.2))
        np.testing.assert_allclose(state.student["aux_head.bias"].data, math.log(0.2 / 0.8), rtol=1e-6)
        np.testing.assert_array_equal(state.student["aux_head.weight"].data, 0.0)
        for cfg in (toy_config(theta=0.0), toy_config(variant="flip")):
            np.testing.assert_array_equal(init_train_state(cfg).student["aux_head.bias"].data, 0.0)

    def test_lambda_zero_reports_but_excludes(self):
        cfg = toy_config().with_overrides({"lambda_dilemma": "0"})
        state = init_train_state(cfg)
        bundle = compute_losses(state.student, state.teacher, cfg.vit, toy_batch(cfg), cfg)
        assert not bundle.dilemma_active
        assert math.isfinite(bundle.dilemma.item())
        assert bundle.union.item() == bundle.contrastive.item()

    def test_union_gradient_toy(self):
        errors = toy_union_gradient_errors(seed=0)
        assert max(errors.values()) < 1e-4

    def test_union_gradient_with_batch_norm_heads(self):
        errors = toy_union_gradient_errors(seed=1, n_samples=4, head_norm="batch")
        assert "proj_head.bn1.gamma" in errors
        assert max(errors.values()) < 1e-4


class TestTrainStep:
    def test_teacher_gets_no_gradient(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        before = params_digest(state.teacher)
        batch = toy_batch(cfg)
        bundle = compute_losses(state.student, state.teacher, cfg.vit, batch, cfg)
        bundle.union.backward()
        assert params_digest(state.teacher) == before
        assert all(p.grad is None for p in state.teacher.values())
        train_step(state, batch, cfg, lr=1e-3, ema_m=1.0)
        assert params_digest(state.teacher) == before

    def test_step_moves_student_and_records(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        before = params_digest(state.student)
        rec = train_step(state, toy_batch(cfg), cfg, lr=1e-3, ema_m=0.99, iteration=7)
        assert params_digest(state.student) != before
        assert rec.iteration == 7 and rec.batch_size == 2 and rec.sparsity_drawn == 0.5
        assert rec.ema_m == 0.99 and rec.wall_ms > 0
        assert "wall_ms" not in rec.deterministic_fields()
        assert json.loads(rec.to_json())["loss_union"] == rec.loss_union

    def test_repeated_steps_descend(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        batch = toy_batch(cfg)
        losses = [train_step(state, batch, cfg, lr=3e-3, ema_m=1.0).loss_union for _ in range(30)]
        assert losses[-1] < losses[0]

    def test_divergence_raises_with_checkpoint(self):
        cfg = toy_config()
        state = init_train_state(cfg)
        state.student["cls_token"].data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train_step(state, toy_batch(cfg), cfg, lr=1e-3, ema_m=0.99, last_checkpoint="runs/x.dlck")
        assert info.value.last_checkpoint == "runs/x.dlck"

    def test_simclr_mode_has_no_teacher(self):
        cfg = toy_config().with_overrides({"mode": "simclr"})
        state = init_train_state(cfg)
        assert state.teacher is None
        rec = train_step(state, toy_batch(cfg), cfg, lr=1e-3, ema_m=None)
        assert rec.ema_m is None and math.isfinite(rec.loss_union)


class TestRun:
    def test_hundred_sample_epoch(self, tmp_path):
        cfg = _tiny_cfg()
        train, _ = load_datasets(cfg)
        assert len(train) == 100
        result = run_pretraining(cfg, tmp_path, dataset=train)
        rows = read_metrics(tmp_path / "metrics.jsonl")
        assert len(rows) == len(result.records) == 50
        assert all(math.isfinite(r["loss_union"]) for r in rows)
        assert rows[0]["lr"] == 0.0
        assert (tmp_path / "final.dlck").exists()
        assert TrainConfig.from_file(tmp_path / "resolved.cfg") == cfg

    def test_identical_configs_identical_records(self):
        cfg = _tiny_cfg()
        train, _ = load_datasets(cfg)
        a = run_pretraining(cfg, dataset=train, max_iterations=3).records
        b = run_pretraining(cfg, dataset=train, max_iterations=3).records
        assert [r.deterministic_fields() for r in a] == [r.deterministic_fields() for r in b]

    def test_periodic_checkpoints(self, tmp_path):
        cfg = _tiny_cfg(epochs="2", checkpoint_every="1")
        train, _ = load_datasets(cfg)
        run_pretraining(cfg, tmp_path, dataset=train.subset(np.arange(8)))
        assert sorted(p.name for p in tmp_path.glob("*.dlck")) == [
            "checkpoint_epoch001.dlck",
            "checkpoint_epoch002.dlck",
            "final.dlck",
        ]

    def test_build_batch_is_deterministic(self):
        cfg = _tiny_cfg()
        train, _ = load_datasets(cfg)
        it = IterationPlan(0, 0, 0.5, 1, np.array([3, 9]))
        a, b = build_batch(cfg, train, it), build_batch(cfg, train, it)
        np.testing.assert_array_equal(a.students[0].tiles, b.students[0].tiles)
        np.testing.assert_array_equal(a.students[0].positions, b.students[0].positions)


class TestConfig:
    def test_text_round_trip(self):
        cfg = TrainConfig().with_overrides({"theta": "0.3", "vit.depth": "2", "schedule": "0:1,0.5:2"})
        assert TrainConfig.from_text(cfg.to_text()) == cfg
        assert cfg.digest() == TrainConfig.from_text(cfg.to_text()).digest()
        assert cfg.digest() != TrainConfig().digest()

    def test_comments_and_blank_lines(self):
        assert parse_config_text("# note\n\nepochs = 3  # inline\n") == {"epochs": "3"}

    @pytest.mark.parametrize(
        "overrides",
        [{"nonsense": "1"}, {"vit.nonsense": "1"}, {"epochs": "three"}, {"theta": "1.5"}, {"symmetric": "maybe"}],
    )
    def test_rejects_bad_values(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(overrides)

    def test_bad_override_syntax(self):
        with pytest.raises(ConfigError):
            parse_overrides(["theta"])

    def test_aux_outputs_follow_variant(self):
        assert TrainConfig(loss_variant="pos_correction").vit.aux_outputs == 64
        assert TrainConfig().vit.aux_outputs == 1
