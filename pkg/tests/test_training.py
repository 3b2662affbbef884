"""Learning-rate schedule, EMA, Adam, mixup, loss terms, training loop."""

import math

import numpy as np
import pytest

from tempsed.events import AnnotationKind, Event, EventRoster, TimeInterval
from tempsed.model import init_parameters, forward_batch, tiny_config
from tempsed.training import (
    MeanTeacherState,
    TrainConfig,
    TrainingBatch,
    TrainingData,
    adam_update,
    apply_mixup,
    compute_loss,
    create_state,
    ema_update,
    lr_schedule,
    mixup_batch,
    rasterize_strong_targets,
    serialize_history,
    train_loop,
    train_step,
)


class TestLrSchedule:
    def test_peak_reached_exactly_at_ramp_end(self):
        assert lr_schedule(12500) == 0.001

    def test_ramp_start(self):
        np.testing.assert_allclose(lr_schedule(0), 0.001 * math.exp(-5.0), rtol=1e-12)

    def test_ramp_formula_midway(self):
        want = 0.001 * math.exp(-5.0 * (1.0 - 2500 / 12500) ** 2)
        np.testing.assert_allclose(lr_schedule(2500), want, rtol=1e-12)

    def test_decay_after_ramp(self):
        np.testing.assert_allclose(
            lr_schedule(12600), 0.001 * 0.99995**100, rtol=1e-12
        )

    def test_monotone_on_ramp(self):
        values = [lr_schedule(s) for s in range(0, 12501, 500)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestEma:
    def test_constant_student_closed_form(self):
        """teacher_n = s + (t0 - s) * decay^n, exact in float64."""
        decay = 0.999
        teacher = {"w": np.full(4, 2.0)}
        student = {"w": np.full(4, -1.0)}
        for n in range(1, 101):
            ema_update(teacher, student, decay)
            want = -1.0 + 3.0 * decay**n
            np.testing.assert_allclose(teacher["w"], want, atol=1e-12)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        decay = 0.99
        teacher = {"w": rng.normal(size=8)}
        ref = teacher["w"].copy()
        for _ in range(100):
            student = {"w": rng.normal(size=8)}
            ema_update(teacher, student, decay)
            ref = decay * ref + (1 - decay) * student["w"]
        np.testing.assert_allclose(teacher["w"], ref, atol=1e-12)

    def test_covers_running_stats(self):
        """Every array updates, batch-norm running stats included."""
        teacher = {"bn.running_mean": np.zeros(3), "w": np.zeros(3)}
        student = {"bn.running_mean": np.ones(3), "w": np.ones(3)}
        ema_update(teacher, student, 0.5)
        np.testing.assert_allclose(teacher["bn.running_mean"], 0.5)

    def test_name_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ema_update({"a": np.zeros(1)}, {"b": np.zeros(1)})


class TestAdam:
    def test_first_step_moves_by_lr_against_gradient_sign(self):
        """Bias correction makes the first update ~lr * sign(g)."""
        params = {"w": np.array([1.0, 1.0])}
        grads = {"w": np.array([0.5, -2.0])}
        m = {"w": np.zeros(2)}
        v = {"w": np.zeros(2)}
        adam_update(params, grads, m, v, step_t=1, lr=0.1)
        np.testing.assert_allclose(params["w"], [0.9, 1.1], atol=1e-6)

    def test_zero_gradient_leaves_parameter(self):
        params = {"w": np.array([3.0])}
        m = {"w": np.zeros(1)}
        v = {"w": np.zeros(1)}
        adam_update(params, {"w": np.zeros(1)}, m, v, step_t=1, lr=0.1)
        np.testing.assert_array_equal(params["w"], [3.0])


def _toy_batch(dtype=np.float64):
    rng = np.random.default_rng(3)
    nw, ns, nu, t, f, c, t_out = 2, 2, 3, 8, 4, 2, 4
    features = rng.random((nw + ns + nu, t, f)).astype(dtype)
    kinds = (
        (AnnotationKind.WEAK,) * nw
        + (AnnotationKind.STRONG,) * ns
        + (AnnotationKind.UNLABELED,) * nu
    )
    weak = rng.integers(0, 2, (nw, c)).astype(dtype)
    strong = rng.integers(0, 2, (ns, t_out, c)).astype(dtype)
    return TrainingBatch(features, kinds, weak, strong)


class TestMixup:
    def test_identity_when_lambda_one(self):
        batch = _toy_batch()
        perms = {k: np.arange(n) for k, n in (
            (AnnotationKind.WEAK, 2), (AnnotationKind.STRONG, 2), (AnnotationKind.UNLABELED, 3),
        )}
        mixed = apply_mixup(batch, 1.0, perms)
        np.testing.assert_array_equal(mixed.features, batch.features)
        np.testing.assert_array_equal(mixed.weak_targets, batch.weak_targets)

    def test_subsets_mix_only_internally(self):
        """A weak row after mixup is a combination of weak rows alone."""
        batch = _toy_batch()
        perms = {
            AnnotationKind.WEAK: np.array([1, 0]),
            AnnotationKind.STRONG: np.array([0, 1]),
            AnnotationKind.UNLABELED: np.array([2, 0, 1]),
        }
        lam = 0.3
        mixed = apply_mixup(batch, lam, perms)
        want = lam * batch.features[0] + (1 - lam) * batch.features[1]
        np.testing.assert_allclose(mixed.features[0], want, atol=1e-12)
        want_u = lam * batch.features[4] + (1 - lam) * batch.features[6]
        np.testing.assert_allclose(mixed.features[4], want_u, atol=1e-12)

    def test_targets_follow_features(self):
        batch = _toy_batch()
        perms = {
            AnnotationKind.WEAK: np.array([1, 0]),
            AnnotationKind.STRONG: np.array([1, 0]),
            AnnotationKind.UNLABELED: np.arange(3),
        }
        lam = 0.25
        mixed = apply_mixup(batch, lam, perms)
        np.testing.assert_allclose(
            mixed.weak_targets,
            lam * batch.weak_targets + (1 - lam) * batch.weak_targets[[1, 0]],
        )
        np.testing.assert_allclose(
            mixed.strong_targets,
            lam * batch.strong_targets + (1 - lam) * batch.strong_targets[[1, 0]],
        )

    def test_gate_probability_zero_is_identity(self):
        batch = _toy_batch()
        out = mixup_batch(batch, np.random.default_rng(0), prob=0.0)
        assert out is batch

    def test_deterministic_given_rng(self):
        batch = _toy_batch()
        a = mixup_batch(batch, np.random.default_rng(9), prob=1.0)
        b = mixup_batch(batch, np.random.default_rng(9), prob=1.0)
        np.testing.assert_array_equal(a.features, b.features)


class TestLoss:
    def test_single_element_bce_is_ln2(self):
        """Clip prob 0.5 against target 1 with no other terms -> ln 2."""
        batch = TrainingBatch(
            np.zeros((1, 4, 2)),
            (AnnotationKind.WEAK,),
            np.array([[1.0]]),
            np.zeros((0, 2, 1)),
        )
        frame = np.full((1, 2, 1), 0.5)
        clip = np.array([[0.5]])
        out = compute_loss(frame, clip, frame, clip, batch, TrainConfig())
        np.testing.assert_allclose(out.classification, math.log(2.0), rtol=1e-12)
        np.testing.assert_allclose(out.consistency, 0.0)

    def test_clamped_probability_has_zero_gradient(self):
        batch = TrainingBatch(
            np.zeros((1, 4, 2)),
            (AnnotationKind.WEAK,),
            np.array([[1.0]]),
            np.zeros((0, 2, 1)),
        )
        frame = np.full((1, 2, 1), 0.5)
        clip = np.array([[0.0]])  # below the clamp floor
        out = compute_loss(frame, clip, frame, clip, batch, TrainConfig())
        assert math.isfinite(out.loss)
        consistency_part = 2.0 * 2.0 * (0.0 - 0.0)
        np.testing.assert_allclose(out.grad_clip[0, 0], consistency_part)

    def test_consistency_weight_and_means(self):
        """loss = cw * (bce_w.mean + bce_s.mean) + sw * (mse_clip + mse_frame)."""
        rng = np.random.default_rng(1)
        batch = _toy_batch()
        t_out = batch.strong_targets.shape[1]
        n, c = batch.features.shape[0], batch.weak_targets.shape[1]
        sf = rng.uniform(0.1, 0.9, (n, t_out, c))
        sc = rng.uniform(0.1, 0.9, (n, c))
        tf = rng.uniform(0.1, 0.9, (n, t_out, c))
        tc = rng.uniform(0.1, 0.9, (n, c))
        cfg = TrainConfig(consistency_weight=2.0, classification_weight=1.0)
        out = compute_loss(sf, sc, tf, tc, batch, cfg)

        y, p = batch.weak_targets, sc[:2]
        bce_w = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        ys, ps = batch.strong_targets, sf[2:4]
        bce_s = -(ys * np.log(ps) + (1 - ys) * np.log(1 - ps)).mean()
        mse = ((sc - tc) ** 2).mean() + ((sf - tf) ** 2).mean()
        np.testing.assert_allclose(out.classification, bce_w + bce_s, rtol=1e-10)
        np.testing.assert_allclose(out.consistency, mse, rtol=1e-10)
        np.testing.assert_allclose(out.loss, bce_w + bce_s + 2.0 * mse, rtol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        batch = _toy_batch()
        t_out = batch.strong_targets.shape[1]
        n, c = batch.features.shape[0], batch.weak_targets.shape[1]
        sf = rng.uniform(0.2, 0.8, (n, t_out, c))
        sc = rng.uniform(0.2, 0.8, (n, c))
        tf = rng.uniform(0.2, 0.8, (n, t_out, c))
        tc = rng.uniform(0.2, 0.8, (n, c))
        cfg = TrainConfig()
        out = compute_loss(sf, sc, tf, tc, batch, cfg)
        h = 1e-7
        for arr, grad in ((sc, out.grad_clip), (sf, out.grad_frame)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 6)):
                orig = flat[i]
                flat[i] = orig + h
                up = compute_loss(sf, sc, tf, tc, batch, cfg).loss
                flat[i] = orig - h
                down = compute_loss(sf, sc, tf, tc, batch, cfg).loss
                flat[i] = orig
                np.testing.assert_allclose(gflat[i], (up - down) / (2 * h), atol=1e-5)


def _tiny_training_setup(dtype="float64"):
    cfg = tiny_config()
    tc = TrainConfig(
        epochs=1,
        batches_per_epoch=2,
        weak_per_batch=2,
        strong_per_batch=2,
        unlabeled_per_batch=2,
        ramp_steps=10,
        seed=0,
        dtype=dtype,
    )
    rng = np.random.default_rng(11)
    t, f = 16, cfg.num_mel_bins
    classes = ("a", "b")
    rosters = tuple(
        EventRoster(f"s{i}", 2.0, (Event("a", TimeInterval(0.2, 1.1)),)) for i in range(3)
    )
    data = TrainingData(
        classes=classes,
        weak_features=rng.random((3, t, f)),
        weak_targets=rng.integers(0, 2, (3, 2)).astype(np.float64),
        strong_features=rng.random((3, t, f)),
        strong_rosters=rosters,
        unlabeled_features=rng.random((4, t, f)),
        clip_duration=2.0,
    )
    return cfg, tc, data


class TestTrainStep:
    def _state_and_batch(self):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=0, dtype=np.float64)
        state = create_state(params)
        rng = np.random.default_rng(5)
        t_out = cfg.output_frames(8)
        batch = TrainingBatch(
            rng.random((6, 8, cfg.num_mel_bins)),
            (AnnotationKind.WEAK,) * 2
            + (AnnotationKind.STRONG,) * 2
            + (AnnotationKind.UNLABELED,) * 2,
            rng.integers(0, 2, (2, cfg.num_classes)).astype(np.float64),
            rng.integers(0, 2, (2, t_out, cfg.num_classes)).astype(np.float64),
        )
        return cfg, state, batch

    def test_step_advances_and_moves_both_models(self):
        cfg, state, batch = self._state_and_batch()
        before_student = {k: v.copy() for k, v in state.student.items()}
        before_teacher = {k: v.copy() for k, v in state.teacher.items()}
        tc = TrainConfig(ramp_steps=10)
        state, stats = train_step(
            state, batch, cfg, tc,
            np.random.default_rng(1), np.random.default_rng(2),
        )
        assert state.step == 1
        assert math.isfinite(stats.loss)
        assert any(
            not np.array_equal(before_student[k], state.student[k]) for k in before_student
        )
        assert any(
            not np.array_equal(before_teacher[k], state.teacher[k]) for k in before_teacher
        )

    def test_bn_running_stats_committed(self):
        cfg, state, batch = self._state_and_batch()
        before = state.student["block0.bn.running_mean"].copy()
        tc = TrainConfig(ramp_steps=10)
        train_step(state, batch, cfg, tc, np.random.default_rng(1), np.random.default_rng(2))
        assert not np.array_equal(before, state.student["block0.bn.running_mean"])

    def test_poisoned_parameters_abort(self):
        cfg, state, batch = self._state_and_batch()
        state.student["head.b"][:] = np.nan
        with pytest.raises((RuntimeError, ValueError)):
            train_step(
                state, batch, cfg, TrainConfig(ramp_steps=10),
                np.random.default_rng(1), np.random.default_rng(2),
            )

    def test_overfit_single_batch_decreases_loss(self):
        """Fifty repeated steps on one batch shrink the loss monotonically
        once the schedule's early ramp is past its noisy first few steps."""
        cfg, state, batch = self._state_and_batch()
        tc = TrainConfig(
            ramp_steps=10, lr_peak=0.005, consistency_weight=0.0, mixup_prob=0.0
        )
        losses = []
        for i in range(50):
            state, stats = train_step(
                state, batch, cfg, tc,
                np.random.default_rng(0), np.random.default_rng(0),
            )
            losses.append(stats.classification)
        assert losses[-1] < losses[0]
        drops = [b - a for a, b in zip(losses, losses[1:])]
        assert sum(d < 0 for d in drops) >= 40


class TestTrainLoop:
    def test_deterministic_per_seed(self):
        cfg, tc, data = _tiny_training_setup()
        s1, h1 = train_loop(data, cfg, tc)
        s2, h2 = train_loop(data, cfg, tc)
        assert h1 == h2
        for k in s1.student:
            np.testing.assert_array_equal(s1.student[k], s2.student[k])
            np.testing.assert_array_equal(s1.teacher[k], s2.teacher[k])

    def test_seed_changes_outcome(self):
        cfg, tc, data = _tiny_training_setup()
        s1, _ = train_loop(data, cfg, tc)
        s2, _ = train_loop(data, cfg, tc.with_overrides(seed=1))
        assert any(not np.array_equal(s1.student[k], s2.student[k]) for k in s1.student)

    def test_history_schema_and_serialization(self):
        cfg, tc, data = _tiny_training_setup()
        _, history = train_loop(data, cfg, tc)
        assert [row["epoch"] for row in history] == [0]
        text = serialize_history(history)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,classification_loss,consistency_loss,lr"
        assert len(lines) == 2

    def test_class_count_mismatch_rejected(self):
        cfg, tc, data = _tiny_training_setup()
        bad = tiny_config(num_classes=5)
        with pytest.raises(ValueError):
            train_loop(data, bad, tc)


class TestRasterizeStrongTargets:
    def test_grid_matches_output_frames(self):
        rosters = (EventRoster("s", 2.0, (Event("a", TimeInterval(0.0, 1.0)),)),)
        grid = rasterize_strong_targets(rosters, ("a", "b"), 4, 2.0)
        assert grid.shape == (1, 4, 2)
        np.testing.assert_array_equal(grid[0, :, 0], [1, 1, 0, 0])


class TestTeacherDropoutToggle:
    def test_flag_changes_the_teacher_forward(self):
        cfg = tiny_config()
        params = init_parameters(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(7)
        x = rng.random((2, 8, cfg.num_mel_bins))
        with_dropout, _, _ = forward_batch(
            x, params, cfg, mode="teacher", rng=np.random.default_rng(0)
        )
        without, _, _ = forward_batch(x, params, cfg, mode="eval")
        assert not np.allclose(with_dropout, without)
