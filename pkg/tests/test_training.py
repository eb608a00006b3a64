import numpy as np
import pytest

from ingrain import autodiff as ad
from ingrain.data import MaskSpec, TrajectoryWindow, apply_masks
from ingrain.losses import LossWeights
from ingrain.model import Ingrain
from ingrain.params import ModelConfig, ModelParams, init_params, prediction_exclusive
from ingrain.training import (
    OptimState,
    TrainConfig,
    _Accumulator,
    adam_step,
    clip_global_norm,
    evaluate,
    score,
    train,
    train_batch,
)

TINY = ModelConfig(embed_dim=8, heads=2, layers=1, hidden_size=8)


def windows(count=6, L=6, rate=0.5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        pts = np.cumsum(rng.normal(0, 0.05, size=(L + 1, 2)), axis=0) + 0.5
        out.append(TrajectoryWindow(f"u{k}", 0, pts[:L], np.arange(L), pts[L]))
    return apply_masks(out, MaskSpec(rate, seed=seed))


def tiny_cfg(**kw):
    base = dict(model=TINY, batch_size=3, epochs=2, eval_every=0, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def params(self):
        return ModelParams({"a": np.array([[1.0, -2.0]]), "b": np.array([[0.5]])})

    def test_zero_gradient_leaves_params(self):
        p, st = self.params(), OptimState()
        before = p.flat.copy()
        adam_step(p, {"a": np.zeros((1, 2)), "b": np.zeros((1, 1))}, st)
        np.testing.assert_array_equal(p.flat, before)
        np.testing.assert_array_equal(st.m, 0.0)

    def test_first_step_is_lr_times_sign(self):
        p, st = self.params(), OptimState(lr=0.01)
        before = p.flat.copy()
        adam_step(p, np.array([3.0, -0.2, 1e-3]), st)
        np.testing.assert_allclose(before - p.flat, 0.01 * np.array([1.0, -1.0, 1.0]), rtol=1e-4)

    def test_matches_closed_form_over_steps(self):
        p, st = self.params(), OptimState(lr=0.1)
        g = np.array([0.3, -1.0, 2.0])
        x = p.flat.copy()
        m = v = np.zeros(3)
        for t in range(1, 4):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            adam_step(p, g, st)
        np.testing.assert_allclose(p.flat, x, rtol=1e-13)

    def test_deterministic(self):
        p1, p2 = self.params(), self.params()
        s1, s2 = OptimState(), OptimState()
        g = np.array([0.1, 0.2, -0.3])
        adam_step(p1, g, s1)
        adam_step(p2, g, s2)
        np.testing.assert_array_equal(p1.flat, p2.flat)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            adam_step(self.params(), np.zeros(4), OptimState())

    def test_views_follow_flat_buffer(self):
        p = self.params()
        adam_step(p, np.ones(3), OptimState(lr=0.5))
        np.testing.assert_array_equal(p["b"].ravel(), p.flat[2:])


class TestClip:
    def test_long_gradient_is_scaled(self):
        g = np.array([3.0, 4.0])
        assert clip_global_norm(g, 1.0) == 5.0
        np.testing.assert_allclose(g, [0.6, 0.8])

    def test_short_gradient_untouched_and_zero_disables(self):
        g = np.array([0.3, 0.4])
        clip_global_norm(g, 1.0)
        np.testing.assert_array_equal(g, [0.3, 0.4])
        h = np.array([30.0, 40.0])
        clip_global_norm(h, 0.0)
        np.testing.assert_array_equal(h, [30.0, 40.0])


class TestTrainLoop:
    def test_zero_epochs_returns_initialisation(self):
        params, logs = train(windows(), tiny_cfg(epochs=0))
        assert logs == []
        assert params.equals(init_params(TINY, 1))

    def test_empty_train_set(self):
        with pytest.raises(ad.ContractError):
            train([], tiny_cfg())

    def test_imputation_only_keeps_prediction_params(self):
        params, _ = train(windows(), tiny_cfg(weights=LossWeights(1, 0, 0)))
        init = init_params(TINY, 1)
        for name in prediction_exclusive(TINY):
            np.testing.assert_array_equal(params[name], init[name])
        assert not np.array_equal(params["impute.W"], init["impute.W"])

    def test_deterministic(self):
        data = windows()
        a, la = train(data, tiny_cfg(remask_each_epoch=True), test_set=data[:2])
        b, lb = train(data, tiny_cfg(remask_each_epoch=True), test_set=data[:2])
        assert a.equals(b)
        assert [(e.train.l_learn, e.test_imp) for e in la] == [(e.train.l_learn, e.test_imp) for e in lb]

    def test_report_identity_every_epoch(self):
        w = LossWeights(0.7, 1.3, 0.4)
        _, logs = train(windows(), tiny_cfg(weights=w, epochs=3))
        for e in logs:
            r = e.train
            assert abs(r.l_learn - (0.7 * r.l_imp + 1.3 * r.l_pre + 0.4 * r.l_vel)) < 1e-10

    def test_one_step_per_cycle(self):
        data = windows(3, rate=0.6, seed=4)
        cycles = max(1, max(len(w.missing_positions) for w in data))
        opt = OptimState()
        seen = []
        train_batch(init_params(TINY, 0), data, tiny_cfg(), opt, _Accumulator(), seen.append)
        assert opt.step == len(seen) == cycles
        assert all(c.n_pre >= 1 for c in seen)

    def test_step_per_window_takes_one_step(self):
        opt = OptimState()
        train_batch(init_params(TINY, 0), windows(3), tiny_cfg(step_per_window=True), opt)
        assert opt.step == 1

    def test_test_columns_follow_eval_every(self):
        data = windows()
        _, logs = train(data, tiny_cfg(epochs=3, eval_every=2), test_set=data[:2])
        assert [e.test_imp is not None for e in logs] == [False, True, True]


class TestEvaluation:
    def test_prediction_runs_once_per_batch_in_test_mode(self):
        counters = {}
        model = Ingrain(TINY, init_params(TINY, 0))
        model.infer(windows(5), batch_size=2, counters=counters)
        assert counters["predict_calls"] == 3

    def test_evaluate_matches_single_window_inference(self):
        data = windows(4)
        model = Ingrain(TINY, init_params(TINY, 2))
        res = evaluate(model, data, batch_size=3)
        singles = [model.impute_and_predict(w) for w in data]
        ref = score(data, [s[0] for s in singles], [s[1] for s in singles])
        assert res.l_imp == pytest.approx(ref.l_imp, rel=1e-12)
        assert res.l_pre == pytest.approx(ref.l_pre, rel=1e-12)

    def test_score_on_perfect_answers(self):
        data = windows(3)
        imps = [{int(i): w.points[i] for i in w.missing_positions} for w in data]
        res = score(data, imps, [w.target for w in data])
        assert res.l_imp == res.l_pre == 0.0
        assert res.l_vel > 0.0  # true speeds still differ from the interpolated reference
