import numpy as np
import pytest

from ingrain import autodiff as ad
from ingrain.baselines import (
    ImputerAdapter,
    KnnLinearConfig,
    SgruConfig,
    knn_linear_impute,
    linear_interp_impute,
    persistence_predict,
    sgru_init,
    sgru_inputs,
    sgru_predict_baseline,
)
from ingrain.data import TrajectoryWindow
from ingrain.training import evaluate


def window(points, mask, target=(0.0, 0.0), frames=None):
    points = np.asarray(points, dtype=float)
    frames = np.arange(len(points)) if frames is None else frames
    return TrajectoryWindow("u", 0, points, frames, target, np.asarray(mask, dtype=bool))


def normal_equations(frames, values, t):
    A = np.stack([np.ones_like(frames), frames], axis=1)
    coef = np.linalg.solve(A.T @ A, A.T @ values)
    return coef[0] + coef[1] * t


class TestKnnLinear:
    def test_two_neighbours_interpolate(self):
        w = window([[0, 0], [9, 9], [0, 2]], [1, 0, 1])
        np.testing.assert_allclose(knn_linear_impute(w, 2)[1], [0.0, 1.0], atol=1e-15)

    def test_identical_observed_points(self):
        w = window([[2, 3], [0, 0], [2, 3], [0, 0], [2, 3]], [1, 0, 1, 0, 1])
        for v in knn_linear_impute(w, 3).values():
            np.testing.assert_allclose(v, [2.0, 3.0], atol=1e-15)

    def test_ties_go_to_smaller_frame(self):
        # frames 1 and 3 are both one step from the missing frame 2; k=1 keeps frame 1
        w = window([[0, 0], [1, 1], [5, 5], [3, 3], [4, 4]], [1, 1, 0, 1, 1])
        np.testing.assert_array_equal(knn_linear_impute(w, 1)[2], [1.0, 1.0])

    def test_single_frame_neighbourhood_uses_mean(self):
        w = window([[0, 0], [4, 2], [0, 0]], [0, 1, 1])
        np.testing.assert_array_equal(knn_linear_impute(w, 1)[0], [4.0, 2.0])

    def test_collinear_in_time_is_exact(self):
        frames = np.array([0, 1, 3, 4, 7, 8, 9])
        pts = np.stack([0.5 + 0.25 * frames, 2.0 - 0.125 * frames], axis=1)
        mask = [1, 0, 1, 1, 0, 1, 1]
        out = knn_linear_impute(window(pts, mask, frames=frames), 5)
        for i, v in out.items():
            np.testing.assert_allclose(v, pts[i], atol=1e-9)

    def test_matches_normal_equations_on_random_window(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(10, 2))
        mask = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], dtype=bool)
        w = window(pts, mask)
        obs = np.flatnonzero(mask).astype(float)
        for i, v in knn_linear_impute(w, 4).items():
            nearest = sorted(obs, key=lambda f: (abs(f - i), f))[:4]
            idx = np.array(nearest, dtype=int)
            np.testing.assert_allclose(v, normal_equations(idx.astype(float), pts[idx], i), atol=1e-9)

    def test_contract_errors(self):
        with pytest.raises(ad.ContractError):
            knn_linear_impute(window([[0, 0], [1, 1], [2, 2]], [0, 1, 0]), 1)
        with pytest.raises(ad.ContractError):
            knn_linear_impute(window([[0, 0], [1, 1], [2, 2]], [1, 0, 1]), 3)
        with pytest.raises(ValueError):
            KnnLinearConfig(0)


class TestLinearInterp:
    def test_straight_line_recovered(self):
        pts = np.stack([np.arange(5.0), 2 * np.arange(5.0)], axis=1)
        out = linear_interp_impute(window(pts, [1, 0, 0, 0, 1]))
        for i, v in out.items():
            np.testing.assert_allclose(v, pts[i], atol=1e-15)

    def test_single_observed_point(self):
        out = linear_interp_impute(window([[0, 0], [3, -1], [0, 0]], [0, 1, 0]))
        assert out == {0: pytest.approx([3, -1]), 2: pytest.approx([3, -1])}

    def test_hand_fixture(self):
        pts = [[0, 0], [0, 0], [2, 4], [0, 0], [0, 0], [8, 1], [0, 0]]
        out = linear_interp_impute(window(pts, [0, 0, 1, 0, 0, 1, 0]))
        want = {0: [2, 4], 1: [2, 4], 3: [4, 3], 4: [6, 2], 6: [8, 1]}
        assert sorted(out) == sorted(want)
        for i, v in want.items():
            np.testing.assert_allclose(out[i], v, atol=1e-15)

    def test_nothing_missing(self):
        assert linear_interp_impute(window([[0, 0], [1, 1]], [1, 1])) == {}


class TestPersistence:
    def test_last_observed_point(self):
        w = window([[0, 0], [1, 2], [9, 9]], [1, 1, 0])
        np.testing.assert_array_equal(persistence_predict(w), [1, 2])

    def test_adapter_scores_with_evaluate(self):
        w = window([[0, 0], [1, 1], [2, 2]], [1, 0, 1], target=(2, 5))
        res = evaluate(ImputerAdapter(linear_interp_impute), [w])
        assert res.l_imp == pytest.approx(0.0, abs=1e-15)
        assert res.l_pre == pytest.approx(3.0)


def windows_with_targets(targets, L=4, seed=0):
    rng = np.random.default_rng(seed)
    return [
        window(rng.uniform(size=(L, 2)), rng.random(L) < 0.7, target=t)
        for t in targets
    ]


class TestStackedGru:
    def test_inputs_zero_missing_and_carry_mask(self):
        w = window([[1, 2], [3, 4]], [1, 0])
        np.testing.assert_array_equal(sgru_inputs([w]), [[1, 2, 1], [0, 0, 0]])

    def test_untrained_loss_is_distance_from_bias(self):
        targets = [(0.0, 1.0), (3.0, 4.0), (-1.0, 0.0)]
        data = windows_with_targets(targets)
        model, loss = sgru_predict_baseline(data, data, SgruConfig(hidden_size=4, epochs=0))
        assert model.params.equals(sgru_init(SgruConfig(hidden_size=4, epochs=0)))
        assert loss == pytest.approx(np.mean([1.0, 5.0, 1.0]), rel=1e-12)

    def test_constant_target_is_learned(self):
        data = windows_with_targets([(0.3, 0.7)] * 8)
        _, untrained = sgru_predict_baseline(data, data, SgruConfig(hidden_size=4, epochs=0))
        _, trained = sgru_predict_baseline(data, data, SgruConfig(hidden_size=4, epochs=300, lr=0.01))
        assert trained < 0.05 * untrained

    def test_deterministic(self):
        data = windows_with_targets([(0.1, 0.2), (0.4, 0.1), (0.0, 0.3)], seed=3)
        cfg = SgruConfig(hidden_size=4, epochs=3, batch_size=2, seed=5)
        a, la = sgru_predict_baseline(data, data, cfg)
        b, lb = sgru_predict_baseline(data, data, cfg)
        assert a.params.equals(b.params) and la == lb

    def test_empty_train_set(self):
        with pytest.raises(ad.ContractError):
            sgru_predict_baseline([], [], SgruConfig())
