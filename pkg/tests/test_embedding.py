import numpy as np
import pytest

from ingrain import autodiff as ad
from ingrain.data import TrajectoryWindow
from ingrain.embedding import build_queues, embed, frame_encoding, frame_encodings


def window(mask, L=None):
    mask = np.asarray(mask, dtype=bool)
    L = len(mask)
    pts = np.arange(2 * L, dtype=float).reshape(L, 2) / 10
    return TrajectoryWindow("u", 0, pts, np.arange(L), [0.0, 0.0], mask)


class TestFrameEncoding:
    def test_frame_zero_alternates(self):
        np.testing.assert_array_equal(frame_encoding(0, 8), [[0, 1, 0, 1, 0, 1, 0, 1]])

    def test_scalar_value(self):
        assert frame_encoding(1, 16)[0, 0] == pytest.approx(0.8414709848, abs=1e-9)

    def test_matches_closed_form(self):
        D = 10
        enc = frame_encodings(np.arange(30), D)
        for t in (0, 3, 29):
            for d in range(D):
                angle = t / 10000 ** (d / D)
                want = np.sin(angle) if d % 2 == 0 else np.cos(angle)
                assert enc[t, d] == pytest.approx(want, abs=1e-15)

    def test_distinct_frames_are_distinct(self):
        enc = frame_encodings(np.arange(100), 16)
        dist = np.linalg.norm(enc[:, None] - enc[None], axis=2)
        off_diag = dist[~np.eye(100, dtype=bool)]
        assert off_diag.min() > 1e-6

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            frame_encodings([0, 1], 1)
        with pytest.raises(ValueError):
            frame_encodings([-1], 4)

    def test_cached_table_is_read_only(self):
        enc = frame_encodings(np.arange(4), 6)
        enc[0, 0] = 9.0  # fancy indexing returns a copy
        assert frame_encodings(np.arange(4), 6)[0, 0] == 0.0


class TestQueues:
    def test_zero_weights_give_pure_encodings(self):
        w = window([1, 0, 1, 1, 0])
        q = build_queues(w, ad.const(np.zeros((2, 6))), ad.const(np.zeros((2, 6))))
        np.testing.assert_array_equal(q.E_obs.value, frame_encodings(np.arange(5), 6))

    def test_missing_positions_and_encodings(self):
        w = window([1, 0, 1, 0])
        rng = np.random.default_rng(0)
        q = build_queues(w, ad.const(rng.normal(size=(2, 4))), ad.const(rng.normal(size=(2, 4))))
        np.testing.assert_array_equal(q.missing_positions, [1, 3])
        np.testing.assert_array_equal(q.E_mis.value, frame_encodings([1, 3], 4))

    def test_observed_rows_and_zeroed_missing_rows(self):
        w = window([1, 0, 1, 1])
        W = np.random.default_rng(1).normal(size=(2, 4))
        q = build_queues(w, ad.const(W), ad.const(W))
        enc = frame_encodings(np.arange(4), 4)
        for l in (0, 2, 3):
            np.testing.assert_allclose(q.E_obs.value[l], w.points[l] @ W + enc[l], rtol=1e-14)
        np.testing.assert_array_equal(q.E_obs.value[1], enc[1])

    def test_queues_agree_on_missing_rows_when_weights_shared(self):
        w = window([0, 1, 0, 0, 1, 0])
        W = np.random.default_rng(2).normal(size=(2, 8))
        q = build_queues(w, ad.const(W), ad.const(W))
        np.testing.assert_array_equal(q.E_mis.value, q.E_obs.value[q.missing_positions])

    def test_fully_observed_window_has_empty_missing_queue(self):
        q = build_queues(window([1, 1, 1]), ad.const(np.ones((2, 4))), ad.const(np.ones((2, 4))))
        assert q.E_mis.shape == (0, 4)

    def test_embedding_gradient_reaches_weights(self):
        tape = ad.Tape()
        W = tape.param("W", np.zeros((2, 4)))
        pts = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = tape.backward(ad.sum_all(embed(ad.const(pts), W, [0, 1])))["W"]
        np.testing.assert_array_equal(g, np.repeat(pts.sum(axis=0)[:, None], 4, axis=1))
