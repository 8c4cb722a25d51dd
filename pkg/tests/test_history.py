import math

import numpy as np
import pytest
import torch

from appgen.corpus import UsageRecord, UserSequence
from appgen.encoders import EmbeddingTable, temporal_encoding
from appgen.errors import ValidationError
from appgen.history import (
    ConditionTables,
    HistoryAttention,
    HistoryWindow,
    attention_weights,
    build_window,
    encode_history,
)


def make_tables(num_apps=6, num_locs=5, app_dim=8, loc_dim=4, seed=0):
    rng = np.random.default_rng(seed)
    app = EmbeddingTable("app", {i: rng.normal(size=app_dim) for i in range(num_apps)})
    loc = EmbeddingTable(
        "location", {i: rng.normal(size=loc_dim) for i in range(num_locs)}
    )
    return ConditionTables(app, loc)


def make_seq(n, user="u", seed=1):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.integers(0, 86400, n))
    events = tuple(
        UsageRecord(user, int(t), int(rng.integers(0, 5)), int(rng.integers(0, 6)))
        for t in times
    )
    return UserSequence(user, events)


def make_attention(tables, attn_dim=16, seed=2, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return HistoryAttention(tables.point_dim, attn_dim, seed_rng=rng, dtype=dtype)


class TestBuildWindow:
    def test_middle_position_takes_trailing_k(self):
        tables = make_tables()
        seq = make_seq(5)
        apps = [3, 1, 4, 1, 5]
        win = build_window(seq, apps, i=3, k=2, tables=tables)
        assert len(win) == 2
        for row, j in zip(win.points, (1, 2)):
            ev = seq.events[j - 1]
            expected = tables.point_feature(ev.timestamp, ev.location_id, apps[j - 1])
            assert np.array_equal(row, expected)

    def test_first_position_empty(self):
        tables = make_tables()
        win = build_window(make_seq(5), [], i=1, k=4, tables=tables)
        assert len(win) == 0
        assert win.points.shape == (0, tables.point_dim)

    def test_deep_position_slides(self):
        tables = make_tables()
        seq = make_seq(12)
        apps = [a % 6 for a in range(12)]
        win = build_window(seq, apps[:9], i=10, k=4, tables=tables)
        assert len(win) == 4
        first = tables.point_feature(
            seq.events[5].timestamp, seq.events[5].location_id, 5 % 6
        )
        assert np.array_equal(win.points[0], first)

    def test_window_size_law(self):
        tables = make_tables()
        seq = make_seq(9)
        apps = [0] * 9
        for k in (1, 3, 7, 16):
            for i in range(1, 10):
                win = build_window(seq, apps[: i - 1], i, k, tables)
                assert len(win) == min(k, i - 1)

    def test_uses_generated_not_ground_truth(self):
        tables = make_tables()
        seq = make_seq(4)
        win_a = build_window(seq, [0, 0, 0], i=4, k=3, tables=tables)
        win_b = build_window(seq, [1, 1, 1], i=4, k=3, tables=tables)
        assert not np.array_equal(win_a.points, win_b.points)

    def test_position_bounds_checked(self):
        tables = make_tables()
        seq = make_seq(3)
        with pytest.raises(ValidationError):
            build_window(seq, [], i=0, k=2, tables=tables)
        with pytest.raises(ValidationError):
            build_window(seq, [0] * 3, i=4, k=2, tables=tables)
        with pytest.raises(ValidationError):
            build_window(seq, [0], i=3, k=2, tables=tables)  # prefix too short

    def test_missing_embedding_rejected(self):
        tables = make_tables(num_apps=2)
        seq = make_seq(3)
        with pytest.raises(ValidationError):
            build_window(seq, [5, 5], i=3, k=2, tables=tables)

    def test_window_invariants_validated(self):
        with pytest.raises(ValidationError):
            HistoryWindow(position=3, k=5, points=np.zeros((1, 4)))


class TestEncodeHistory:
    def test_singleton_window_passes_value_through(self):
        tables = make_tables()
        attn = make_attention(tables)
        seq = make_seq(2)
        win = build_window(seq, [3], i=2, k=4, tables=tables)
        out = encode_history(win, attn)
        w_v = attn.w_v.detach().numpy()
        expected = w_v @ win.points[0]
        assert np.allclose(out[:-1], expected, atol=1e-12)
        assert out[-1] == 0.0
        gamma = attention_weights(win, attn)
        assert gamma.shape == (1,)
        assert gamma[0] == pytest.approx(1.0, abs=1e-12)

    def test_identical_points_share_weight(self):
        tables = make_tables()
        attn = make_attention(tables)
        point = tables.point_feature(1000, 2, 3)
        win = HistoryWindow(position=3, k=2, points=np.stack([point, point]))
        gamma = attention_weights(win, attn)
        assert np.allclose(gamma, [0.5, 0.5], atol=1e-12)

    def test_matches_independent_softmax(self):
        tables = make_tables()
        attn = make_attention(tables)
        seq = make_seq(4)
        win = build_window(seq, [1, 2, 3], i=4, k=3, tables=tables)
        out = encode_history(win, attn)
        gamma = attention_weights(win, attn)

        w_q = attn.w_q.detach().numpy()
        w_k = attn.w_k.detach().numpy()
        w_v = attn.w_v.detach().numpy()
        q = w_q @ win.points[-1]
        scores = np.array([q @ (w_k @ h) for h in win.points]) / math.sqrt(attn.attn_dim)
        e = np.exp(scores - scores.max())
        expected_gamma = e / e.sum()
        expected_out = sum(g * (w_v @ h) for g, h in zip(expected_gamma, win.points))
        assert np.allclose(gamma, expected_gamma, atol=1e-9)
        assert np.allclose(out[:-1], expected_out, atol=1e-9)

    def test_weights_sum_to_one_on_random_windows(self):
        tables = make_tables()
        attn = make_attention(tables)
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            seq = make_seq(n, seed=int(rng.integers(10000)))
            i = int(rng.integers(2, n + 1))
            apps = [int(a) for a in rng.integers(0, 6, i - 1)]
            win = build_window(seq, apps, i, k=4, tables=tables)
            gamma = attention_weights(win, attn)
            assert np.all(gamma >= 0)
            assert gamma.sum() == pytest.approx(1.0, abs=1e-9)

    def test_empty_window_zero_plus_flag(self):
        tables = make_tables()
        attn = make_attention(tables)
        win = build_window(make_seq(3), [], i=1, k=4, tables=tables)
        out = encode_history(win, attn)
        assert np.all(out[:-1] == 0.0)
        assert out[-1] == pytest.approx(float(attn.no_history_flag.item()))

    def test_causality_future_perturbation_invisible(self):
        tables = make_tables()
        attn = make_attention(tables)
        seq = make_seq(6)
        apps = [0, 1, 2, 3, 4, 5]
        i = 4
        base = encode_history(build_window(seq, apps[: i - 1], i, 3, tables), attn)
        # rewrite every event at positions >= i
        mutated = list(seq.events)
        for j in range(i - 1, len(mutated)):
            ev = mutated[j]
            mutated[j] = UsageRecord(ev.user_id, ev.timestamp + 7, (ev.location_id + 1) % 5, (ev.app_id + 3) % 6)
        alt_seq = UserSequence(seq.user_id, tuple(mutated))
        alt = encode_history(build_window(alt_seq, apps[: i - 1], i, 3, tables), attn)
        assert np.array_equal(base, alt)

    def test_dim_mismatch_rejected(self):
        tables = make_tables()
        attn = HistoryAttention(tables.point_dim + 1, 8, dtype=torch.float64)
        win = build_window(make_seq(3), [1], i=2, k=2, tables=tables)
        with pytest.raises(ValidationError):
            encode_history(win, attn)


class TestBatchedForward:
    def test_batch_matches_single_windows(self):
        tables = make_tables()
        attn = make_attention(tables)
        seq = make_seq(7)
        apps = [2, 0, 5, 1, 3, 4, 0]
        windows = [
            build_window(seq, apps[: i - 1], i, 3, tables) for i in range(1, 8)
        ]
        k = 3
        b = len(windows)
        points = torch.zeros((b, k, tables.point_dim), dtype=torch.float64)
        mask = torch.zeros((b, k), dtype=torch.bool)
        for row, win in enumerate(windows):
            m = len(win)
            if m:
                points[row, :m] = torch.as_tensor(win.points)
                mask[row, :m] = True
        with torch.no_grad():
            out, _ = attn(points, mask)
        for row, win in enumerate(windows):
            single = encode_history(win, attn)
            assert np.allclose(out[row].numpy(), single, atol=1e-12)

    def test_gradients_flow_through_all_params(self):
        tables = make_tables()
        attn = make_attention(tables, dtype=torch.float64)
        points = torch.randn(4, 3, tables.point_dim, dtype=torch.float64)
        mask = torch.tensor(
            [[True, True, True], [True, False, False], [False, False, False], [True, True, False]]
        )
        out, _ = attn(points, mask)
        out.sum().backward()
        assert attn.w_q.grad is not None and torch.isfinite(attn.w_q.grad).all()
        assert attn.w_v.grad is not None
        assert attn.no_history_flag.grad is not None
