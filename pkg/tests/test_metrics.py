import math

import numpy as np
import pytest

from appgen.corpus import UsageRecord, UserSequence
from appgen.errors import DataFormatError, ValidationError
from appgen.metrics import (
    EvalReport,
    crps,
    crps_popularity,
    jsd,
    m_tv,
    mae,
    per_user_popularity,
    popularity,
    ranking_metrics,
    read_report,
    rmse,
    spearmanr,
    write_report,
)

# --------------------------------------------------------------------------
# Independent oracles.  Each recomputes its metric from the definition by a
# different route than the implementation (pure loops, O(n^2) formulas,
# quadrature), so agreement is evidence rather than tautology.


def oracle_rmse(p, q):
    total = sum((a - b) ** 2 for a, b in zip(p, q))
    return math.sqrt(total / len(p))


def oracle_mae(p, q):
    return sum(abs(a - b) for a, b in zip(p, q)) / len(p)


def oracle_jsd(p, q):
    def kl(a, m):
        total = 0.0
        for ai, mi in zip(a, m):
            if ai > 0:
                total += ai * math.log(ai / mi)
        return total

    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def oracle_m_tv(p, q):
    return 0.5 * sum(abs(a - b) for a, b in zip(p, q))


def oracle_crps_energy(samples, x):
    # identity: crps = E|Y - x| - E|Y - Y'| / 2 for the empirical distribution
    n = len(samples)
    t1 = sum(abs(y - x) for y in samples) / n
    t2 = sum(abs(a - b) for a in samples for b in samples) / (n * n)
    return t1 - 0.5 * t2


def oracle_crps_grid(samples, x, points=200000):
    ys = sorted(samples)
    lo = min(ys[0], x) - 1.0
    hi = max(ys[-1], x) + 1.0
    z = np.linspace(lo, hi, points)
    f = np.searchsorted(ys, z, side="right") / len(ys)
    h = (z >= x).astype(float)
    return float(np.trapezoid((f - h) ** 2, z))


def oracle_ranks(v):
    # rank = 1 + (# smaller) + (# equal others) / 2
    return [
        1.0
        + sum(1 for u in v if u < vi)
        + sum(1 for j, u in enumerate(v) if u == vi and j != i) / 2.0
        for i, vi in enumerate(v)
    ]


def oracle_spearman(x, y):
    rx = oracle_ranks(list(x))
    ry = oracle_ranks(list(y))
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry)) / n
    sx = math.sqrt(sum((a - mx) ** 2 for a in rx) / n)
    sy = math.sqrt(sum((b - my) ** 2 for b in ry) / n)
    return cov / (sx * sy)


def random_distribution(rng, n):
    v = rng.random(n) + 1e-12
    zeros = rng.random(n) < 0.3
    if zeros.all():
        zeros[rng.integers(n)] = False
    v[zeros] = 0.0
    return v / v.sum()


# --------------------------------------------------------------------------


class TestRmseMae:
    def test_identical_is_zero(self):
        v = [0.2, 0.3, 0.5]
        assert rmse(v, v) == 0.0
        assert mae(v, v) == 0.0

    def test_hand_values(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-9)
        assert mae([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        p, q = rng.random(9), rng.random(9)
        assert rmse(p, q) == pytest.approx(rmse(q, p), abs=1e-12)
        assert mae(p, q) == pytest.approx(mae(q, p), abs=1e-12)

    def test_mae_never_exceeds_rmse(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p, q = rng.normal(size=7), rng.normal(size=7)
            assert mae(p, q) <= rmse(p, q) + 1e-12

    def test_against_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = rng.integers(2, 30)
            p, q = rng.normal(size=n), rng.normal(size=n)
            assert rmse(p, q) == pytest.approx(oracle_rmse(p, q), abs=1e-6)
            assert mae(p, q) == pytest.approx(oracle_mae(p, q), abs=1e-6)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            rmse([1.0], [1.0, 2.0])


class TestJsd:
    def test_identical_is_zero(self):
        assert jsd([0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_is_ln2(self):
        assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        expected = (
            0.5 * math.log(4 / 3)
            + 0.25 * math.log(2 / 3)
            + 0.25 * math.log(2.0)
        )
        assert jsd([1.0, 0.0], [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = rng.integers(2, 20)
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            v = jsd(p, q)
            assert 0.0 <= v <= math.log(2) + 1e-12
            assert v == pytest.approx(jsd(q, p), abs=1e-12)

    def test_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = rng.integers(2, 20)
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            assert jsd(p, q) == pytest.approx(oracle_jsd(p, q), abs=1e-6)

    def test_rejects_non_distribution(self):
        with pytest.raises(ValidationError):
            jsd([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(ValidationError):
            jsd([-0.5, 1.5], [0.5, 0.5])


class TestMtv:
    def test_hand_values(self):
        assert m_tv([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert m_tv([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
        assert m_tv([0.6, 0.4], [0.5, 0.5]) == pytest.approx(0.1, abs=1e-12)

    def test_bounds_symmetry_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = rng.integers(2, 20)
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            v = m_tv(p, q)
            assert 0.0 <= v <= 1.0 + 1e-12
            assert v == pytest.approx(m_tv(q, p), abs=1e-12)
            assert v == pytest.approx(oracle_m_tv(p, q), abs=1e-6)


class TestCrps:
    def test_point_mass_is_absolute_error(self):
        assert crps([2.0], 5.0) == pytest.approx(3.0, abs=1e-12)
        assert crps([5.0], 2.0) == pytest.approx(3.0, abs=1e-12)
        assert crps([4.0], 4.0) == 0.0

    def test_three_sample_matches_grid_quadrature(self):
        samples = [0.1, 0.7, 1.3]
        x = 0.5
        assert crps(samples, x) == pytest.approx(
            oracle_crps_grid(samples, x), abs=1e-4
        )

    def test_against_energy_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(1, 25))
            samples = rng.normal(size=n) * rng.uniform(0.1, 3.0)
            x = float(rng.normal())
            assert crps(samples, x) == pytest.approx(
                oracle_crps_energy(samples, x), abs=1e-6
            )

    def test_duplicate_samples_handled(self):
        samples = [1.0, 1.0, 2.0]
        assert crps(samples, 1.5) == pytest.approx(
            oracle_crps_energy(samples, 1.5), abs=1e-12
        )

    def test_observation_must_be_finite(self):
        with pytest.raises(ValidationError):
            crps([1.0], math.inf)


class TestSpearman:
    def test_monotone_is_one(self):
        assert spearmanr([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
        assert spearmanr([1, 2, 3], [5, 50, 500]) == pytest.approx(1.0)

    def test_reversed_is_minus_one(self):
        assert spearmanr([1, 2, 3, 4], [9, 7, 5, 3]) == pytest.approx(-1.0)

    def test_hand_value(self):
        assert spearmanr([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_ties_get_average_ranks(self):
        # both average ranks computed by the independent counting formula
        x = [1.0, 1.0, 2.0, 3.0]
        y = [4.0, 5.0, 5.0, 6.0]
        assert spearmanr(x, y) == pytest.approx(oracle_spearman(x, y), abs=1e-12)

    def test_range_and_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(3, 25))
            x = rng.integers(0, 6, size=n).astype(float)
            y = rng.normal(size=n)
            if np.all(x == x[0]):
                continue
            v = spearmanr(x, y)
            assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12
            assert v == pytest.approx(oracle_spearman(x, y), abs=1e-6)

    def test_constant_input_rejected(self):
        with pytest.raises(ValidationError):
            spearmanr([2, 2, 2], [1, 2, 3])


class TestPermutationInvariance:
    def test_consistent_relabeling_changes_nothing(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n = int(rng.integers(3, 15))
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            perm = rng.permutation(n)
            assert rmse(p, q) == pytest.approx(rmse(p[perm], q[perm]), abs=1e-12)
            assert mae(p, q) == pytest.approx(mae(p[perm], q[perm]), abs=1e-12)
            assert jsd(p, q) == pytest.approx(jsd(p[perm], q[perm]), abs=1e-12)
            assert m_tv(p, q) == pytest.approx(m_tv(p[perm], q[perm]), abs=1e-12)
            assert spearmanr(p, q) == pytest.approx(
                spearmanr(p[perm], q[perm]), abs=1e-9
            )


class TestPopularity:
    @staticmethod
    def seq(user, apps, day=0, cat=None):
        events = tuple(
            UsageRecord(user, day * 86400 + 60 * i, 0, a, cat if cat is None else cat[i])
            for i, a in enumerate(apps)
        )
        return UserSequence(user, events)

    def test_single_app_point_mass(self):
        pop = popularity([self.seq("u", [3, 3, 3])], num_ids=5)
        assert pop.probs[3] == pytest.approx(1.0)
        assert pop.probs.sum() == pytest.approx(1.0)

    def test_two_apps_equal_use(self):
        pop = popularity([self.seq("u", [0, 1, 0, 1])], num_ids=2)
        assert np.allclose(pop.probs, [0.5, 0.5])

    def test_three_user_hand_tally(self):
        # u1: 0 x3, 1 x1 -> (0.75, 0.25); u2: 1 x2 -> (0, 1); u3: 0 x1, 1 x1
        seqs = [
            self.seq("u1", [0, 0, 0, 1]),
            self.seq("u2", [1, 1]),
            self.seq("u3", [0, 1]),
        ]
        pop = popularity(seqs, num_ids=2)
        assert pop.probs[0] == pytest.approx((0.75 + 0.0 + 0.5) / 3, abs=1e-12)
        assert pop.probs[1] == pytest.approx((0.25 + 1.0 + 0.5) / 3, abs=1e-12)

    def test_multi_day_user_counts_pool(self):
        # proportions use the user's whole history, so days pool together
        seqs = [self.seq("u", [0], day=0), self.seq("u", [1], day=1)]
        pop = popularity(seqs, num_ids=2)
        assert np.allclose(pop.probs, [0.5, 0.5])

    def test_missing_ids_get_zero(self):
        pop = popularity([self.seq("u", [1])], num_ids=4)
        assert pop.probs[0] == 0.0 and pop.probs[2] == 0.0 and pop.probs[3] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            popularity([], num_ids=3)

    def test_category_domain(self):
        seqs = [self.seq("u", [0, 1], cat=[2, 2])]
        pop = popularity(seqs, num_ids=3, domain="category")
        assert pop.probs[2] == pytest.approx(1.0)

    def test_per_user_rows_sum_to_one(self):
        seqs = [self.seq("a", [0, 1, 1]), self.seq("b", [2])]
        users, mat = per_user_popularity(seqs, num_ids=3)
        assert users == ["a", "b"]
        assert np.allclose(mat.sum(axis=1), 1.0)

    def test_crps_popularity_zero_when_identical_point_masses(self):
        # every user identical to the aggregate -> zero score
        mat = np.array([[0.25, 0.75], [0.25, 0.75]])
        assert crps_popularity(mat, [0.25, 0.75]) == pytest.approx(0.0, abs=1e-12)


class TestRankingMetrics:
    def test_truth_always_first(self):
        preds = [[3, 1, 2], [7, 0, 4]]
        out = ranking_metrics(preds, [3, 7], k_values=(1, 2, 3))
        assert all(v == pytest.approx(1.0) for v in out.values())

    def test_truth_never_in_top_k(self):
        out = ranking_metrics([[1, 2, 3]], [9], k_values=(1, 3))
        assert all(v == 0.0 for v in out.values())

    def test_truth_at_rank_three(self):
        out = ranking_metrics([[4, 5, 6, 7, 8]], [6], k_values=(5,))
        assert out["mrr@5"] == pytest.approx(1 / 3)
        assert out["ndcg@5"] == pytest.approx(1 / math.log2(4))
        assert out["acc@5"] == 1.0
        assert out["acc@5"] == out["recall@5"] == out["f1@5"]

    def test_acc_mrr_ndcg_agree_at_k1(self):
        rng = np.random.default_rng(9)
        preds = [list(rng.permutation(10)) for _ in range(50)]
        truths = [int(rng.integers(10)) for _ in range(50)]
        out = ranking_metrics(preds, truths)
        assert out["acc@1"] == out["mrr@1"] == out["ndcg@1"]

    def test_against_oracle(self):
        rng = np.random.default_rng(10)
        preds = [list(rng.permutation(12)) for _ in range(100)]
        truths = [int(rng.integers(12)) for _ in range(100)]
        out = ranking_metrics(preds, truths, k_values=(1, 5, 10))
        for k in (1, 5, 10):
            hits = [
                1.0 if t in p[:k] else 0.0 for p, t in zip(preds, truths)
            ]
            mrrs = [
                1.0 / (p.index(t) + 1) if t in p[:k] else 0.0
                for p, t in zip(preds, truths)
            ]
            assert out[f"acc@{k}"] == pytest.approx(np.mean(hits), abs=1e-12)
            assert out[f"mrr@{k}"] == pytest.approx(np.mean(mrrs), abs=1e-12)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(11)
        preds = [list(rng.permutation(12)) for _ in range(40)]
        truths = [int(rng.integers(12)) for _ in range(40)]
        out = ranking_metrics(preds, truths, k_values=(1, 5, 10))
        assert out["acc@1"] <= out["acc@5"] <= out["acc@10"]

    def test_validation(self):
        with pytest.raises(ValidationError):
            ranking_metrics([], [])
        with pytest.raises(ValidationError):
            ranking_metrics([[1]], [1, 2])
        with pytest.raises(ValidationError):
            ranking_metrics([[]], [1])


class TestEvalReport:
    def test_round_trip(self, tmp_path):
        report = EvalReport(
            header={"config_hash": "cafe", "seed": "7"},
            rows=(("jsd", "app", 0.125), ("rmse", "category", 1.5e-3)),
        )
        path = tmp_path / "report.tsv"
        write_report(report, path)
        back = read_report(path)
        assert back == report
        assert back.value("jsd", "app") == 0.125

    def test_byte_stable(self, tmp_path):
        report = EvalReport(header={"seed": "1"}, rows=(("mae", "app", 0.25),))
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_report(report, a)
        write_report(report, b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_row_raises(self):
        with pytest.raises(ValidationError):
            EvalReport().value("jsd", "app")

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("jsd\tapp\n")
        with pytest.raises(DataFormatError, match="line 1"):
            read_report(path)
