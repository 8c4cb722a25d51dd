"""Behavioral analyses over real and generated corpora.

Four views: hourly usage profiles per app category, frequent itemsets of
apps via Apriori over session transactions, agreement of per-station usage
clusterings, and a downstream next-app prediction protocol with two simple
reference predictors (frequency and first-order Markov).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from .corpus import NUM_TIME_BINS, SECONDS_PER_DAY, UserSequence, half_hour_bin
from .errors import ValidationError
from .metrics import ranking_metrics, spearmanr
from .validation import check_positive_int, check_probability, rng_from

HOURS_PER_DAY = 24
SESSION_GAP = 1800  # 30 minutes of inactivity ends a session


# --------------------------------------------------------------------------
# Hourly profiles


@dataclass(frozen=True)
class HourlyProfile:
    """Normalized hour-of-day usage intensity for one app category."""

    category_id: int
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (HOURS_PER_DAY,):
            raise ValidationError(f"profile needs {HOURS_PER_DAY} bins, got {counts.shape}")
        if np.any(counts < 0):
            raise ValidationError("profile has negative entries")
        if abs(counts.sum() - 1.0) > 1e-9:
            raise ValidationError(f"profile must sum to 1, got {counts.sum()!r}")
        object.__setattr__(self, "counts", counts)


def hourly_profiles(sequences, utc_offset=0) -> dict[int, HourlyProfile]:
    """Per-category hour-of-day distributions over all events."""
    raw: dict[int, np.ndarray] = {}
    total = 0
    for seq in sequences:
        for ev in seq.events:
            if ev.category_id is None:
                raise ValidationError(
                    f"event of user {seq.user_id!r} has no category id"
                )
            hour = ((ev.timestamp + utc_offset) % SECONDS_PER_DAY) // 3600
            raw.setdefault(ev.category_id, np.zeros(HOURS_PER_DAY))[hour] += 1
            total += 1
    if total == 0:
        raise ValidationError("no events to profile")
    return {
        cat: HourlyProfile(cat, counts / counts.sum()) for cat, counts in sorted(raw.items())
    }


def hourly_profile_correlation(real, gen) -> dict[int, float]:
    """Rank correlation of real vs generated profiles, per shared category.

    A profile with no rank variance (flat across all 24 hours) has no
    defined correlation and is reported as nan.
    """
    out = {}
    for cat in sorted(set(real) & set(gen)):
        try:
            out[cat] = spearmanr(real[cat].counts, gen[cat].counts)
        except ValidationError:
            out[cat] = float("nan")
    if not out:
        raise ValidationError("no categories shared between the two profile maps")
    return out


# --------------------------------------------------------------------------
# Sessions and frequent itemsets


def sessionize(seq: UserSequence, gap=SESSION_GAP) -> list[set[int]]:
    """Cut one sequence into transactions at inactivity gaps above ``gap``."""
    sessions = []
    current: set[int] = set()
    last_t = None
    for ev in seq.events:
        if last_t is not None and ev.timestamp - last_t > gap:
            sessions.append(current)
            current = set()
        current.add(ev.app_id)
        last_t = ev.timestamp
    if current:
        sessions.append(current)
    return sessions


def transactions_from(sequences, gap=SESSION_GAP) -> list[set[int]]:
    out = []
    for seq in sequences:
        out.extend(sessionize(seq, gap))
    return out


def frequent_itemsets(transactions, min_support) -> dict[frozenset, float]:
    """All itemsets at or above ``min_support``, by level-wise growth.

    Level k candidates join frequent (k-1)-sets sharing a prefix and are
    pruned unless every (k-1)-subset is frequent.
    """
    check_probability("min_support", min_support)
    if min_support == 0:
        raise ValidationError("min_support must be > 0")
    transactions = [frozenset(t) for t in transactions]
    if not transactions:
        raise ValidationError("no transactions to mine")
    n = len(transactions)

    def support(itemset):
        return sum(1 for t in transactions if itemset <= t) / n

    items = sorted({i for t in transactions for i in t})
    level = {}
    for i in items:
        s = support(frozenset([i]))
        if s >= min_support:
            level[frozenset([i])] = s
    found = dict(level)
    k = 2
    while level:
        prev = sorted(tuple(sorted(s)) for s in level)
        candidates = set()
        for a, b in itertools.combinations(prev, 2):
            if a[: k - 2] == b[: k - 2]:
                cand = frozenset(a) | frozenset(b)
                if len(cand) == k and all(
                    frozenset(sub) in level for sub in itertools.combinations(cand, k - 1)
                ):
                    candidates.add(cand)
        level = {}
        for cand in candidates:
            s = support(cand)
            if s >= min_support:
                level[cand] = s
        found.update(level)
        k += 1
    return found


@dataclass(frozen=True)
class ItemsetTable:
    """Association rows (antecedent, consequent, support), support-descending."""

    rows: tuple[tuple[tuple[int, ...], int, float], ...]

    def __post_init__(self):
        for antecedent, consequent, support in self.rows:
            if not 0 < support <= 1:
                raise ValidationError(f"support {support} outside (0, 1]")
            if consequent in antecedent:
                raise ValidationError("consequent may not repeat inside the antecedent")
        supports = [r[2] for r in self.rows]
        if any(b > a for a, b in zip(supports, supports[1:])):
            raise ValidationError("rows must be sorted by support descending")

    def top(self, m):
        return self.rows[:m]

    def keys(self):
        return [(antecedent, consequent) for antecedent, consequent, _ in self.rows]


def apriori(transactions, min_support) -> ItemsetTable:
    """Frequent itemsets expanded into single-consequent association rows.

    Singletons appear with an empty antecedent; a k-itemset yields k rows,
    one per choice of consequent, all carrying the itemset's support.
    """
    itemsets = frequent_itemsets(transactions, min_support)
    rows = []
    for itemset, support in itemsets.items():
        for consequent in sorted(itemset):
            antecedent = tuple(sorted(itemset - {consequent}))
            rows.append((antecedent, consequent, support))
    rows.sort(key=lambda r: (-r[2], len(r[0]), r[0], r[1]))
    return ItemsetTable(tuple(rows))


def itemset_agreement(real: ItemsetTable, gen: ItemsetTable, top_m):
    """Overlap fraction and rank correlation of the two top-m rule lists.

    Correlation compares the ranks of shared rules in each table; with fewer
    than two shared rules it is undefined and reported as nan.
    """
    check_positive_int("top_m", top_m)
    real_top = [(a, c) for a, c, _ in real.top(top_m)]
    gen_top = [(a, c) for a, c, _ in gen.top(top_m)]
    if not real_top or not gen_top:
        raise ValidationError("cannot compare empty itemset tables")
    shared = [k for k in real_top if k in gen_top]
    overlap = len(shared) / max(len(real_top), len(gen_top))
    if len(shared) < 2:
        return overlap, float("nan")
    real_rank = {k: i for i, k in enumerate(real_top)}
    gen_rank = {k: i for i, k in enumerate(gen_top)}
    try:
        rho = spearmanr(
            [real_rank[k] for k in shared], [gen_rank[k] for k in shared]
        )
    except ValidationError:
        rho = float("nan")
    return overlap, rho


# --------------------------------------------------------------------------
# Location clustering agreement


def station_usage_matrix(sequences, num_stations) -> np.ndarray:
    """Per-station time series of app-usage counts over the 48 half-hour bins."""
    mat = np.zeros((num_stations, NUM_TIME_BINS))
    for seq in sequences:
        for ev in seq.events:
            if not 0 <= ev.location_id < num_stations:
                raise ValidationError(
                    f"location id {ev.location_id} outside [0, {num_stations})"
                )
            mat[ev.location_id, half_hour_bin(ev.timestamp)] += 1
    return mat


def cluster_stations(matrix, k_clusters, seed, n_init=10) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if k_clusters > matrix.shape[0]:
        raise ValidationError(
            f"k_clusters ({k_clusters}) exceeds station count ({matrix.shape[0]})"
        )
    # KMeans only accepts 32-bit states; fold wider derived seeds
    km = KMeans(n_clusters=k_clusters, n_init=n_init, random_state=seed % 2**32)
    return km.fit_predict(matrix)


def location_cluster_agreement(
    real_sequences, gen_sequences, num_stations, k_clusters=5, seed=0, n_init=10
) -> float:
    """Adjusted Rand Index between real and generated station clusterings."""
    real = station_usage_matrix(real_sequences, num_stations)
    gen = station_usage_matrix(gen_sequences, num_stations)
    labels_real = cluster_stations(real, k_clusters, seed, n_init)
    labels_gen = cluster_stations(gen, k_clusters, seed, n_init)
    return float(adjusted_rand_score(labels_real, labels_gen))


# --------------------------------------------------------------------------
# Reference predictors for the downstream protocol


class FrequencyPredictor:
    """Ranks apps by global training frequency, ignoring context."""

    name = "frequency"

    def __init__(self, num_apps):
        check_positive_int("num_apps", num_apps)
        self.num_apps = num_apps
        self._ranking = None

    def fit(self, sequences):
        counts = np.zeros(self.num_apps)
        for seq in sequences:
            for a in seq.apps:
                counts[a] += 1
        # stable order: frequency descending, app id ascending on ties
        self._ranking = list(np.lexsort((np.arange(self.num_apps), -counts)))
        return self

    def rank(self, prev_app) -> list[int]:
        if self._ranking is None:
            raise ValidationError("predictor must be fit before ranking")
        return self._ranking


class MarkovPredictor:
    """First-order transition model with add-one smoothing."""

    name = "markov"

    def __init__(self, num_apps):
        check_positive_int("num_apps", num_apps)
        self.num_apps = num_apps
        self._rankings = None

    def fit(self, sequences):
        counts = np.ones((self.num_apps, self.num_apps))  # add-one smoothing
        for seq in sequences:
            for a, b in zip(seq.apps, seq.apps[1:]):
                counts[a, b] += 1
        order = np.lexsort(
            (np.tile(np.arange(self.num_apps), (self.num_apps, 1)), -counts)
        )
        self._rankings = [list(order[a]) for a in range(self.num_apps)]
        return self

    def rank(self, prev_app) -> list[int]:
        if self._rankings is None:
            raise ValidationError("predictor must be fit before ranking")
        if not 0 <= prev_app < self.num_apps:
            raise ValidationError(f"unknown previous app {prev_app}")
        return self._rankings[prev_app]


def next_app_events(sequences):
    """(previous app, true next app) pairs; only events with a predecessor."""
    pairs = []
    for seq in sequences:
        for a, b in zip(seq.apps, seq.apps[1:]):
            pairs.append((a, b))
    return pairs


def evaluate_predictor(predictor, train_sequences, test_sequences, k_values=(1, 5, 10)):
    """Fit on train, rank test events, return the ranking metric table."""
    predictor.fit(train_sequences)
    pairs = next_app_events(test_sequences)
    if not pairs:
        raise ValidationError("test split has no events with a predecessor")
    predictions = []
    truths = []
    for prev, truth in pairs:
        ranked = predictor.rank(prev)
        if sorted(ranked) != list(range(predictor.num_apps)):
            raise ValidationError(
                f"predictor {predictor.name} emitted an incomplete ranking"
            )
        predictions.append(ranked)
        truths.append(truth)
    return ranking_metrics(predictions, truths, k_values)


# --------------------------------------------------------------------------
# Downstream protocol


@dataclass(frozen=True)
class DownstreamResult:
    """Ranking metrics per (experiment, predictor) plus the wiring record."""

    half_a_users: tuple[str, ...]
    half_a_prime_users: tuple[str, ...]
    experiments: dict[str, dict[str, dict[str, float]]]
    train_events: dict[str, int]
    test_events: dict[str, int]


def split_half_users(sequences, seed=0):
    """Equal-size user halves (A, A'), deterministic per seed."""
    by_user: dict[str, list] = {}
    for seq in sequences:
        by_user.setdefault(seq.user_id, []).append(seq)
    users = sorted(by_user)
    if len(users) < 2:
        raise ValidationError("need at least 2 users to form halves")
    rng = rng_from(seed)
    order = [users[i] for i in rng.permutation(len(users))]
    half = len(users) // 2
    a_users = tuple(sorted(order[:half]))
    b_users = tuple(sorted(order[half:]))

    def gather(chosen):
        return tuple(
            seq
            for user in chosen
            for seq in sorted(by_user[user], key=lambda s: s.events[0].timestamp)
        )

    return (a_users, gather(a_users)), (b_users, gather(b_users))


def downstream_protocol(
    real_sequences,
    generator,
    num_apps,
    predictors=None,
    seed=0,
    k_values=(1, 5, 10),
) -> DownstreamResult:
    """Next-app prediction transfer test across real and generated data.

    Splits real users into halves A and A'; fits the generator on A; creates
    B from A's trajectories and B' from A''s.  Three experiments: train on A
    and test on A', train on B and test on B', train on A plus B and test on
    A'.  Each predictor must rank every app for every test event.
    """
    if predictors is None:
        predictors = (FrequencyPredictor(num_apps), MarkovPredictor(num_apps))
    (a_users, seq_a), (ap_users, seq_ap) = split_half_users(real_sequences, seed)
    generator.fit(seq_a)
    seq_b = tuple(generator.generate_like(seq_a))
    seq_bp = tuple(generator.generate_like(seq_ap))
    plan = {
        "exp1": (seq_a, seq_ap),
        "exp2": (seq_b, seq_bp),
        "exp3": (seq_a + seq_b, seq_ap),
    }
    experiments: dict[str, dict[str, dict[str, float]]] = {}
    train_events = {}
    test_events = {}
    for exp, (train, test) in plan.items():
        train_events[exp] = sum(len(s) for s in train)
        test_events[exp] = sum(len(s) for s in test)
        experiments[exp] = {
            p.name: evaluate_predictor(p, train, test, k_values) for p in predictors
        }
    return DownstreamResult(a_users, ap_users, experiments, train_events, test_events)
