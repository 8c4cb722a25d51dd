"""Distribution-similarity and ranking metrics for corpus comparison.

Popularity here means the proportion of average daily occurrences per user:
each user's counts are normalized to a proportion vector, and the corpus
distribution is the mean over users.  RMSE/MAE/JSD/M-TV are reported on
popularity vectors scaled to percent so magnitudes are comparable across
corpus sizes.

CRPS convention (the one non-obvious aggregation): for each id, the sample
set is that id's per-user popularity in the generated corpus and the
observation is the id's aggregate popularity in the real corpus, both in
percent; the reported value is the mean over ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataFormatError, ValidationError

POPULARITY_SCALE = 100.0  # percent


def _as_vector(name, v):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} has non-finite entries")
    return v


def _as_pair(p, q):
    p = _as_vector("P", p)
    q = _as_vector("Q", q)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    return p, q


def _as_distribution(name, v):
    v = _as_vector(name, v)
    if np.any(v < 0):
        raise ValidationError(f"{name} has negative entries")
    if abs(v.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} must sum to 1, got {v.sum()!r}")
    return v


# --------------------------------------------------------------------------
# Popularity distributions


@dataclass(frozen=True)
class PopularityDistribution:
    """Per-id usage proportions over a fixed id universe."""

    domain: str
    probs: np.ndarray

    def __post_init__(self):
        if self.domain not in ("app", "category"):
            raise ValidationError(f"unknown popularity domain {self.domain!r}")
        object.__setattr__(self, "probs", _as_distribution("probs", self.probs))


def _event_ids(seq, domain):
    if domain == "app":
        return [ev.app_id for ev in seq.events]
    ids = []
    for ev in seq.events:
        if ev.category_id is None:
            raise ValidationError(
                f"event of user {seq.user_id!r} has no category id"
            )
        ids.append(ev.category_id)
    return ids


def per_user_popularity(sequences, num_ids, domain="app"):
    """Per-user proportion vectors; rows ordered by sorted user id.

    Returns ``(user_ids, matrix)`` with one row per user summing to 1.
    """
    counts: dict[str, np.ndarray] = {}
    for seq in sequences:
        row = counts.setdefault(seq.user_id, np.zeros(num_ids))
        for i in _event_ids(seq, domain):
            if not 0 <= i < num_ids:
                raise ValidationError(f"{domain} id {i} outside universe [0, {num_ids})")
            row[i] += 1
    if not counts:
        raise ValidationError("no sequences to build a popularity distribution from")
    users = sorted(counts)
    mat = np.stack([counts[u] / counts[u].sum() for u in users])
    return users, mat


def popularity(sequences, num_ids, domain="app") -> PopularityDistribution:
    """Corpus popularity: mean of per-user proportion vectors."""
    _, mat = per_user_popularity(sequences, num_ids, domain)
    return PopularityDistribution(domain, mat.mean(axis=0))


# --------------------------------------------------------------------------
# Pairwise metrics


def rmse(p, q) -> float:
    p, q = _as_pair(p, q)
    return float(np.sqrt(np.mean((p - q) ** 2)))


def mae(p, q) -> float:
    p, q = _as_pair(p, q)
    return float(np.mean(np.abs(p - q)))


def _kl(p, m):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence, natural log, so the range is [0, ln 2]."""
    p, q = _as_pair(p, q)
    p = _as_distribution("P", p)
    q = _as_distribution("Q", q)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def m_tv(p, q) -> float:
    """Total variation distance, half the L1 gap between two distributions."""
    p, q = _as_pair(p, q)
    p = _as_distribution("P", p)
    q = _as_distribution("Q", q)
    return float(0.5 * np.sum(np.abs(p - q)))


def crps(samples, x) -> float:
    """Continuous ranked probability score of an empirical CDF vs one value.

    Integrates (F(z) - step_x(z))^2 exactly over the piecewise-constant
    segments of the empirical distribution function.
    """
    y = np.sort(_as_vector("samples", samples))
    x = float(x)
    if not np.isfinite(x):
        raise ValidationError("observation must be finite")
    n = y.shape[0]
    pts = np.unique(np.concatenate([y, [x]]))
    lo = pts[:-1]
    width = np.diff(pts)
    f = np.searchsorted(y, lo, side="right") / n
    h = (lo >= x).astype(float)
    return float(np.sum(width * (f - h) ** 2))


def crps_popularity(gen_user_matrix, real_probs, scale=POPULARITY_SCALE) -> float:
    """Mean per-id CRPS of generated per-user popularity vs real aggregate."""
    gen = np.asarray(gen_user_matrix, dtype=float)
    real = _as_vector("real_probs", real_probs)
    if gen.ndim != 2 or gen.shape[1] != real.shape[0]:
        raise ValidationError(
            f"user matrix shape {gen.shape} does not match {real.shape[0]} ids"
        )
    vals = [crps(gen[:, i] * scale, real[i] * scale) for i in range(real.shape[0])]
    return float(np.mean(vals))


def spearmanr(x, y) -> float:
    """Rank correlation with average ranks on ties."""
    x, y = _as_pair(x, y)
    rx = rankdata(x)
    ry = rankdata(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0 or sy == 0:
        raise ValidationError("rank correlation undefined for a constant input")
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


# --------------------------------------------------------------------------
# Ranking metrics

DEFAULT_KS = (1, 5, 10)
RANKING_NAMES = ("acc", "mrr", "ndcg", "recall", "f1")


def ranking_metrics(predictions, truths, k_values=DEFAULT_KS) -> dict[str, float]:
    """Top-k quality of ranked app predictions against single true labels.

    With one relevant item per event, hit rate plays the role of accuracy and
    recall, and F1 is their harmonic mean (also the hit rate); MRR and NDCG
    discount by the hit's rank.  Keys are ``metric@k``.
    """
    predictions = list(predictions)
    truths = list(truths)
    if not predictions:
        raise ValidationError("no predictions to score")
    if len(predictions) != len(truths):
        raise ValidationError(
            f"{len(predictions)} predictions vs {len(truths)} truths"
        )
    for ks in k_values:
        if ks < 1:
            raise ValidationError(f"k must be >= 1, got {ks}")
    ranks = []
    for ranked, truth in zip(predictions, truths):
        ranked = list(ranked)
        if not ranked:
            raise ValidationError("empty ranking emitted for an event")
        try:
            ranks.append(ranked.index(truth) + 1)
        except ValueError:
            ranks.append(None)
    out = {}
    n = len(ranks)
    for k in k_values:
        hit = mrr = ndcg = 0.0
        for r in ranks:
            if r is not None and r <= k:
                hit += 1.0
                mrr += 1.0 / r
                ndcg += 1.0 / np.log2(r + 1)
        out[f"acc@{k}"] = hit / n
        out[f"mrr@{k}"] = mrr / n
        out[f"ndcg@{k}"] = ndcg / n
        out[f"recall@{k}"] = hit / n
        out[f"f1@{k}"] = hit / n
    return out


# --------------------------------------------------------------------------
# Evaluation reports


@dataclass(frozen=True)
class EvalReport:
    """Metric rows plus provenance header, serialized as one table file."""

    header: dict[str, str] = field(default_factory=dict)
    rows: tuple[tuple[str, str, float], ...] = ()

    def value(self, metric, domain):
        for m, d, v in self.rows:
            if m == metric and d == domain:
                return v
        raise ValidationError(f"report has no row for ({metric}, {domain})")


def write_report(report: EvalReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(report.header):
            fh.write(f"#{key}:{report.header[key]}\n")
        fh.write("#fields:metric\tdomain\tvalue\n")
        for metric, domain, value in report.rows:
            fh.write(f"{metric}\t{domain}\t{value!r}\n")


def read_report(path) -> EvalReport:
    header = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line == "#fields:metric\tdomain\tvalue":
                    continue
                if ":" in line:
                    key, value = line[1:].split(":", 1)
                    header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                rows.append((parts[0], parts[1], float(parts[2])))
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
    return EvalReport(header, tuple(rows))
