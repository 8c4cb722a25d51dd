"""Historical behavioral conditioning via masked windows and self-attention.

For target position i (1-based), the usable past is the sliding window of
the k most recent earlier positions.  Each past point is the concatenation
[temporal ‖ location ‖ app] of its embeddings; a single-head scaled
dot-product attention, queried by the most recent point, pools the window
into the condition vector.  A trailing flag dimension marks the no-history
cold start, so the condition has dim d_attn + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import UserSequence, half_hour_bin
from .encoders import EmbeddingTable, temporal_table
from .errors import ValidationError
from .validation import check_positive_int


def unit_rows(table: EmbeddingTable) -> EmbeddingTable:
    """Copy of a table with every row scaled to L2 norm 1.

    Rows already at norm 1 are kept bit-for-bit, so renormalizing is a
    no-op and checkpoints round-trip exactly.
    """
    vectors = {}
    for key, vec in table.vectors.items():
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValidationError(f"{table.domain} vector {key} has zero norm")
        vectors[key] = vec if abs(norm - 1.0) < 1e-12 else vec / norm
    return EmbeddingTable(table.domain, vectors)


@dataclass(frozen=True)
class ConditionTables:
    """The frozen embedding tables every condition vector is assembled from."""

    app: EmbeddingTable
    location: EmbeddingTable
    utc_offset: int = 0
    temporal_scale: float = 1.0

    def __post_init__(self):
        if self.app.domain != "app":
            raise ValidationError(f"app table has domain {self.app.domain!r}")
        if self.location.domain != "location":
            raise ValidationError(
                f"location table has domain {self.location.domain!r}"
            )

    @classmethod
    def balanced(cls, app, location, utc_offset=0):
        """Tables with every feature family rescaled to unit length.

        The raw temporal code has norm sqrt(dim / 2) while trained
        embedding rows can come out far smaller, so an unscaled
        concatenation lets one family drown out the others.  Unit rows
        keep all cosines, and renormalizing is idempotent.
        """
        scale = 1.0 / float(np.linalg.norm(temporal_table()[0]))
        return cls(unit_rows(app), unit_rows(location), utc_offset, scale)

    @property
    def temporal_dim(self):
        return temporal_table().shape[1]

    @property
    def point_dim(self):
        """Dim of one history point [t ‖ l ‖ a]."""
        return self.temporal_dim + self.location.dim + self.app.dim

    @property
    def context_dim(self):
        """Dim of the current spatio-temporal context [t ‖ l]."""
        return self.temporal_dim + self.location.dim

    def temporal(self, timestamp) -> np.ndarray:
        row = temporal_table()[half_hour_bin(timestamp, self.utc_offset)]
        return row if self.temporal_scale == 1.0 else row * self.temporal_scale

    def point_feature(self, timestamp, location_id, app_id) -> np.ndarray:
        return np.concatenate(
            [self.temporal(timestamp), self.location[location_id], self.app[app_id]]
        )

    def context_feature(self, timestamp, location_id) -> np.ndarray:
        return np.concatenate([self.temporal(timestamp), self.location[location_id]])


@dataclass(frozen=True)
class HistoryWindow:
    """The visible past of one target position: at most k points, all < i."""

    position: int
    k: int
    points: np.ndarray  # [min(k, position-1), point_dim]

    def __post_init__(self):
        check_positive_int("position", self.position)
        check_positive_int("k", self.k)
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2:
            raise ValidationError("window points must be a 2-D array")
        expect = min(self.k, self.position - 1)
        if points.shape[0] != expect:
            raise ValidationError(
                f"window at position {self.position} with k={self.k} must hold "
                f"{expect} points, got {points.shape[0]}"
            )
        object.__setattr__(self, "points", points)

    def __len__(self):
        return self.points.shape[0]


def build_window(
    seq: UserSequence, generated_apps, i, k, tables: ConditionTables
) -> HistoryWindow:
    """Window of positions max(1, i-k) .. i-1 using already generated apps.

    Ground-truth apps of the sequence are never read; only its trajectory
    (timestamps and locations) and the generated prefix feed the features.
    """
    n = len(seq)
    if not 1 <= i <= n:
        raise ValidationError(f"position {i} outside 1..{n}")
    generated_apps = list(generated_apps)
    if len(generated_apps) < i - 1:
        raise ValidationError(
            f"need {i - 1} generated apps for position {i}, got {len(generated_apps)}"
        )
    lo = max(1, i - k)
    rows = []
    for j in range(lo, i):
        ev = seq.events[j - 1]
        rows.append(tables.point_feature(ev.timestamp, ev.location_id, generated_apps[j - 1]))
    points = np.stack(rows) if rows else np.zeros((0, tables.point_dim))
    return HistoryWindow(i, k, points)


class HistoryAttention(torch.nn.Module):
    """Single-head scaled dot-product attention over a history window.

    Query is the projection of the most recent point; output is the
    attention-pooled value projection with the no-history flag appended.
    """

    def __init__(self, point_dim, attn_dim=64, seed_rng=None, dtype=torch.float32):
        super().__init__()
        check_positive_int("point_dim", point_dim)
        check_positive_int("attn_dim", attn_dim)
        self.point_dim = point_dim
        self.attn_dim = attn_dim

        def init(shape):
            if seed_rng is None:
                data = np.zeros(shape)
            else:
                data = seed_rng.uniform(-0.05, 0.05, shape)
            return torch.nn.Parameter(torch.as_tensor(data, dtype=dtype))

        self.w_q = init((attn_dim, point_dim))
        self.w_k = init((attn_dim, point_dim))
        self.w_v = init((attn_dim, point_dim))
        self.no_history_flag = init(())

    @property
    def out_dim(self):
        return self.attn_dim + 1

    def forward(self, points, mask):
        """Encode a batch of padded windows.

        points: [B, k, point_dim]; mask: [B, k] bool, valid entries
        left-aligned so the last valid row is the most recent point.
        Rows with no valid entries give the zero vector plus the flag.
        """
        if points.shape[-1] != self.point_dim:
            raise ValidationError(
                f"window point dim {points.shape[-1]} != expected {self.point_dim}"
            )
        b, k, _ = points.shape
        counts = mask.sum(dim=1)
        empty = counts == 0
        last = torch.clamp(counts - 1, min=0)
        q = torch.einsum("ad,bd->ba", self.w_q, points[torch.arange(b), last])
        keys = torch.einsum("ad,bkd->bka", self.w_k, points)
        values = torch.einsum("ad,bkd->bka", self.w_v, points)
        scores = torch.einsum("ba,bka->bk", q, keys) / np.sqrt(self.attn_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        # empty rows would softmax all -inf; give them a dummy uniform row
        scores = torch.where(
            empty[:, None], torch.zeros_like(scores), scores
        )
        gamma = torch.softmax(scores, dim=1)
        pooled = torch.einsum("bk,bka->ba", gamma, values)
        pooled = torch.where(empty[:, None], torch.zeros_like(pooled), pooled)
        flag = torch.where(
            empty, self.no_history_flag.to(points.dtype), torch.zeros(b, dtype=points.dtype)
        )
        return torch.cat([pooled, flag[:, None]], dim=1), gamma

    def encode_numpy(self, window: HistoryWindow):
        """Single-window convenience wrapper returning numpy arrays."""
        if window.points.shape[1] != self.point_dim:
            raise ValidationError(
                f"window point dim {window.points.shape[1]} != expected {self.point_dim}"
            )
        dtype = self.w_q.dtype
        m = len(window)
        k = max(window.k, 1)
        points = torch.zeros((1, k, self.point_dim), dtype=dtype)
        mask = torch.zeros((1, k), dtype=torch.bool)
        if m:
            points[0, :m] = torch.as_tensor(window.points, dtype=dtype)
            mask[0, :m] = True
        with torch.no_grad():
            out, gamma = self.forward(points, mask)
        return out[0].numpy(), gamma[0, :m].numpy()


def encode_history(window: HistoryWindow, attention: HistoryAttention) -> np.ndarray:
    """The condition vector h̃ for one window (zero + flag when empty)."""
    out, _ = attention.encode_numpy(window)
    return out


def attention_weights(window: HistoryWindow, attention: HistoryAttention) -> np.ndarray:
    """The softmax weights γ over the window's points (empty → length 0)."""
    _, gamma = attention.encode_numpy(window)
    return gamma
