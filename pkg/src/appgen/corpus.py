"""Spatio-temporal app-usage data model and synthetic world generation.

A corpus is a collection of per-user, per-day event sequences.  Each event is
one app usage at a timestamp and a base station.  Worlds are generated from a
:class:`WorldSpec` with planted, recoverable behavioral patterns (time
affinities, place affinities, sequential rules, co-usage cliques) so that
downstream models can be validated against known ground truth.

Sequence boundary convention: one user-day is one sequence.  Record files
store flat events; reading re-cuts them at user-day boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ValidationError
from .validation import (
    check_in_range,
    check_positive_int,
    check_probability,
    rng_from,
)

SECONDS_PER_DAY = 86400
BIN_SECONDS = 1800
NUM_TIME_BINS = SECONDS_PER_DAY // BIN_SECONDS  # 48 half-hour bins

RECORD_FIELDS = ("user_id", "timestamp", "location_id", "app_id", "category_id")


def half_hour_bin(timestamp, utc_offset=0):
    """Map a timestamp (seconds since epoch) to its half-hour bin in [0, 48).

    The day is cut into 48 half-hour bins of local seconds-of-day;
    ``utc_offset`` (seconds east of UTC) fixes the local timezone.
    """
    return int((int(timestamp) + int(utc_offset)) % SECONDS_PER_DAY) // BIN_SECONDS


@dataclass(frozen=True)
class UsageRecord:
    """One app-usage event: who, when, where, which app."""

    user_id: str
    timestamp: int
    location_id: int
    app_id: int
    category_id: int | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValidationError(f"timestamp must be >= 0, got {self.timestamp}")
        if self.app_id < 0:
            raise ValidationError(f"app_id must be >= 0, got {self.app_id}")
        if self.location_id < 0:
            raise ValidationError(f"location_id must be >= 0, got {self.location_id}")


@dataclass(frozen=True)
class UserSequence:
    """A user's time-ordered events for one day.

    ``apps`` and ``points`` are the two derived views: the app-id sequence and
    the spatio-temporal trajectory (timestamp, location) pairs.
    """

    user_id: str
    events: tuple[UsageRecord, ...]

    def __post_init__(self):
        if len(self.events) < 1:
            raise ValidationError("a sequence needs at least one event")
        for ev in self.events:
            if ev.user_id != self.user_id:
                raise ValidationError(
                    f"event user {ev.user_id!r} does not match sequence user {self.user_id!r}"
                )
        times = [ev.timestamp for ev in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError(f"events of user {self.user_id!r} are not time-ordered")

    def __len__(self):
        return len(self.events)

    @property
    def apps(self) -> tuple[int, ...]:
        return tuple(ev.app_id for ev in self.events)

    @property
    def points(self) -> tuple[tuple[int, int], ...]:
        """(timestamp, location_id) pairs, the mobility trajectory view."""
        return tuple((ev.timestamp, ev.location_id) for ev in self.events)

    @property
    def day(self) -> int:
        return self.events[0].timestamp // SECONDS_PER_DAY


# --------------------------------------------------------------------------
# Planted patterns


@dataclass(frozen=True)
class TimeAffinity:
    """One app is more likely inside the given half-hour bins (weight multiplier)."""

    app: int
    bins: tuple[int, ...]
    weight: float

    kind = "time-affinity"


@dataclass(frozen=True)
class PlaceAffinity:
    """One app is more likely at the given stations (weight multiplier)."""

    app: int
    stations: tuple[int, ...]
    weight: float

    kind = "place-affinity"


@dataclass(frozen=True)
class SequentialRule:
    """After using ``trigger``, the next event is ``follower`` with probability ``prob``."""

    trigger: int
    follower: int
    prob: float

    kind = "sequential"


@dataclass(frozen=True)
class CoUsageClique:
    """Once any clique member is used in a session, the others get ``boost`` weight."""

    apps: tuple[int, ...]
    boost: float

    kind = "co-usage"


Rule = TimeAffinity | PlaceAffinity | SequentialRule | CoUsageClique


def format_rule(rule: Rule) -> str:
    if isinstance(rule, TimeAffinity):
        return f"time-affinity(app={rule.app},bins={_format_ids(rule.bins)},weight={rule.weight:g})"
    if isinstance(rule, PlaceAffinity):
        return (
            f"place-affinity(app={rule.app},stations={_format_ids(rule.stations)},"
            f"weight={rule.weight:g})"
        )
    if isinstance(rule, SequentialRule):
        return f"sequential(trigger={rule.trigger},follower={rule.follower},prob={rule.prob:g})"
    if isinstance(rule, CoUsageClique):
        return f"co-usage(apps={_format_ids(rule.apps)},boost={rule.boost:g})"
    raise ValidationError(f"unknown rule type {type(rule).__name__}")


def _format_ids(ids):
    return "+".join(str(i) for i in ids)


def _parse_ids(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(p) for p in text.split("+") if p != "")


def parse_rule(text: str) -> Rule:
    """Parse one rule spec like ``time-affinity(app=3,bins=16..19,weight=10)``.

    Id lists accept ``a+b+c`` or inclusive ranges ``lo..hi``.
    """
    text = text.strip()
    if not text.endswith(")") or "(" not in text:
        raise ValidationError(f"malformed rule spec {text!r}")
    kind, body = text[:-1].split("(", 1)
    kind = kind.strip()
    params = {}
    for part in body.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValidationError(f"malformed rule parameter {part!r} in {text!r}")
        key, value = part.split("=", 1)
        params[key.strip()] = value.strip()
    try:
        if kind == "time-affinity":
            return TimeAffinity(int(params["app"]), _parse_ids(params["bins"]), float(params["weight"]))
        if kind == "place-affinity":
            return PlaceAffinity(
                int(params["app"]), _parse_ids(params["stations"]), float(params["weight"])
            )
        if kind == "sequential":
            return SequentialRule(
                int(params["trigger"]), int(params["follower"]), float(params["prob"])
            )
        if kind == "co-usage":
            return CoUsageClique(_parse_ids(params["apps"]), float(params["boost"]))
    except KeyError as exc:
        raise ValidationError(f"rule {text!r} is missing parameter {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ValidationError(f"rule {text!r}: {exc}") from None
    raise ValidationError(f"unknown rule kind {kind!r}")


def parse_rules(text: str) -> tuple[Rule, ...]:
    parts = [p for p in text.split(";") if p.strip()]
    return tuple(parse_rule(p) for p in parts)


# --------------------------------------------------------------------------
# World specification and geography


@dataclass(frozen=True)
class WorldSpec:
    """Full description of a synthetic world; the seed determines every record."""

    seed: int = 0
    num_users: int = 200
    num_apps: int = 50
    num_stations: int = 30
    num_regions: int = 6
    num_business_areas: int = 3
    num_pois: int = 60
    num_categories: int = 10
    horizon_days: int = 7
    mean_sessions_per_day: float = 4.0
    mean_events_per_session: float = 8.0
    planted_rules: tuple[Rule, ...] = ()

    def validate(self):
        for name in (
            "num_users",
            "num_apps",
            "num_stations",
            "num_regions",
            "num_business_areas",
            "num_pois",
            "num_categories",
            "horizon_days",
        ):
            check_positive_int(name, getattr(self, name))
        if self.num_categories > self.num_apps:
            raise ValidationError(
                f"num_categories ({self.num_categories}) cannot exceed num_apps ({self.num_apps})"
            )
        if self.num_regions > self.num_stations:
            raise ValidationError(
                f"num_regions ({self.num_regions}) cannot exceed num_stations ({self.num_stations})"
            )
        if self.num_business_areas > self.num_stations:
            raise ValidationError(
                f"num_business_areas ({self.num_business_areas}) cannot exceed num_stations "
                f"({self.num_stations})"
            )
        if self.mean_sessions_per_day < 1:
            raise ValidationError("mean_sessions_per_day must be >= 1")
        if self.mean_events_per_session < 1:
            raise ValidationError("mean_events_per_session must be >= 1")
        for rule in self.planted_rules:
            self._validate_rule(rule)
        return self

    def _validate_rule(self, rule):
        if isinstance(rule, TimeAffinity):
            check_in_range("time-affinity app", rule.app, 0, self.num_apps)
            for b in rule.bins:
                check_in_range("time-affinity bin", b, 0, NUM_TIME_BINS)
            if rule.weight < 0:
                raise ValidationError(f"time-affinity weight must be >= 0, got {rule.weight}")
        elif isinstance(rule, PlaceAffinity):
            check_in_range("place-affinity app", rule.app, 0, self.num_apps)
            for s in rule.stations:
                check_in_range("place-affinity station", s, 0, self.num_stations)
            if rule.weight < 0:
                raise ValidationError(f"place-affinity weight must be >= 0, got {rule.weight}")
        elif isinstance(rule, SequentialRule):
            check_in_range("sequential trigger", rule.trigger, 0, self.num_apps)
            check_in_range("sequential follower", rule.follower, 0, self.num_apps)
            check_probability("sequential prob", rule.prob)
        elif isinstance(rule, CoUsageClique):
            for a in rule.apps:
                check_in_range("co-usage app", a, 0, self.num_apps)
            if len(rule.apps) < 2:
                raise ValidationError("co-usage clique needs at least 2 apps")
            if rule.boost < 0:
                raise ValidationError(f"co-usage boost must be >= 0, got {rule.boost}")
        else:
            raise ValidationError(f"unknown rule type {type(rule).__name__}")


@dataclass(frozen=True)
class Geography:
    """Deterministic spatial layout: stations on a grid, nested areas, POIs.

    Stations sit on a square grid (row-major); regions and business areas are
    contiguous index blocks, so stations in one region are spatially close;
    each POI is served by exactly one station.
    """

    num_stations: int
    station_region: tuple[int, ...]
    station_area: tuple[int, ...]
    poi_station: tuple[int, ...]
    adjacency: tuple[tuple[int, ...], ...]

    @property
    def num_regions(self):
        return max(self.station_region) + 1

    @property
    def num_business_areas(self):
        return max(self.station_area) + 1


def build_geography(num_stations, num_regions, num_business_areas, num_pois) -> Geography:
    check_positive_int("num_stations", num_stations)
    side = math.ceil(math.sqrt(num_stations))
    region = tuple(s * num_regions // num_stations for s in range(num_stations))
    area = tuple(s * num_business_areas // num_stations for s in range(num_stations))
    poi_station = tuple(p % num_stations for p in range(num_pois))
    adjacency = []
    for s in range(num_stations):
        r, c = divmod(s, side)
        nbrs = []
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr and 0 <= cc < side:
                t = rr * side + cc
                if t < num_stations:
                    nbrs.append(t)
        adjacency.append(tuple(sorted(nbrs)))
    return Geography(num_stations, region, area, poi_station, tuple(adjacency))


@dataclass
class World:
    """A generated corpus plus the static facts shared by all its records."""

    spec: WorldSpec
    geography: Geography
    app_categories: tuple[int, ...]
    sequences: list[UserSequence] = field(default_factory=list)

    @property
    def num_apps(self):
        return self.spec.num_apps


def app_category_map(num_apps, num_categories) -> tuple[int, ...]:
    """The world's fixed surjection app -> category."""
    return tuple(a % num_categories for a in range(num_apps))


# Hour-of-day activity curve for session starts: quiet nights, a morning bump
# and a broad afternoon peak, so per-hour usage levels are distinct.
def _activity_weights() -> np.ndarray:
    hours = (np.arange(NUM_TIME_BINS) + 0.5) / 2.0
    w = (
        0.12
        + np.exp(-0.5 * ((hours - 14.0) / 4.0) ** 2)
        + 0.55 * np.exp(-0.5 * ((hours - 8.5) / 2.0) ** 2)
    )
    return w / w.sum()


_STAY_PROB = 0.6  # chance a session stays at the previous station
_MIN_SESSION_GAP = 600  # seconds enforced between session starts
_EVENT_GAP_MIN = 5.0
_EVENT_GAP_MEAN = 45.0
_EVENT_GAP_MAX = 840.0  # keeps every in-session gap well under the 30-min cut


def generate_world(spec: WorldSpec) -> World:
    """Emit the full synthetic corpus for ``spec``; bit-identical per seed."""
    spec.validate()
    rng = rng_from(spec.seed)
    geo = build_geography(
        spec.num_stations, spec.num_regions, spec.num_business_areas, spec.num_pois
    )
    categories = app_category_map(spec.num_apps, spec.num_categories)

    n_apps = spec.num_apps
    base = (np.arange(n_apps) + 2.0) ** -0.7  # mild popularity skew
    time_mult = np.ones((NUM_TIME_BINS, n_apps))
    place_mult = np.ones((spec.num_stations, n_apps))
    seq_rules: dict[int, tuple[int, float]] = {}
    cliques: list[CoUsageClique] = []
    for rule in spec.planted_rules:
        if isinstance(rule, TimeAffinity):
            for b in rule.bins:
                time_mult[b, rule.app] *= rule.weight
        elif isinstance(rule, PlaceAffinity):
            for s in rule.stations:
                place_mult[s, rule.app] *= rule.weight
        elif isinstance(rule, SequentialRule):
            if rule.trigger in seq_rules:
                raise ValidationError(
                    f"duplicate sequential rule for trigger app {rule.trigger}"
                )
            seq_rules[rule.trigger] = (rule.follower, rule.prob)
        elif isinstance(rule, CoUsageClique):
            cliques.append(rule)

    activity = _activity_weights()
    sequences = []
    for u in range(spec.num_users):
        user_id = f"u{u:04d}"
        station = int(rng.integers(spec.num_stations))
        for day in range(spec.horizon_days):
            day_start = day * SECONDS_PER_DAY
            day_end = day_start + SECONDS_PER_DAY
            n_sessions = 1 + int(rng.poisson(spec.mean_sessions_per_day - 1.0))
            bins = np.sort(rng.choice(NUM_TIME_BINS, size=n_sessions, p=activity))
            starts = day_start + bins * BIN_SECONDS + rng.integers(0, BIN_SECONDS, n_sessions)
            records: list[UsageRecord] = []
            prev_app = None
            t_prev = None
            for start in starts:
                t = int(start)
                if t_prev is not None:
                    t = max(t, t_prev + _MIN_SESSION_GAP)
                if t >= day_end:
                    break
                if t_prev is not None and rng.random() >= _STAY_PROB:
                    nbrs = geo.adjacency[station]
                    if nbrs:
                        station = int(nbrs[rng.integers(len(nbrs))])
                n_events = 1 + int(rng.poisson(spec.mean_events_per_session - 1.0))
                active_cliques: set[int] = set()
                for e in range(n_events):
                    if e > 0:
                        gap = _EVENT_GAP_MIN + min(
                            rng.exponential(_EVENT_GAP_MEAN), _EVENT_GAP_MAX
                        )
                        t = t + int(gap)
                        if t >= day_end:
                            break
                    tbin = half_hour_bin(t)
                    w = base * time_mult[tbin] * place_mult[station]
                    for ci in active_cliques:
                        for a in cliques[ci].apps:
                            w[a] *= cliques[ci].boost
                    p = w / w.sum()
                    app = int(rng.choice(n_apps, p=p))
                    if prev_app is not None and prev_app in seq_rules:
                        follower, prob = seq_rules[prev_app]
                        if rng.random() < prob:
                            app = follower
                    for ci, clique in enumerate(cliques):
                        if app in clique.apps:
                            active_cliques.add(ci)
                    records.append(
                        UsageRecord(user_id, t, station, app, categories[app])
                    )
                    prev_app = app
                    t_prev = t
            if records:
                sequences.append(UserSequence(user_id, tuple(records)))
    return World(spec, geo, categories, sequences)


# --------------------------------------------------------------------------
# Dataset IO


def _canonical_order(sequences):
    return sorted(sequences, key=lambda s: (s.user_id, s.events[0].timestamp))


def write_dataset(sequences, path, extra_header=None):
    """Write sequences as a tab-separated record file (one event per line).

    ``extra_header`` may carry provenance entries (e.g. a config hash); they
    are emitted as ``#key:value`` comment lines after the field header.
    """
    sequences = _canonical_order(sequences)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#fields:" + "\t".join(RECORD_FIELDS) + "\n")
        for key, value in (extra_header or {}).items():
            fh.write(f"#{key}:{value}\n")
        for seq in sequences:
            for ev in seq.events:
                cat = "" if ev.category_id is None else str(ev.category_id)
                fh.write(
                    f"{ev.user_id}\t{ev.timestamp}\t{ev.location_id}\t{ev.app_id}\t{cat}\n"
                )


def read_dataset(path):
    """Read a record file back into user-day sequences.

    Returns ``(sequences, header)`` where ``header`` holds any ``#key:value``
    comment entries.  Malformed lines raise :class:`DataFormatError` citing
    the line number.
    """
    records = []
    header = {}
    fields = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#fields:"):
                fields = tuple(line[len("#fields:") :].split("\t"))
                for f in fields:
                    if f not in RECORD_FIELDS:
                        raise DataFormatError(f"line {lineno}: unknown field {f!r}")
                if fields != RECORD_FIELDS[: len(fields)]:
                    raise DataFormatError(
                        f"line {lineno}: fields must follow the order {RECORD_FIELDS}"
                    )
                if len(fields) < 4:
                    raise DataFormatError(
                        f"line {lineno}: at least {RECORD_FIELDS[:4]} are required"
                    )
                continue
            if line.startswith("#"):
                if ":" in line:
                    key, value = line[1:].split(":", 1)
                    header[key] = value
                continue
            if fields is None:
                raise DataFormatError(f"line {lineno}: record before #fields: header")
            parts = line.split("\t")
            if len(parts) != len(fields):
                raise DataFormatError(
                    f"line {lineno}: expected {len(fields)} fields, got {len(parts)}"
                )
            try:
                user_id = parts[0]
                timestamp = int(parts[1])
                location_id = int(parts[2])
                app_id = int(parts[3])
                category_id = None
                if len(parts) > 4 and parts[4] != "":
                    category_id = int(parts[4])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            try:
                records.append(UsageRecord(user_id, timestamp, location_id, app_id, category_id))
            except ValidationError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
    return _sequences_from_records(records), header


def _sequences_from_records(records):
    records = sorted(records, key=lambda r: (r.user_id, r.timestamp))
    sequences = []
    current: list[UsageRecord] = []
    for rec in records:
        if current and (
            rec.user_id != current[0].user_id
            or rec.timestamp // SECONDS_PER_DAY != current[0].timestamp // SECONDS_PER_DAY
        ):
            sequences.append(UserSequence(current[0].user_id, tuple(current)))
            current = []
        current.append(rec)
    if current:
        sequences.append(UserSequence(current[0].user_id, tuple(current)))
    return sequences


# --------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class DatasetSplit:
    """User-level partition into train / validation / test sequence lists."""

    train: tuple[UserSequence, ...]
    validation: tuple[UserSequence, ...]
    test: tuple[UserSequence, ...]

    def users(self, part):
        return sorted({s.user_id for s in getattr(self, part)})


def split_dataset(sequences, ratios=(0.7, 0.1, 0.2), seed=0) -> DatasetSplit:
    """Partition sequences by user into train/validation/test.

    Sizes follow largest-remainder rounding of ``ratios`` (within one user of
    exact whenever every part can stay non-empty); the same seed always yields
    the same partition.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    by_user: dict[str, list[UserSequence]] = {}
    for seq in sequences:
        by_user.setdefault(seq.user_id, []).append(seq)
    users = sorted(by_user)
    if len(users) < 3:
        raise ValidationError(
            f"need at least 3 users to form three non-empty splits, got {len(users)}"
        )
    rng = rng_from(seed)
    order = [users[i] for i in rng.permutation(len(users))]
    sizes = _largest_remainder(len(users), ratios)
    parts = []
    lo = 0
    for size in sizes:
        chunk = set(order[lo : lo + size])
        parts.append(
            tuple(
                seq
                for user in sorted(chunk)
                for seq in sorted(by_user[user], key=lambda s: s.events[0].timestamp)
            )
        )
        lo += size
    return DatasetSplit(*parts)


def _largest_remainder(n, ratios):
    exact = [n * r for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    rema = sorted(range(3), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[rema[i % 3]] += 1
    # every split must stay non-empty; borrow from the largest when needed
    while min(sizes) == 0:
        sizes[sizes.index(max(sizes))] -= 1
        sizes[sizes.index(min(sizes))] += 1
    return sizes
