"""Representation learning for apps, locations, and time.

Three tables feed the generator: app vectors from skip-gram with negative
sampling over usage sequences, base-station vectors from a TuckER
factorization of an urban knowledge graph, and a closed-form sinusoidal
encoding of the 48 half-hour bins.  All tables are immutable once trained.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import NUM_TIME_BINS, Geography
from .errors import DataFormatError, ValidationError
from .validation import check_positive_int, rng_from

TEMPORAL_DIM = 128
_TAU = 10000.0

RELATIONS = ("BaseLocateAt", "BaseBelongTo", "ServedBy", "BaseBorderBy")


# --------------------------------------------------------------------------
# Embedding tables


@dataclass(frozen=True)
class EmbeddingTable:
    """One vector per integer id for a single domain (app, location, or time)."""

    domain: str
    vectors: dict[int, np.ndarray]

    def __post_init__(self):
        if self.domain not in ("app", "location", "time"):
            raise ValidationError(f"unknown embedding domain {self.domain!r}")
        if not self.vectors:
            raise ValidationError("embedding table is empty")
        dims = set()
        for key, vec in self.vectors.items():
            vec = np.asarray(vec, dtype=float)
            if vec.ndim != 1:
                raise ValidationError(f"vector for id {key} is not 1-D")
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"vector for id {key} has non-finite entries")
            dims.add(vec.shape[0])
            self.vectors[key] = vec
        if len(dims) != 1:
            raise ValidationError(f"mixed vector lengths {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __getitem__(self, key):
        try:
            return self.vectors[key]
        except KeyError:
            raise ValidationError(f"no {self.domain} vector for id {key}") from None

    def check_covers(self, n):
        """Require exactly the ids 0..n-1, no gaps and no extras."""
        missing = sorted(set(range(n)) - set(self.vectors))
        extra = sorted(set(self.vectors) - set(range(n)))
        if missing or extra:
            raise ValidationError(
                f"{self.domain} table must cover ids 0..{n - 1}: "
                f"missing {missing}, extra {extra}"
            )
        return self

    def as_matrix(self) -> np.ndarray:
        """Rows ordered by id; requires a gap-free id range starting at 0."""
        self.check_covers(len(self.vectors))
        return np.stack([self.vectors[i] for i in range(len(self.vectors))])


def write_embeddings(table: EmbeddingTable, path, extra_header=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#domain:{table.domain}\n#dim:{table.dim}\n")
        for key, value in (extra_header or {}).items():
            fh.write(f"#{key}:{value}\n")
        for key in sorted(table.vectors):
            vals = "\t".join(repr(float(v)) for v in table.vectors[key])
            fh.write(f"{key}\t{vals}\n")


def read_embeddings(path) -> EmbeddingTable:
    domain = None
    dim = None
    vectors = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#domain:"):
                domain = line[len("#domain:") :].strip()
                continue
            if line.startswith("#dim:"):
                try:
                    dim = int(line[len("#dim:") :])
                except ValueError:
                    raise DataFormatError(f"line {lineno}: bad dim {line!r}") from None
                continue
            if line.startswith("#"):
                continue
            if domain is None or dim is None:
                raise DataFormatError(
                    f"line {lineno}: vector row before #domain/#dim header"
                )
            parts = line.split("\t")
            if len(parts) != dim + 1:
                raise DataFormatError(
                    f"line {lineno}: expected id plus {dim} values, got {len(parts)} fields"
                )
            try:
                key = int(parts[0])
                vec = np.array([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            if key in vectors:
                raise DataFormatError(f"line {lineno}: duplicate id {key}")
            vectors[key] = vec
    if not vectors:
        raise DataFormatError(f"{path}: no vectors found")
    try:
        return EmbeddingTable(domain, vectors)
    except ValidationError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# Temporal encoding


def temporal_encoding(tbin) -> np.ndarray:
    """Sinusoidal code of a half-hour bin: 64 sines then 64 cosines.

    Component j of each half uses angle bin / tau^(j/64) with tau = 10000.
    """
    tbin = int(tbin)
    if not 0 <= tbin < NUM_TIME_BINS:
        raise ValidationError(f"time bin must be in [0, {NUM_TIME_BINS}), got {tbin}")
    j = np.arange(TEMPORAL_DIM // 2)
    angle = tbin / _TAU ** (j / (TEMPORAL_DIM // 2))
    return np.concatenate([np.sin(angle), np.cos(angle)])


@functools.lru_cache(maxsize=1)
def temporal_table() -> np.ndarray:
    """The full immutable 48 x 128 table of bin encodings."""
    table = np.stack([temporal_encoding(b) for b in range(NUM_TIME_BINS)])
    table.setflags(write=False)
    return table


# --------------------------------------------------------------------------
# Skip-gram app embeddings


def sgns_loss_and_grads(v_c, u_o, u_neg):
    """Loss and analytic gradients for one skip-gram positive with negatives.

    loss = -log sigmoid(u_o . v_c) - sum_n log sigmoid(-u_n . v_c)
    Returns (loss, grad v_c, grad u_o, grad u_neg).
    """
    v_c = np.asarray(v_c, dtype=float)
    u_o = np.asarray(u_o, dtype=float)
    u_neg = np.atleast_2d(np.asarray(u_neg, dtype=float))
    z_pos = float(u_o @ v_c)
    z_neg = u_neg @ v_c
    loss = np.logaddexp(0.0, -z_pos) + np.logaddexp(0.0, z_neg).sum()
    g_pos = _sigmoid(z_pos) - 1.0
    g_neg = _sigmoid(z_neg)
    grad_vc = g_pos * u_o + g_neg @ u_neg
    grad_uo = g_pos * v_c
    grad_uneg = np.outer(g_neg, v_c)
    return float(loss), grad_vc, grad_uo, grad_uneg


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def train_app_embeddings(
    sequences,
    dim=64,
    window=5,
    negatives=5,
    epochs=5,
    seed=0,
    num_apps=None,
    lr=0.025,
    batch=1024,
) -> EmbeddingTable:
    """Skip-gram with negative sampling over app-id sequences.

    Each sequence is one sentence; pairs come from symmetric windows; noise
    apps are drawn from the unigram distribution raised to 3/4.  Updates are
    applied in small batches with scatter-add, so results are deterministic
    per seed.
    """
    check_positive_int("dim", dim)
    if dim < 2:
        raise ValidationError(f"dim must be >= 2, got {dim}")
    check_positive_int("window", window)
    check_positive_int("negatives", negatives)
    check_positive_int("epochs", epochs)
    seqs = [np.asarray(tuple(s), dtype=np.int64) for s in sequences if len(tuple(s)) > 0]
    if not seqs:
        raise ValidationError("no non-empty sequences to train on")
    flat = np.concatenate(seqs)
    n = int(flat.max()) + 1 if num_apps is None else num_apps
    counts = np.bincount(flat, minlength=n)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValidationError(
            f"apps never observed, cannot train their vectors: {missing.tolist()}"
        )

    centers = []
    contexts = []
    for seq in seqs:
        m = len(seq)
        for off in range(1, window + 1):
            if off < m:
                centers.append(seq[:-off])
                contexts.append(seq[off:])
                centers.append(seq[off:])
                contexts.append(seq[:-off])
    centers = np.concatenate(centers)
    contexts = np.concatenate(contexts)

    rng = rng_from(seed)
    vin = rng.uniform(-0.05, 0.05, (n, dim))
    vout = rng.uniform(-0.05, 0.05, (n, dim))
    noise = counts.astype(float) ** 0.75
    noise /= noise.sum()

    npairs = len(centers)
    for _ in range(epochs):
        order = rng.permutation(npairs)
        negs = rng.choice(n, size=(npairs, negatives), p=noise)
        for lo in range(0, npairs, batch):
            idx = order[lo : lo + batch]
            c = centers[idx]
            o = contexts[idx]
            g = negs[idx]
            vc = vin[c]
            uo = vout[o]
            un = vout[g]
            g_pos = _sigmoid(np.einsum("bd,bd->b", uo, vc)) - 1.0
            g_neg = _sigmoid(np.einsum("bkd,bd->bk", un, vc))
            grad_vc = g_pos[:, None] * uo + np.einsum("bk,bkd->bd", g_neg, un)
            _mean_step(vin, c, grad_vc, lr)
            out_rows = np.concatenate([o, g.ravel()])
            out_grads = np.concatenate(
                [
                    g_pos[:, None] * vc,
                    (g_neg[:, :, None] * vc[:, None, :]).reshape(-1, dim),
                ]
            )
            _mean_step(vout, out_rows, out_grads, lr)
    return EmbeddingTable("app", {i: vin[i] for i in range(n)})


def _mean_step(table, rows, grads, lr):
    """Apply per-row mean of the accumulated gradients.

    With a small vocabulary one row collects hundreds of pair gradients per
    batch; summing them multiplies the step by that count and diverges, so
    each row moves by the average instead.
    """
    acc = np.zeros_like(table)
    np.add.at(acc, rows, grads)
    cnt = np.bincount(rows, minlength=table.shape[0]).astype(float)
    hit = cnt > 0
    table[hit] -= lr * acc[hit] / cnt[hit, None]


# --------------------------------------------------------------------------
# Urban knowledge graph


@dataclass(frozen=True)
class UrbanKG:
    """Typed entities and the facts connecting stations to their surroundings.

    Heads are always base stations; the four relations link a station to its
    region, business area, served POIs, and bordering stations.
    """

    stations: tuple[str, ...]
    regions: tuple[str, ...]
    areas: tuple[str, ...]
    pois: tuple[str, ...]
    facts: frozenset[tuple[str, str, str]]

    def __post_init__(self):
        stations = set(self.stations)
        tails = {
            "BaseLocateAt": set(self.regions),
            "BaseBelongTo": set(self.areas),
            "ServedBy": set(self.pois),
            "BaseBorderBy": stations,
        }
        located = set()
        for head, rel, tail in self.facts:
            if rel not in RELATIONS:
                raise ValidationError(f"unknown relation {rel!r}")
            if head not in stations:
                raise ValidationError(f"fact head {head!r} is not a base station")
            if tail not in tails[rel]:
                raise ValidationError(f"fact tail {tail!r} has the wrong type for {rel}")
            if rel == "BaseBorderBy" and (tail, rel, head) not in self.facts:
                raise ValidationError(
                    f"BaseBorderBy must be symmetric, missing ({tail}, {rel}, {head})"
                )
            if rel == "BaseLocateAt":
                located.add(head)
        unlocated = stations - located
        if unlocated:
            raise ValidationError(f"stations without a region: {sorted(unlocated)}")

    @property
    def entities(self) -> tuple[str, ...]:
        return tuple(self.stations) + tuple(self.regions) + tuple(self.areas) + tuple(self.pois)


def build_urban_kg(geography: Geography) -> UrbanKG:
    """Assemble the station-centric knowledge graph from a spatial layout."""
    n = geography.num_stations
    if len(geography.station_region) != n or len(geography.station_area) != n:
        raise ValidationError(
            "geography must assign every station a region and a business area"
        )
    stations = tuple(f"station:{s}" for s in range(n))
    regions = tuple(f"region:{r}" for r in range(geography.num_regions))
    areas = tuple(f"area:{a}" for a in range(geography.num_business_areas))
    pois = tuple(f"poi:{p}" for p in range(len(geography.poi_station)))
    facts = set()
    for s in range(n):
        facts.add((stations[s], "BaseLocateAt", f"region:{geography.station_region[s]}"))
        facts.add((stations[s], "BaseBelongTo", f"area:{geography.station_area[s]}"))
        for t in geography.adjacency[s]:
            facts.add((stations[s], "BaseBorderBy", stations[t]))
            facts.add((stations[t], "BaseBorderBy", stations[s]))
    for p, s in enumerate(geography.poi_station):
        facts.add((stations[s], "ServedBy", pois[p]))
    return UrbanKG(stations, regions, areas, pois, frozenset(facts))


def write_kg(kg: UrbanKG, path, extra_header=None):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (extra_header or {}).items():
            fh.write(f"#{key}:{value}\n")
        for head, rel, tail in sorted(kg.facts):
            fh.write(f"{head}\t{rel}\t{tail}\n")


def read_kg(path) -> UrbanKG:
    facts = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
            facts.add(tuple(parts))
    ents: dict[str, set[str]] = {"station": set(), "region": set(), "area": set(), "poi": set()}
    for head, rel, tail in facts:
        for name in (head, tail):
            kind = name.split(":", 1)[0]
            if kind not in ents:
                raise DataFormatError(f"unknown entity kind in {name!r}")
            ents[kind].add(name)
    try:
        return UrbanKG(
            tuple(sorted(ents["station"])),
            tuple(sorted(ents["region"])),
            tuple(sorted(ents["area"])),
            tuple(sorted(ents["poi"])),
            frozenset(facts),
        )
    except ValidationError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# TuckER factorization


@dataclass(frozen=True)
class TuckerModel:
    """Learned KG factorization: entity/relation vectors and the core tensor."""

    entity_dim: int
    relation_dim: int
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    entity_vectors: dict[str, np.ndarray]
    relation_vectors: dict[str, np.ndarray]
    core_tensor: np.ndarray
    loss_curve: tuple[float, ...] = ()

    def __post_init__(self):
        expect = (self.entity_dim, self.relation_dim, self.entity_dim)
        if self.core_tensor.shape != expect:
            raise ValidationError(
                f"core tensor shape {self.core_tensor.shape} != {expect}"
            )


def tucker_score(model: TuckerModel, head, relation, tail) -> float:
    """Trilinear contraction of core with head, relation, tail vectors (a logit)."""
    for name, table, label in (
        (head, model.entity_vectors, "entity"),
        (relation, model.relation_vectors, "relation"),
        (tail, model.entity_vectors, "entity"),
    ):
        if name not in table:
            raise ValidationError(f"unknown {label} {name!r}")
    return float(
        np.einsum(
            "ijk,i,j,k->",
            model.core_tensor,
            model.entity_vectors[head],
            model.relation_vectors[relation],
            model.entity_vectors[tail],
        )
    )


def tucker_probability(model, head, relation, tail) -> float:
    return float(_sigmoid(tucker_score(model, head, relation, tail)))


def tucker_score_all_tails(model: TuckerModel, head, relation) -> np.ndarray:
    """Logits for every entity as tail, ordered like ``model.entities``."""
    e = np.stack([model.entity_vectors[name] for name in model.entities])
    eh = model.entity_vectors[head]
    wr = model.relation_vectors[relation]
    return np.einsum("ijk,i,j,nk->n", model.core_tensor, eh, wr, e)


def _tucker_batch_logits(core, ent, rel, h_idx, r_idx, t_idx):
    eh = ent[h_idx]
    wr = rel[r_idx]
    et = ent[t_idx]
    mid = torch.einsum("ijk,bi,bj->bk", core, eh, wr)
    return (mid * et).sum(dim=1)


def train_tucker(
    kg: UrbanKG,
    entity_dim=32,
    relation_dim=32,
    epochs=200,
    lr=0.01,
    negatives=5,
    seed=0,
):
    """Fit TuckER on the KG facts with corrupted-tail negatives.

    Binary cross-entropy on logistic(score), Adam, full-batch; negatives are
    uniform random tails redrawn each epoch.  Returns the model plus the
    station vectors repacked as a location embedding table.
    """
    check_positive_int("entity_dim", entity_dim)
    check_positive_int("relation_dim", relation_dim)
    check_positive_int("epochs", epochs)
    check_positive_int("negatives", negatives)
    entities = kg.entities
    if len(entities) < 2:
        raise ValidationError("need at least 2 entities to sample negative tails")
    if not kg.facts:
        raise ValidationError("knowledge graph has no facts")
    ent_index = {name: i for i, name in enumerate(entities)}
    rel_index = {name: i for i, name in enumerate(RELATIONS)}
    facts = sorted(kg.facts)
    h = np.array([ent_index[f[0]] for f in facts])
    r = np.array([rel_index[f[1]] for f in facts])
    t = np.array([ent_index[f[2]] for f in facts])

    rng = rng_from(seed)
    ent = torch.tensor(
        rng.uniform(-0.05, 0.05, (len(entities), entity_dim)), requires_grad=True
    )
    rel = torch.tensor(
        rng.uniform(-0.05, 0.05, (len(RELATIONS), relation_dim)), requires_grad=True
    )
    core = torch.tensor(
        rng.uniform(-0.05, 0.05, (entity_dim, relation_dim, entity_dim)),
        requires_grad=True,
    )
    opt = torch.optim.Adam([ent, rel, core], lr=lr)
    loss_fn = torch.nn.BCEWithLogitsLoss()
    nf = len(facts)
    labels = torch.cat([torch.ones(nf), torch.zeros(nf * negatives)]).double()
    h_all = torch.from_numpy(np.concatenate([h, np.tile(h, negatives)]))
    r_all = torch.from_numpy(np.concatenate([r, np.tile(r, negatives)]))
    losses = []
    for _ in range(epochs):
        neg_t = rng.integers(0, len(entities), size=nf * negatives)
        t_all = torch.from_numpy(np.concatenate([t, neg_t]))
        opt.zero_grad()
        logits = _tucker_batch_logits(core, ent, rel, h_all, r_all, t_all)
        loss = loss_fn(logits, labels)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))

    ent_np = ent.detach().numpy()
    rel_np = rel.detach().numpy()
    model = TuckerModel(
        entity_dim,
        relation_dim,
        entities,
        RELATIONS,
        {name: ent_np[i] for name, i in ent_index.items()},
        {name: rel_np[i] for name, i in rel_index.items()},
        core.detach().numpy(),
        tuple(losses),
    )
    location = EmbeddingTable(
        "location",
        {
            int(name.split(":", 1)[1]): model.entity_vectors[name]
            for name in kg.stations
        },
    )
    return model, location


def tucker_loss_fn(core, ent, rel, h_idx, r_idx, t_idx, labels):
    """The training objective as a standalone callable (used for gradient checks)."""
    logits = _tucker_batch_logits(core, ent, rel, h_idx, r_idx, t_idx)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)
