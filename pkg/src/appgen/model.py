"""Autoregressive training and generation over whole user-day sequences.

``AppGenModel`` ties the pieces together: frozen app/location embedding
tables feed a history-attention encoder and a conditional denoiser, which
are trained jointly by teacher forcing and then drive position-by-position
generation where each app is sampled by a full reverse chain conditioned on
the *generated* prefix.

Determinism contract: a fixed checkpoint, seed, and input corpus reproduce
outputs byte for byte.  Per-sequence noise streams are derived from
``(seed, user, day)``, so the randomness a sequence sees does not depend on
what else is in the batch; float outputs may still differ at the last ulp
when the same sequence is generated alongside a different set of
companions, because batched convolutions pick size-dependent kernels.
"""

import copy
import hashlib
import io
import json
import zipfile

import numpy as np
import torch

from .corpus import UsageRecord, UserSequence
from .diffusion import (
    ConditionalDenoiser,
    NoiseSchedule,
    decode_apps,
    make_schedule,
    reverse_step,
    training_loss,
)
from .encoders import EmbeddingTable
from .errors import CheckpointError, TrainingError, ValidationError
from .history import ConditionTables, HistoryAttention, build_window
from .validation import (
    check_in_range,
    check_positive_int,
    derive_seed,
    rng_from,
)

VARIANTS = ("full", "no_spatial", "no_history", "no_current_context")

CHECKPOINT_FORMAT = 1

_VAL_BATCH = 512


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValidationError(
            f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}"
        )
    return variant


def _coverage_check(sequences, table: EmbeddingTable, pick, what):
    ids = {pick(ev) for seq in sequences for ev in seq.events}
    missing = sorted(i for i in ids if i not in table.vectors)
    if missing:
        raise ValidationError(f"{what} ids missing from embedding table: {missing}")


class AppGenModel:
    """Conditional-diffusion sequence generator with a scikit-learn flavor.

    Parameters mirror the constructor; ``fit`` trains denoiser and
    attention (embedding tables stay frozen), ``generate_like`` synthesizes
    app sequences along given trajectories.
    """

    def __init__(
        self,
        app_table: EmbeddingTable,
        location_table: EmbeddingTable,
        *,
        attn_dim=64,
        channels=16,
        num_steps=50,
        beta_start=1e-4,
        beta_end=0.2,
        lambda_alpha=0.8,
        learning_rate=1e-3,
        batch_size=128,
        epochs=30,
        window=5,
        utc_offset=0,
        seed=0,
    ):
        check_positive_int("attn_dim", attn_dim)
        check_positive_int("channels", channels)
        check_positive_int("batch_size", batch_size)
        check_positive_int("epochs", epochs)
        check_positive_int("window", window)
        check_in_range("lambda_alpha", lambda_alpha, 0.0, 1.0 + 1e-12)
        if not learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {learning_rate}")
        # balanced features: raw-scale tables would let the temporal code
        # (norm sqrt(64)) drown the app identity out of every window point
        self.tables = ConditionTables.balanced(app_table, location_table, utc_offset)
        self.schedule = make_schedule(num_steps, beta_start, beta_end)
        self.attn_dim = attn_dim
        self.channels = channels
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.lambda_alpha = lambda_alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.window = window
        self.seed = seed

        init_rng = rng_from(derive_seed(seed, "init"))
        self.attention = HistoryAttention(
            self.tables.point_dim, attn_dim, seed_rng=init_rng
        )
        self.denoiser = ConditionalDenoiser(
            app_table.dim,
            self.attention.out_dim,
            self.tables.context_dim,
            channels=channels,
            seed_rng=init_rng,
        )
        self.fitted_ = False
        self.metadata_ = {}

    # -- scikit-learn style plumbing ------------------------------------

    def get_params(self, deep=True):
        return {
            "app_table": self.tables.app,
            "location_table": self.tables.location,
            **self._hyperparams(),
        }

    def _hyperparams(self):
        return {
            "attn_dim": self.attn_dim,
            "channels": self.channels,
            "num_steps": self.schedule.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "lambda_alpha": self.lambda_alpha,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "window": self.window,
            "utc_offset": self.tables.utc_offset,
            "seed": self.seed,
        }

    def config_snapshot(self):
        """Everything needed to rebuild the architecture, for checkpoints."""
        return {
            **self._hyperparams(),
            "app_dim": self.tables.app.dim,
            "location_dim": self.tables.location.dim,
        }

    # -- feature assembly -----------------------------------------------

    def _sequence_features(self, seq: UserSequence):
        """Per-position target/context/window arrays under teacher forcing.

        Window rows are slices of the per-position point features, matching
        ``build_window`` with the ground-truth apps as the prefix.
        """
        t = self.tables
        n = len(seq)
        points = np.stack(
            [
                t.point_feature(ev.timestamp, ev.location_id, ev.app_id)
                for ev in seq.events
            ]
        )
        contexts = np.stack(
            [t.context_feature(ev.timestamp, ev.location_id) for ev in seq.events]
        )
        targets = np.stack([t.app[a] for a in seq.apps])
        k = self.window
        win = np.zeros((n, k, t.point_dim))
        mask = np.zeros((n, k), dtype=bool)
        for i in range(1, n + 1):
            lo = max(1, i - k)
            m = i - lo
            if m:
                win[i - 1, :m] = points[lo - 1 : i - 1]
                mask[i - 1, :m] = True
        return targets, contexts, win, mask

    def _corpus_features(self, sequences):
        parts = [self._sequence_features(s) for s in sequences]
        x0 = np.concatenate([p[0] for p in parts])
        ctx = np.concatenate([p[1] for p in parts])
        win = np.concatenate([p[2] for p in parts])
        mask = np.concatenate([p[3] for p in parts])
        to = lambda a: torch.as_tensor(a, dtype=torch.float32)
        return to(x0), to(ctx), to(win), torch.as_tensor(mask)

    # -- training --------------------------------------------------------

    def fit(self, sequences, val_sequences=None):
        """Teacher-forced training; keeps the best-validation parameters.

        When ``val_sequences`` is omitted the training examples double as
        the validation set (with their own frozen noise draws).
        """
        sequences = list(sequences)
        if not sequences:
            raise ValidationError("training split is empty")
        _coverage_check(sequences, self.tables.app, lambda ev: ev.app_id, "app")
        _coverage_check(
            sequences, self.tables.location, lambda ev: ev.location_id, "location"
        )
        x0, ctx, win, mask = self._corpus_features(sequences)
        if val_sequences is None:
            vx0, vctx, vwin, vmask = x0, ctx, win, mask
        else:
            val_sequences = list(val_sequences)
            if not val_sequences:
                raise ValidationError("validation split is empty")
            _coverage_check(val_sequences, self.tables.app, lambda ev: ev.app_id, "app")
            _coverage_check(
                val_sequences,
                self.tables.location,
                lambda ev: ev.location_id,
                "location",
            )
            vx0, vctx, vwin, vmask = self._corpus_features(val_sequences)

        n = x0.shape[0]
        d = self.tables.app.dim
        steps = self.schedule.num_steps
        val_rng = rng_from(derive_seed(self.seed, "val-noise"))
        val_t = torch.as_tensor(val_rng.integers(1, steps + 1, vx0.shape[0]))
        val_eps = torch.as_tensor(
            val_rng.standard_normal((vx0.shape[0], d)), dtype=torch.float32
        )

        params = list(self.denoiser.parameters()) + list(self.attention.parameters())
        opt = torch.optim.Adam(params, lr=self.learning_rate)
        rng = rng_from(derive_seed(self.seed, "fit"))
        train_curve, val_curve = [], []
        best = (float("inf"), None, None, 0)
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = torch.as_tensor(perm[start : start + self.batch_size])
                b = idx.shape[0]
                t = torch.as_tensor(rng.integers(1, steps + 1, b))
                eps = torch.as_tensor(
                    rng.standard_normal((b, d)), dtype=torch.float32
                )
                history, _ = self.attention(win[idx], mask[idx])
                loss = training_loss(
                    self.denoiser,
                    x0[idx],
                    t,
                    eps,
                    history,
                    ctx[idx],
                    self.schedule,
                    lambda_alpha=self.lambda_alpha,
                )
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {start // self.batch_size}; "
                        f"epoch losses so far: {[round(v, 4) for v in train_curve]}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += loss.item() * b
            train_curve.append(epoch_loss / n)
            val_loss = self._validation_loss(vx0, vctx, vwin, vmask, val_t, val_eps)
            val_curve.append(val_loss)
            if val_loss < best[0]:
                best = (
                    val_loss,
                    copy.deepcopy(self.denoiser.state_dict()),
                    copy.deepcopy(self.attention.state_dict()),
                    epoch,
                )
        self.denoiser.load_state_dict(best[1])
        self.attention.load_state_dict(best[2])
        self.fitted_ = True
        self.metadata_ = {
            "epoch": best[3],
            "epochs_run": self.epochs,
            "seed": self.seed,
            "train_loss": train_curve,
            "val_loss": val_curve,
        }
        return self

    def _validation_loss(self, x0, ctx, win, mask, t, eps):
        total = 0.0
        n = x0.shape[0]
        with torch.no_grad():
            for start in range(0, n, _VAL_BATCH):
                sl = slice(start, start + _VAL_BATCH)
                history, _ = self.attention(win[sl], mask[sl])
                loss = training_loss(
                    self.denoiser,
                    x0[sl],
                    t[sl],
                    eps[sl],
                    history,
                    ctx[sl],
                    self.schedule,
                    lambda_alpha=self.lambda_alpha,
                )
                total += loss.item() * x0[sl].shape[0]
        return total / n

    # -- generation ------------------------------------------------------

    def _mask_conditions(self, variant, history, context, points):
        """Zero the condition blocks the variant ablates, in place."""
        t_dim = self.tables.temporal_dim
        l_dim = self.tables.location.dim
        if variant == "no_spatial":
            points[:, :, t_dim : t_dim + l_dim] = 0.0
            context[:, t_dim:] = 0.0
        elif variant == "no_history":
            history[:, :] = 0.0
        elif variant == "no_current_context":
            context[:, :] = 0.0
        return history, context, points

    def generate_like(self, sequences, seed=0, variant="full", condition_hook=None):
        """Generate one app sequence along each input trajectory.

        Only timestamps and locations of the inputs are read; their app ids
        are ignored.  ``condition_hook(position, keys, points, mask,
        history, context)`` observes the exact conditioning of every active
        sequence, after variant masking.
        """
        check_variant(variant)
        if not self.fitted_:
            raise ValidationError("model is not fitted; train or load a checkpoint first")
        sequences = list(sequences)
        if not sequences:
            return []
        _coverage_check(
            sequences, self.tables.location, lambda ev: ev.location_id, "location"
        )
        tab = self.tables
        d = tab.app.dim
        app_ids = np.array(sorted(tab.app.vectors))
        app_matrix = tab.app.as_matrix()
        rngs = [
            rng_from(derive_seed(seed, "gen", f"{s.user_id}:{s.day}"))
            for s in sequences
        ]
        generated = [[] for _ in sequences]
        max_n = max(len(s) for s in sequences)
        k = self.window
        with torch.no_grad():
            for i in range(1, max_n + 1):
                active = [j for j, s in enumerate(sequences) if len(s) >= i]
                b = len(active)
                points = np.zeros((b, k, tab.point_dim))
                mask = np.zeros((b, k), dtype=bool)
                context = np.zeros((b, tab.context_dim))
                for row, j in enumerate(active):
                    seq = sequences[j]
                    w = build_window(seq, generated[j], i, k, tab)
                    m = len(w)
                    if m:
                        points[row, :m] = w.points
                        mask[row, :m] = True
                    ev = seq.events[i - 1]
                    context[row] = tab.context_feature(ev.timestamp, ev.location_id)
                if variant == "no_spatial":
                    self._mask_conditions(variant, None, context, points)
                pts_t = torch.as_tensor(points, dtype=torch.float32)
                mask_t = torch.as_tensor(mask)
                ctx_t = torch.as_tensor(context, dtype=torch.float32)
                if variant == "no_history":
                    history = torch.zeros(b, self.attention.out_dim)
                else:
                    history, _ = self.attention(pts_t, mask_t)
                if variant == "no_current_context":
                    ctx_t = torch.zeros_like(ctx_t)
                if condition_hook is not None:
                    keys = [
                        (sequences[j].user_id, sequences[j].day) for j in active
                    ]
                    condition_hook(
                        i,
                        keys,
                        points.copy(),
                        mask.copy(),
                        history.numpy().copy(),
                        ctx_t.numpy().copy(),
                    )
                x = torch.as_tensor(
                    np.stack([rngs[j].standard_normal(d) for j in active]),
                    dtype=torch.float32,
                )
                for t in range(self.schedule.num_steps, 0, -1):
                    if t > 1:
                        z = torch.as_tensor(
                            np.stack([rngs[j].standard_normal(d) for j in active]),
                            dtype=torch.float32,
                        )
                    else:
                        z = torch.zeros_like(x)
                    x = reverse_step(
                        self.denoiser, x, t, history, ctx_t, z, self.schedule
                    )
                decoded = app_ids[decode_apps(x.numpy(), app_matrix)]
                for row, j in enumerate(active):
                    generated[j].append(int(decoded[row]))
        return [
            _replace_apps(seq, apps) for seq, apps in zip(sequences, generated)
        ]

    def generate_sequence(self, seq: UserSequence, seed=0, variant="full"):
        """Single-trajectory convenience wrapper around ``generate_like``."""
        return self.generate_like([seq], seed=seed, variant=variant)[0]


def _replace_apps(seq: UserSequence, apps) -> UserSequence:
    events = tuple(
        UsageRecord(ev.user_id, ev.timestamp, ev.location_id, app, ev.category_id)
        for ev, app in zip(seq.events, apps)
    )
    return UserSequence(seq.user_id, events)


# --------------------------------------------------------------------------
# Checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()
    ).hexdigest()


def _table_arrays(prefix, table: EmbeddingTable):
    ids = np.array(sorted(table.vectors))
    return {
        f"{prefix}_ids": ids,
        f"{prefix}_vectors": np.stack([table.vectors[i] for i in ids]),
    }


def _zip_entry(zf: zipfile.ZipFile, name, payload: bytes):
    # fixed timestamp so identical content gives identical bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, payload)


def _npz_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, arr in sorted(arrays.items()):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asanyarray(arr), allow_pickle=False)
            _zip_entry(zf, f"{name}.npy", member.getvalue())
    return buf.getvalue()


def save_checkpoint(model: AppGenModel, path, extra_metadata=None):
    """Write a self-contained archive: manifest + every parameter array.

    Byte-stable: saving the same model twice gives identical files.
    """
    config = model.config_snapshot()
    metadata = dict(model.metadata_)
    if extra_metadata:
        metadata.update(extra_metadata)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": config,
        "config_hash": config_hash(config),
        "metadata": metadata,
    }
    arrays = {
        **_table_arrays("app", model.tables.app),
        **_table_arrays("location", model.tables.location),
        "betas": model.schedule.betas,
    }
    for name, tensor in model.attention.state_dict().items():
        arrays[f"attention/{name}"] = tensor.numpy()
    for name, tensor in model.denoiser.state_dict().items():
        arrays[f"denoiser/{name}"] = tensor.numpy()
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(
            zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=2).encode()
        )
        _zip_entry(zf, "arrays.npz", _npz_bytes(arrays))
    return path


def _load_table(arrays, prefix, domain):
    ids = arrays[f"{prefix}_ids"]
    vectors = arrays[f"{prefix}_vectors"]
    return EmbeddingTable(domain, {int(i): v for i, v in zip(ids, vectors)})


def load_checkpoint(path) -> AppGenModel:
    """Rebuild a generation-ready model; verifies version and config hash."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = dict(np.load(io.BytesIO(zf.read("arrays.npz"))))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}")
    except (zipfile.BadZipFile, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}")
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {version} unsupported (expected {CHECKPOINT_FORMAT})"
        )
    config = manifest.get("config", {})
    if config_hash(config) != manifest.get("config_hash"):
        raise CheckpointError("checkpoint config hash mismatch")
    required = {
        "app_ids", "app_vectors", "location_ids", "location_vectors", "betas",
    }
    missing = required - arrays.keys()
    if missing:
        raise CheckpointError(f"checkpoint missing arrays: {sorted(missing)}")
    app_table = _load_table(arrays, "app", "app")
    location_table = _load_table(arrays, "location", "location")
    hyper = {
        key: config[key]
        for key in (
            "attn_dim", "channels", "num_steps", "beta_start", "beta_end",
            "lambda_alpha", "learning_rate", "batch_size", "epochs", "window",
            "utc_offset", "seed",
        )
    }
    num_steps = hyper.pop("num_steps")
    model = AppGenModel(app_table, location_table, num_steps=num_steps, **hyper)
    if not np.array_equal(model.schedule.betas, arrays["betas"]):
        raise CheckpointError("checkpoint noise schedule disagrees with its config")
    try:
        model.attention.load_state_dict(
            {
                name: torch.as_tensor(arrays[f"attention/{name}"])
                for name in model.attention.state_dict()
            }
        )
        model.denoiser.load_state_dict(
            {
                name: torch.as_tensor(arrays[f"denoiser/{name}"])
                for name in model.denoiser.state_dict()
            }
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing parameter array: {exc}")
    model.fitted_ = True
    model.metadata_ = manifest.get("metadata", {})
    return model
