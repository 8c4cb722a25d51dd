"""Command-line pipeline driver.

Seven commands cover the whole flow: ``gen-world`` writes a synthetic
dataset and its splits, ``train-encoders`` fits the app and location
embedding tables, ``train`` fits the generator, ``generate`` synthesizes a
corpus along the held-out trajectories, ``evaluate`` writes the metric
table, ``report`` emits the analysis files, and ``pipeline`` runs them all
in order.

Stages are idempotent: existing outputs produced by the same config hash
are kept unless ``--force``.  Every error prints a single
``error[<tag>]: message`` line; usage and config-key problems exit 2,
runtime failures exit 1.
"""

import argparse
import json
import os
import sys
import zipfile
from pathlib import Path

import torch

from . import __version__
from .analysis import (
    apriori,
    hourly_profile_correlation,
    hourly_profiles,
    itemset_agreement,
    location_cluster_agreement,
    transactions_from,
)
from .config import load_config
from .corpus import (
    UsageRecord,
    UserSequence,
    app_category_map,
    build_geography,
    generate_world,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .encoders import (
    build_urban_kg,
    read_embeddings,
    train_app_embeddings,
    train_tucker,
    write_embeddings,
    write_kg,
)
from .errors import AppGenError, ConfigError
from .metrics import (
    EvalReport,
    crps_popularity,
    jsd,
    m_tv,
    mae,
    per_user_popularity,
    rmse,
    write_report,
)
from .model import AppGenModel, load_checkpoint, save_checkpoint

COMMANDS = (
    "gen-world",
    "train-encoders",
    "train",
    "generate",
    "evaluate",
    "report",
    "pipeline",
)

_METRICS_FILE = "metrics.tsv"


# --------------------------------------------------------------------------
# Artifact bookkeeping


def _run_dir(cfg) -> Path:
    rd = Path(cfg["paths.run_dir"])
    rd.mkdir(parents=True, exist_ok=True)
    return rd


def _paths(cfg):
    rd = _run_dir(cfg)
    return {
        "dataset": rd / cfg["paths.dataset"],
        "train": rd / "train.tsv",
        "val": rd / "val.tsv",
        "test": rd / "test.tsv",
        "kg": rd / "kg.tsv",
        "app_emb": rd / "app_embeddings.tsv",
        "loc_emb": rd / "location_embeddings.tsv",
        "checkpoint": rd / cfg["paths.checkpoint"],
        "generated": rd / "generated.tsv",
        "reports": rd / cfg["paths.reports"],
    }


def _file_header(path) -> dict:
    """Leading ``#key:value`` comment lines of a text artifact."""
    header = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line.rstrip("\n")[1:]
            if ":" in body:
                key, value = body.split(":", 1)
                header[key] = value
    return header


def _text_hash(path):
    return _file_header(path).get("config")


def _checkpoint_hash(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except Exception:
        return None
    return manifest.get("metadata", {}).get("run_config_hash")


def _require(path: Path, tag, hint):
    if not path.exists():
        raise AppGenError(f"{path} not found; {hint}", tag=tag)


def _verify_hash(path, found, expected, allow):
    if found != expected:
        short = (found or "unknown")[:12]
        if allow:
            print(f"[warn] {path}: config hash {short} != current, continuing")
        else:
            raise AppGenError(
                f"{path} was produced by config {short}, current config is "
                f"{expected[:12]}; rerun earlier stages or pass --allow-hash-mismatch",
                tag="config-hash-mismatch",
            )


def _should_build(stage, outputs, expected, force) -> bool:
    """Idempotency gate: skip when every output matches the config hash."""
    if force:
        return True
    missing = [p for p, _ in outputs if not p.exists()]
    if missing:
        return True
    for path, reader in outputs:
        found = reader(path)
        if found != expected:
            raise AppGenError(
                f"{path} was produced by config {(found or 'unknown')[:12]}, "
                f"current config is {expected[:12]}; pass --force to rebuild",
                tag="config-hash-mismatch",
            )
    print(f"[{stage}] up to date: {', '.join(str(p) for p, _ in outputs)}")
    return False


def _write_table(path, header, fields, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(header):
            fh.write(f"#{key}:{header[key]}\n")
        fh.write("#fields:" + "\t".join(fields) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# Stages


def cmd_gen_world(cfg, force, allow):
    paths = _paths(cfg)
    outputs = [
        (paths[name], _text_hash)
        for name in ("dataset", "train", "val", "test", "kg")
    ]
    if not _should_build("gen-world", outputs, cfg.stage_hash("world"), force):
        return
    world = generate_world(cfg.world_spec())
    split = split_dataset(
        world.sequences, cfg.split_ratios(), seed=cfg.stage_seed("split")
    )
    header = {"config": cfg.stage_hash("world")}
    write_dataset(world.sequences, paths["dataset"], extra_header=header)
    write_dataset(split.train, paths["train"], extra_header=header)
    write_dataset(split.validation, paths["val"], extra_header=header)
    write_dataset(split.test, paths["test"], extra_header=header)
    write_kg(build_urban_kg(world.geography), paths["kg"], extra_header=header)
    events = sum(len(s) for s in world.sequences)
    print(
        f"[gen-world] wrote {paths['dataset']} "
        f"({events} events, {len(world.sequences)} user-days)"
    )


def cmd_train_encoders(cfg, force, allow):
    paths = _paths(cfg)
    _require(paths["train"], "missing-dataset", "run 'appgen gen-world' first")
    outputs = [(paths["app_emb"], _text_hash), (paths["loc_emb"], _text_hash)]
    if not _should_build("train-encoders", outputs, cfg.stage_hash("encoders"), force):
        return
    _verify_hash(paths["train"], _text_hash(paths["train"]), cfg.stage_hash("world"), allow)
    train_seqs, _ = read_dataset(paths["train"])
    app_table = train_app_embeddings(
        [s.apps for s in train_seqs],
        dim=cfg["encoders.app_dim"],
        window=cfg["encoders.app_window"],
        negatives=cfg["encoders.app_negatives"],
        epochs=cfg["encoders.app_epochs"],
        seed=cfg.stage_seed("app-embeddings"),
        num_apps=cfg["world.num_apps"],
        lr=cfg["encoders.app_lr"],
    )
    geo = build_geography(
        cfg["world.num_stations"],
        cfg["world.num_regions"],
        cfg["world.num_business_areas"],
        cfg["world.num_pois"],
    )
    _, loc_table = train_tucker(
        build_urban_kg(geo),
        entity_dim=cfg["encoders.location_dim"],
        relation_dim=cfg["encoders.relation_dim"],
        epochs=cfg["encoders.kg_epochs"],
        lr=cfg["encoders.kg_lr"],
        negatives=cfg["encoders.kg_negatives"],
        seed=cfg.stage_seed("kg-embeddings"),
    )
    header = {"config": cfg.stage_hash("encoders")}
    write_embeddings(app_table, paths["app_emb"], extra_header=header)
    write_embeddings(loc_table, paths["loc_emb"], extra_header=header)
    print(f"[train-encoders] wrote {paths['app_emb']}, {paths['loc_emb']}")


def cmd_train(cfg, force, allow):
    paths = _paths(cfg)
    _require(paths["train"], "missing-dataset", "run 'appgen gen-world' first")
    _require(paths["val"], "missing-dataset", "run 'appgen gen-world' first")
    for name in ("app_emb", "loc_emb"):
        _require(
            paths[name], "missing-embeddings", "run 'appgen train-encoders' first"
        )
    outputs = [(paths["checkpoint"], _checkpoint_hash)]
    if not _should_build("train", outputs, cfg.stage_hash("model"), force):
        return
    for name in ("train", "val"):
        _verify_hash(
            paths[name], _text_hash(paths[name]), cfg.stage_hash("world"), allow
        )
    for name in ("app_emb", "loc_emb"):
        _verify_hash(
            paths[name], _text_hash(paths[name]), cfg.stage_hash("encoders"), allow
        )
    train_seqs, _ = read_dataset(paths["train"])
    val_seqs, _ = read_dataset(paths["val"])
    model = AppGenModel(
        read_embeddings(paths["app_emb"]),
        read_embeddings(paths["loc_emb"]),
        attn_dim=cfg["model.attn_dim"],
        channels=cfg["model.channels"],
        num_steps=cfg["model.num_steps"],
        beta_start=cfg["model.beta_start"],
        beta_end=cfg["model.beta_end"],
        lambda_alpha=cfg["model.lambda_alpha"],
        learning_rate=cfg["model.learning_rate"],
        batch_size=cfg["model.batch_size"],
        epochs=cfg["model.epochs"],
        window=cfg["model.window"],
        utc_offset=cfg["model.utc_offset"],
        seed=cfg.stage_seed("train"),
    )
    model.fit(train_seqs, val_seqs)
    save_checkpoint(
        model,
        paths["checkpoint"],
        extra_metadata={
            "run_config_hash": cfg.stage_hash("model"),
            "run_config": cfg.hashed_values(),
            "version": __version__,
        },
    )
    meta = model.metadata_
    print(
        f"[train] wrote {paths['checkpoint']} "
        f"(best epoch {meta['epoch']}, val loss {meta['val_loss'][meta['epoch'] - 1]:.4f})"
    )


def _with_categories(seq: UserSequence, categories) -> UserSequence:
    events = tuple(
        UsageRecord(
            ev.user_id,
            ev.timestamp,
            ev.location_id,
            ev.app_id,
            categories[ev.app_id],
        )
        for ev in seq.events
    )
    return UserSequence(seq.user_id, events)


def cmd_generate(cfg, force, allow):
    paths = _paths(cfg)
    _require(paths["checkpoint"], "missing-checkpoint", "run 'appgen train' first")
    _require(paths["test"], "missing-dataset", "run 'appgen gen-world' first")
    outputs = [(paths["generated"], _text_hash)]
    if not _should_build("generate", outputs, cfg.stage_hash("generate"), force):
        return
    _verify_hash(
        paths["checkpoint"],
        _checkpoint_hash(paths["checkpoint"]),
        cfg.stage_hash("model"),
        allow,
    )
    _verify_hash(paths["test"], _text_hash(paths["test"]), cfg.stage_hash("world"), allow)
    model = load_checkpoint(paths["checkpoint"])
    test_seqs, _ = read_dataset(paths["test"])
    variant = cfg["generate.variant"]
    generated = model.generate_like(
        test_seqs, seed=cfg.stage_seed("generate"), variant=variant
    )
    categories = app_category_map(
        cfg["world.num_apps"], cfg["world.num_categories"]
    )
    generated = [_with_categories(s, categories) for s in generated]
    write_dataset(
        generated,
        paths["generated"],
        extra_header={"config": cfg.stage_hash("generate"), "variant": variant},
    )
    events = sum(len(s) for s in generated)
    print(f"[generate] wrote {paths['generated']} ({events} events, variant={variant})")


def _metric_rows(cfg, real_seqs, gen_seqs):
    rows = []
    for domain, n in (
        ("app", cfg["world.num_apps"]),
        ("category", cfg["world.num_categories"]),
    ):
        _, real_mat = per_user_popularity(real_seqs, n, domain=domain)
        _, gen_mat = per_user_popularity(gen_seqs, n, domain=domain)
        p_real = real_mat.mean(axis=0)
        p_gen = gen_mat.mean(axis=0)
        rows.append(("rmse", domain, rmse(p_real, p_gen)))
        rows.append(("mae", domain, mae(p_real, p_gen)))
        rows.append(("jsd", domain, jsd(p_real, p_gen)))
        rows.append(("m_tv", domain, m_tv(p_real, p_gen)))
        rows.append(("crps", domain, crps_popularity(gen_mat, p_real)))
    return tuple(rows)


def _load_eval_corpora(cfg, paths, allow):
    _verify_hash(paths["test"], _text_hash(paths["test"]), cfg.stage_hash("world"), allow)
    found = _file_header(paths["generated"])
    _verify_hash(
        paths["generated"], found.get("config"), cfg.stage_hash("generate"), allow
    )
    real_seqs, _ = read_dataset(paths["test"])
    gen_seqs, _ = read_dataset(paths["generated"])
    return real_seqs, gen_seqs


def cmd_evaluate(cfg, force, allow):
    paths = _paths(cfg)
    _require(paths["checkpoint"], "missing-checkpoint", "run 'appgen train' first")
    _require(paths["test"], "missing-dataset", "run 'appgen gen-world' first")
    _require(paths["generated"], "missing-generated", "run 'appgen generate' first")
    reports = paths["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / _METRICS_FILE
    if not _should_build("evaluate", [(out, _text_hash)], cfg.stage_hash("eval"), force):
        return
    _verify_hash(
        paths["checkpoint"],
        _checkpoint_hash(paths["checkpoint"]),
        cfg.stage_hash("model"),
        allow,
    )
    real_seqs, gen_seqs = _load_eval_corpora(cfg, paths, allow)
    report = EvalReport(
        header={
            "config": cfg.stage_hash("eval"),
            "variant": cfg["generate.variant"],
            "version": __version__,
        },
        rows=_metric_rows(cfg, real_seqs, gen_seqs),
    )
    write_report(report, out)
    print(f"[evaluate] wrote {out} ({len(report.rows)} rows)")


def cmd_report(cfg, force, allow):
    paths = _paths(cfg)
    _require(paths["test"], "missing-dataset", "run 'appgen gen-world' first")
    _require(paths["generated"], "missing-generated", "run 'appgen generate' first")
    reports = paths["reports"]
    reports.mkdir(parents=True, exist_ok=True)
    names = (
        _METRICS_FILE,
        "hourly_real.tsv",
        "hourly_generated.tsv",
        "hourly_correlation.tsv",
        "itemsets_real.tsv",
        "itemsets_generated.tsv",
        "itemset_agreement.tsv",
        "clustering.tsv",
    )
    outputs = [(reports / name, _text_hash) for name in names]
    if not _should_build("report", outputs, cfg.stage_hash("eval"), force):
        return
    real_seqs, gen_seqs = _load_eval_corpora(cfg, paths, allow)
    header = {"config": cfg.stage_hash("eval"), "variant": cfg["generate.variant"]}

    report = EvalReport(
        header={**header, "version": __version__},
        rows=_metric_rows(cfg, real_seqs, gen_seqs),
    )
    write_report(report, reports / _METRICS_FILE)

    offset = cfg["model.utc_offset"]
    prof_real = hourly_profiles(real_seqs, offset)
    prof_gen = hourly_profiles(gen_seqs, offset)
    for name, profiles in (
        ("hourly_real.tsv", prof_real),
        ("hourly_generated.tsv", prof_gen),
    ):
        rows = [
            (cat, hour, float(profiles[cat].counts[hour]))
            for cat in sorted(profiles)
            for hour in range(24)
        ]
        _write_table(reports / name, header, ("category", "hour", "share"), rows)
    corr = hourly_profile_correlation(prof_real, prof_gen)
    _write_table(
        reports / "hourly_correlation.tsv",
        header,
        ("category", "spearman"),
        [(cat, corr[cat]) for cat in sorted(corr)],
    )

    support = cfg["eval.min_support"]
    table_real = apriori(transactions_from(real_seqs), support)
    table_gen = apriori(transactions_from(gen_seqs), support)
    for name, table in (
        ("itemsets_real.tsv", table_real),
        ("itemsets_generated.tsv", table_gen),
    ):
        rows = [
            ("+".join(str(a) for a in antecedent), consequent, support_)
            for antecedent, consequent, support_ in table.rows
        ]
        _write_table(
            reports / name, header, ("antecedent", "consequent", "support"), rows
        )
    overlap, rho = itemset_agreement(table_real, table_gen, cfg["eval.top_m"])
    _write_table(
        reports / "itemset_agreement.tsv",
        header,
        ("measure", "value"),
        [("overlap", float(overlap)), ("spearman", float(rho))],
    )

    k = cfg["eval.clusters"]
    ari = location_cluster_agreement(
        real_seqs,
        gen_seqs,
        cfg["world.num_stations"],
        k_clusters=k,
        seed=cfg.stage_seed("clustering"),
    )
    _write_table(
        reports / "clustering.tsv",
        header,
        ("k_clusters", "ari"),
        [(k, float(ari))],
    )
    print(f"[report] wrote {len(names)} files under {reports}")


def cmd_pipeline(cfg, force, allow):
    for stage in (
        cmd_gen_world,
        cmd_train_encoders,
        cmd_train,
        cmd_generate,
        cmd_evaluate,
        cmd_report,
    ):
        stage(cfg, force, allow)


_DISPATCH = {
    "gen-world": cmd_gen_world,
    "train-encoders": cmd_train_encoders,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="appgen",
        description="Synthesize and evaluate mobility-conditioned app-usage data.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "overrides",
        nargs="*",
        metavar="key=value",
        help="config overrides, e.g. world.num_users=50",
    )
    parser.add_argument("--config", default=None, help="path to a key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument(
        "--variant", default=None, help="ablation variant for generation"
    )
    parser.add_argument("--run-dir", default=None, help="override paths.run_dir")
    parser.add_argument(
        "--force", action="store_true", help="rebuild outputs that already exist"
    )
    parser.add_argument(
        "--allow-hash-mismatch",
        action="store_true",
        help="consume input artifacts from a different config",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        # intermixed so overrides may follow flags: appgen train --force k=v
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(1)  # bitwise-reproducible pipelines
    try:
        overrides = list(args.overrides)
        if args.run_dir is not None:
            overrides.append(f"paths.run_dir={args.run_dir}")
        if args.variant is not None:
            overrides.append(f"generate.variant={args.variant}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(
            args.config, overrides, env_seed=os.environ.get("APPGEN_SEED")
        )
        _DISPATCH[args.command](cfg, args.force, args.allow_hash_mismatch)
    except ConfigError as exc:
        print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
        return 2
    except AppGenError as exc:
        print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
