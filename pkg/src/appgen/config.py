"""Flat key=value run configuration with section prefixes.

One ``RunConfig`` drives every pipeline stage.  All keys carry defaults, so
an empty file (or none at all) is a complete desk-scale configuration;
unknown keys are rejected rather than ignored.  The sha-256 hash of the
fully resolved mapping is embedded in every artifact for provenance.
"""

from dataclasses import dataclass

from .corpus import WorldSpec, parse_rules
from .errors import ConfigError
from .model import config_hash
from .validation import derive_seed

# key -> (default, parser).  Parsers double as the type registry; values in
# a file or override are strings until the parser runs.
_FIELDS = {
    "seed": (0, int),
    "world.num_users": (40, int),
    "world.num_apps": (12, int),
    "world.num_stations": (12, int),
    "world.num_regions": (4, int),
    "world.num_business_areas": (2, int),
    "world.num_pois": (24, int),
    "world.num_categories": (4, int),
    "world.horizon_days": (4, int),
    "world.mean_sessions_per_day": (2.5, float),
    "world.mean_events_per_session": (5.0, float),
    "world.rules": ("", str),
    "split.train": (0.7, float),
    "split.val": (0.1, float),
    "split.test": (0.2, float),
    "encoders.app_dim": (32, int),
    "encoders.app_window": (5, int),
    "encoders.app_negatives": (5, int),
    "encoders.app_epochs": (5, int),
    "encoders.app_lr": (0.025, float),
    "encoders.location_dim": (32, int),
    "encoders.relation_dim": (32, int),
    "encoders.kg_epochs": (200, int),
    "encoders.kg_lr": (0.01, float),
    "encoders.kg_negatives": (5, int),
    "model.attn_dim": (64, int),
    "model.channels": (16, int),
    "model.num_steps": (50, int),
    "model.beta_start": (1e-4, float),
    "model.beta_end": (0.2, float),
    "model.lambda_alpha": (0.8, float),
    "model.learning_rate": (1e-3, float),
    "model.batch_size": (128, int),
    "model.epochs": (30, int),
    "model.window": (5, int),
    "model.utc_offset": (0, int),
    "generate.variant": ("full", str),
    "eval.min_support": (0.1, float),
    "eval.top_m": (10, int),
    "eval.clusters": (4, int),
    "paths.run_dir": ("runs/default", str),
    "paths.dataset": ("dataset.tsv", str),
    "paths.checkpoint": ("model.ckpt", str),
    "paths.reports": ("report", str),
}


# cumulative dependency sets: each stage sees its predecessors' keys too
_STAGE_PREFIXES = {
    "world": ("world.", "split."),
    "encoders": ("world.", "split.", "encoders."),
    "model": ("world.", "split.", "encoders.", "model."),
    "generate": ("world.", "split.", "encoders.", "model.", "generate."),
    "eval": ("world.", "split.", "encoders.", "model.", "generate.", "eval."),
}


def _parse_value(key, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    _, parser = _FIELDS[key]
    if parser is str:
        return raw
    try:
        return parser(raw)
    except ValueError:
        raise ConfigError(
            f"config value for {key!r} must be {parser.__name__}, got {raw!r}"
        ) from None


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration: every known key mapped to a typed value."""

    values: dict

    def __post_init__(self):
        unknown = set(self.values) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {k: self.values.get(k, d) for k, (d, _) in _FIELDS.items()}
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(
                        f"{path} line {lineno}: expected key=value, got {line!r}"
                    )
                key, raw = (part.strip() for part in line.split("=", 1))
                if key in values:
                    raise ConfigError(f"{path} line {lineno}: duplicate key {key!r}")
                values[key] = _parse_value(key, raw)
        return cls(values)

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings on top of this config."""
        values = dict(self.values)
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            key, raw = (part.strip() for part in pair.split("=", 1))
            values[key] = _parse_value(key, raw)
        return RunConfig(values)

    def with_seed(self, seed: int) -> "RunConfig":
        values = dict(self.values)
        values["seed"] = int(seed)
        return RunConfig(values)

    def hashed_values(self) -> dict:
        """The provenance-relevant subset: everything except paths.

        Where artifacts live does not change what they contain.
        """
        return {k: v for k, v in self.values.items() if not k.startswith("paths.")}

    @property
    def hash(self) -> str:
        return config_hash(self.hashed_values())

    def stage_hash(self, stage: str) -> str:
        """Hash of only the keys a pipeline stage's outputs depend on.

        Stages nest (world < encoders < model < generate < eval), so a
        change upstream invalidates everything downstream, while e.g.
        switching the generation variant leaves dataset, embeddings, and
        checkpoint hashes untouched.
        """
        if stage not in _STAGE_PREFIXES:
            raise ConfigError(f"unknown stage {stage!r}")
        prefixes = _STAGE_PREFIXES[stage]
        subset = {
            k: v
            for k, v in self.values.items()
            if k == "seed" or k.split(".", 1)[0] + "." in prefixes
        }
        return config_hash(subset)

    def to_lines(self) -> list[str]:
        return [f"{key}={self.values[key]}" for key in sorted(self.values)]

    # stage-specific sub-seeds all descend from the single global seed
    def stage_seed(self, *tokens) -> int:
        return derive_seed(self["seed"], *tokens)

    def world_spec(self) -> WorldSpec:
        return WorldSpec(
            seed=self.stage_seed("world"),
            num_users=self["world.num_users"],
            num_apps=self["world.num_apps"],
            num_stations=self["world.num_stations"],
            num_regions=self["world.num_regions"],
            num_business_areas=self["world.num_business_areas"],
            num_pois=self["world.num_pois"],
            num_categories=self["world.num_categories"],
            horizon_days=self["world.horizon_days"],
            mean_sessions_per_day=self["world.mean_sessions_per_day"],
            mean_events_per_session=self["world.mean_events_per_session"],
            planted_rules=parse_rules(self["world.rules"]),
        )

    def split_ratios(self):
        return (self["split.train"], self["split.val"], self["split.test"])


def load_config(path=None, overrides=(), env_seed=None) -> RunConfig:
    """Resolve defaults -> file -> overrides -> environment seed."""
    cfg = RunConfig.default() if path is None else RunConfig.from_file(path)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if env_seed is not None:
        try:
            cfg = cfg.with_seed(int(env_seed))
        except ValueError:
            raise ConfigError(
                f"APPGEN_SEED must be an integer, got {env_seed!r}"
            ) from None
    return cfg
