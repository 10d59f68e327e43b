"""YAML run configuration: one file per run, validated in full before anything is written.

Example::

    seed: 0
    output_dir: runs/desk
    data:
      pretrain: {synthetic: {n: 2000}}
      main: {synthetic: {n: 1000}}
      n_folds: 5
      holdout_fraction: 0.2
    augment: {min_applied: 1}
    model: {input_shape: [3, 64, 64], variants: 1}
    stages:
      pretrain: {epochs: 20}
      main: {epochs: 30}
      posttrain: {epochs: 5}
    ensemble: {tta: [hflip, vflip, transpose, rotate, zoom], trim: 0.25}
    metrics: {mode: five_class}

Each ``data`` domain is either ``synthetic`` (generator overrides, written under
``output_dir`` by ``gen-data``) or ``csv`` (``labels``, optional ``images`` and
``schema``) pointing at an existing labelled image folder.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import data as D
from . import metrics
from .augment import AugmentPolicy, tta_set
from .losses import SmoothingConfig, StageLossSet
from .preprocess import PreprocessConfig
from .train import ModelConfig, StageConfigs, main_config, posttrain_config, pretrain_config

SEED_ENV = "ORDIGRADE_SEED"
DOMAINS = ("pretrain", "main")


class ConfigError(ValueError):
    """Invalid run configuration."""


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}; allowed {sorted(allowed)}")


@dataclass(frozen=True)
class DomainSource:
    tag: str
    synthetic: D.SyntheticConfig | None = None
    labels: Path | None = None
    images: Path | None = None
    schema: tuple = D.APTOS_SCHEMA
    preprocess: PreprocessConfig | None = None

    @property
    def is_synthetic(self) -> bool:
        return self.synthetic is not None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: Path
    domains: dict
    n_folds: int = 5
    holdout_fraction: float = 0.2
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    variants: int = 1
    stages: StageConfigs = field(default_factory=StageConfigs)
    tta: tuple = ()
    trim: float = 0.25
    rounding: str = "half_away"
    metrics_mode: str = metrics.FIVE_CLASS
    jobs: int = 1
    source_path: Path | None = None

    # artifact locations, all under output_dir
    def data_dir(self, tag: str) -> Path:
        return self.output_dir / "data" / tag

    def checkpoint_dir(self, variant: int) -> Path:
        return self.output_dir / "checkpoints" / self.variant_name(variant)

    def variant_name(self, variant: int) -> str:
        return self.model.name if self.variants == 1 else f"{self.model.name}{variant}"

    def variant_model(self, variant: int) -> ModelConfig:
        return dataclasses.replace(self.model, seed=self.model.seed + variant, name=self.variant_name(variant))

    def tta_transforms(self, enabled: bool = True):
        return tta_set(list(self.tta)) if enabled else tta_set([])

    def inside_output(self, path) -> Path:
        p = Path(path)
        p = (self.output_dir / p) if not p.is_absolute() else p
        root = self.output_dir.resolve()
        if root != p.resolve() and root not in p.resolve().parents:
            raise ConfigError(f"{path}: outputs must stay under output_dir {self.output_dir}")
        return p


# -- section parsers -----------------------------------------------------------

SYNTH_KEYS = {f.name for f in dataclasses.fields(D.SyntheticConfig)} - {"domain_tag"}


def _domain(tag: str, section, seed: int, base: Path, image_size: int) -> DomainSource:
    _check_keys(section, {"synthetic", "csv"}, f"data.{tag}")
    if ("synthetic" in section) == ("csv" in section):
        raise ConfigError(f"data.{tag}: give exactly one of 'synthetic' or 'csv'")
    if "synthetic" in section:
        syn = dict(section["synthetic"] or {})
        _check_keys(syn, SYNTH_KEYS, f"data.{tag}.synthetic")
        factory = D.domain_a if tag == "pretrain" else D.domain_b
        syn.setdefault("seed", seed + (0 if tag == "pretrain" else 1))
        syn.setdefault("image_size", image_size)
        if "class_proportions" in syn:
            syn["class_proportions"] = tuple(syn["class_proportions"])
        n = syn.pop("n", 2000 if tag == "pretrain" else 1000)
        defaults = factory(n=n, seed=syn.pop("seed"), image_size=syn.pop("image_size"))
        try:
            cfg = dataclasses.replace(defaults, **syn)
        except (TypeError, D.DataError) as exc:
            raise ConfigError(f"data.{tag}.synthetic: {exc}") from None
        return DomainSource(tag, synthetic=cfg)
    c = dict(section["csv"] or {})
    _check_keys(c, {"labels", "images", "schema", "crop_threshold"}, f"data.{tag}.csv")
    if "labels" not in c:
        raise ConfigError(f"data.{tag}.csv: 'labels' path is required")
    labels = (base / c["labels"]) if not Path(c["labels"]).is_absolute() else Path(c["labels"])
    images = c.get("images")
    images = labels.parent if images is None else (base / images if not Path(images).is_absolute() else Path(images))
    if not labels.is_file():
        raise ConfigError(f"data.{tag}.csv.labels: {labels} does not exist")
    if not images.is_dir():
        raise ConfigError(f"data.{tag}.csv.images: {images} is not a directory")
    schema = tuple(c.get("schema", D.APTOS_SCHEMA))
    if len(schema) != 2:
        raise ConfigError(f"data.{tag}.csv.schema: need [id_column, grade_column]")
    pre = PreprocessConfig(float(c.get("crop_threshold", 7.0 / 255.0)), (image_size, image_size))
    return DomainSource(tag, labels=labels, images=images, schema=schema, preprocess=pre)


STAGE_SCALARS = {"epochs", "optimizer", "lr_max", "lr_min", "momentum", "beta1", "beta2", "eps",
                 "weight_decay", "encoder_freeze_epochs", "batch_size", "seed"}
LOSS_KEYS = {f.name for f in dataclasses.fields(StageLossSet)}
SMOOTH_KEYS = {f.name for f in dataclasses.fields(SmoothingConfig)}


def _stage(name, section, seed, policy):
    section = dict(section or {})
    _check_keys(section, STAGE_SCALARS | {"losses", "smoothing", "augment"}, f"stages.{name}")
    factory = {"pretrain": pretrain_config, "main": main_config, "posttrain": posttrain_config}[name]
    kw = {k: section[k] for k in STAGE_SCALARS if k in section}
    kw.setdefault("seed", seed)
    if "losses" in section:
        _check_keys(section["losses"], LOSS_KEYS, f"stages.{name}.losses")
        base = factory().losses
        kw["losses"] = dataclasses.replace(base, **section["losses"])
    if "smoothing" in section:
        _check_keys(section["smoothing"], SMOOTH_KEYS, f"stages.{name}.smoothing")
        base = factory().smoothing
        kw["smoothing"] = dataclasses.replace(base, **section["smoothing"])
    use_aug = section.get("augment", name != "posttrain")
    if not isinstance(use_aug, bool):
        raise ConfigError(f"stages.{name}.augment must be true or false")
    if name == "posttrain" and use_aug:
        raise ConfigError("stages.posttrain.augment: the fusion fit runs on un-augmented images")
    kw["augment"] = policy if use_aug else None
    if name == "posttrain" and kw.get("optimizer", "sgd") != "sgd":
        raise ConfigError("stages.posttrain.optimizer: the fusion fit uses plain gradient descent ('sgd')")
    return factory(**kw)


def _model(section, seed):
    section = dict(section or {})
    _check_keys(section, {"input_shape", "seed", "name", "variants", "encoder", "head"}, "model")
    shape = tuple(int(v) for v in section.get("input_shape", (3, 64, 64)))
    if len(shape) != 3 or shape[0] != 3 or shape[1] < 8 or shape[2] < 8:
        raise ConfigError(f"model.input_shape must be [3, H>=8, W>=8], got {list(shape)}")
    enc = section.get("encoder")
    head = section.get("head")
    cfg = ModelConfig(shape, [dict(s) for s in enc] if enc else None,
                      [dict(s) for s in head] if head is not None else None,
                      int(section.get("seed", seed)), str(section.get("name", "desk")))
    try:
        cfg.build()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from None
    variants = int(section.get("variants", 1))
    if variants < 1:
        raise ConfigError("model.variants must be at least 1")
    return cfg, variants


def parse_config(raw: dict, base_dir=".", env=None) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a parsed YAML mapping."""
    env = os.environ if env is None else env
    raw = dict(raw or {})
    _check_keys(raw, {"seed", "output_dir", "data", "augment", "model", "stages", "ensemble",
                      "metrics", "jobs"}, "config")
    base = Path(base_dir)
    seed = raw.get("seed", 0)
    if env.get(SEED_ENV) not in (None, ""):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if "output_dir" not in raw:
        raise ConfigError("output_dir is required")
    out = Path(raw["output_dir"])
    out = out if out.is_absolute() else base / out

    try:
        model_cfg, variants = _model(raw.get("model"), seed)
        image_size = model_cfg.input_shape[1]

        data = dict(raw.get("data") or {})
        _check_keys(data, set(DOMAINS) | {"n_folds", "holdout_fraction", "split_seed"}, "data")
        domains = {}
        for tag in DOMAINS:
            domains[tag] = _domain(tag, data.get(tag, {"synthetic": {}}), seed, base, image_size)
        n_folds = int(data.get("n_folds", 5))
        holdout = float(data.get("holdout_fraction", 0.2))
        if n_folds < 2:
            raise ConfigError("data.n_folds must be at least 2")
        if not 0.0 <= holdout < 0.5:
            raise ConfigError("data.holdout_fraction must lie in [0, 0.5)")

        aug = raw.get("augment", {})
        if aug is not None:
            _check_keys(aug, {"min_applied", "candidates", "seed"}, "augment")
            aug = dict(aug)
            aug.setdefault("seed", seed)
            policy = AugmentPolicy.from_config(aug)
        else:
            policy = None

        stages = dict(raw.get("stages") or {})
        _check_keys(stages, {"pretrain", "main", "posttrain"}, "stages")
        if list(stages) != [s for s in ("pretrain", "main", "posttrain") if s in stages]:
            raise ConfigError("stages must be listed in the order pretrain, main, posttrain")
        stage_cfgs = StageConfigs(*(_stage(s, stages.get(s), seed, policy)
                                    for s in ("pretrain", "main", "posttrain")))

        ens = dict(raw.get("ensemble") or {})
        _check_keys(ens, {"tta", "trim", "rounding"}, "ensemble")
        tta = tuple(ens.get("tta", ("hflip", "vflip", "transpose", "rotate", "zoom")))
        tta_set(list(tta))
        trim = float(ens.get("trim", 0.25))
        if not 0.0 <= trim < 0.5:
            raise ConfigError("ensemble.trim must lie in [0, 0.5)")
        rounding = ens.get("rounding", "half_away")
        if rounding != "half_away":
            raise ConfigError("ensemble.rounding: only 'half_away' is supported")

        met = dict(raw.get("metrics") or {})
        _check_keys(met, {"mode"}, "metrics")
        mode = met.get("mode", metrics.FIVE_CLASS)
        if mode not in (metrics.FIVE_CLASS, metrics.BINARY_SCREENING):
            raise ConfigError(f"metrics.mode must be {metrics.FIVE_CLASS!r} or {metrics.BINARY_SCREENING!r}")
        jobs = int(raw.get("jobs", 1))
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(seed, out, domains, n_folds, holdout, int(data.get("split_seed", seed)), model_cfg,
                     variants, stage_cfgs, tta, trim, rounding, mode, jobs)


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(raw, path.parent, env)
    return dataclasses.replace(cfg, source_path=path)


def default_config_text(output_dir="runs/desk") -> str:
    return f"""seed: 0
output_dir: {output_dir}
data:
  pretrain: {{synthetic: {{n: 2000}}}}
  main: {{synthetic: {{n: 1000}}}}
  n_folds: 5
  holdout_fraction: 0.2
augment: {{min_applied: 1}}
model: {{input_shape: [3, 64, 64], variants: 1}}
stages:
  pretrain: {{epochs: 20}}
  main: {{epochs: 30}}
  posttrain: {{epochs: 5}}
ensemble: {{tta: [hflip, vflip, transpose, rotate, zoom], trim: 0.25}}
metrics: {{mode: five_class}}
"""


__all__ = ["ConfigError", "DomainSource", "RunConfig", "SEED_ENV", "default_config_text", "load_config",
           "parse_config"]
