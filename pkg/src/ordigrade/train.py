"""Three-stage training: pretrain, per-fold main training, fusion post-training.

Every random stream is derived from ``(seed, stage, fold, epoch)`` so folds can
run in any order, or in parallel, and still reproduce bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .augment import AugmentPolicy, sample_augmentation, tta_set
from .data import Dataset, FoldSplit
from .ensemble import EnsembleConfig, clamp_fused, ensemble_predict
from .losses import MAIN_LOSSES, PRETRAIN_LOSSES, SmoothingConfig, StageLossSet, mse, stage_loss
from .nn import HEADS, ThreeHeadModel
from .optim import DecayConfig, LrSchedule, lr_at, make_optimizer

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "main", "posttrain")
_STAGE_CODE = {"pretrain": 1, "main": 2, "posttrain": 3}
DEFAULT_SMOOTHING = SmoothingConfig(eps_cls=0.1, eps_ord=0.1, reg_halfwidth=1.0 / 3.0)


class ProtocolError(RuntimeError):
    """A stage was asked to run in a state the training protocol forbids."""


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    optimizer: str = "sgd"
    lr_max: float = 0.1
    lr_min: float = 1e-5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    losses: StageLossSet = PRETRAIN_LOSSES
    smoothing: SmoothingConfig = DEFAULT_SMOOTHING
    encoder_freeze_epochs: int = 0
    batch_size: int = 32
    seed: int = 0
    augment: AugmentPolicy | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.encoder_freeze_epochs < 0:
            raise ValueError("encoder_freeze_epochs must be non-negative")

    def replace(self, **kw) -> "StageConfig":
        return dataclasses.replace(self, **kw)


def pretrain_config(**kw) -> StageConfig:
    base = dict(stage="pretrain", epochs=20, optimizer="sgd", lr_max=0.05, momentum=0.9,
                losses=PRETRAIN_LOSSES, augment=AugmentPolicy())
    base.update(kw)
    return StageConfig(**base)


def main_config(**kw) -> StageConfig:
    base = dict(stage="main", epochs=75, optimizer="radam", lr_max=3e-3,
                losses=MAIN_LOSSES, encoder_freeze_epochs=5, augment=AugmentPolicy())
    base.update(kw)
    return StageConfig(**base)


def posttrain_config(**kw) -> StageConfig:
    base = dict(stage="posttrain", epochs=5, optimizer="sgd", lr_max=0.05, lr_min=0.05,
                momentum=0.0, weight_decay=0.0, smoothing=SmoothingConfig(), augment=None)
    base.update(kw)
    return StageConfig(**base)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (3, 64, 64)
    encoder_specs: list | None = None
    head_specs: list | None = None
    seed: int = 0
    name: str = "desk"

    def build(self) -> ThreeHeadModel:
        return ThreeHeadModel(self.input_shape, self.encoder_specs, self.head_specs, seed=self.seed,
                              meta={"name": self.name})


@dataclass
class EpochLog:
    epoch: int
    stage: str
    fold: str
    train_loss: float
    val_qwk: float | None
    lr: float

    def csv(self) -> str:
        val = "" if self.val_qwk is None else f"{self.val_qwk:.10f}"
        return f"{self.epoch},{self.stage},{self.fold},{self.train_loss:.10f},{val},{self.lr:.10g}"


MANIFEST_HEADER = "epoch,stage,fold,train_loss,val_qwk,lr"


@dataclass
class RunManifest:
    stage: str
    fold: str
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    audit: list = field(default_factory=list)  # (stage, fold, epoch, batch ids)
    encoder_hashes: list = field(default_factory=list)  # after each epoch
    best_epoch: int | None = None

    def to_csv(self, header=True) -> str:
        lines = [MANIFEST_HEADER] if header else []
        lines += [r.csv() for r in self.rows]
        return "\n".join(lines) + "\n"

    def trained_ids(self) -> set:
        return {i for entry in self.audit for i in entry[3]}


def _fold_tag(fold):
    return "all" if fold is None else str(fold)


def _stream(cfg: StageConfig, fold, *extra):
    return np.random.default_rng([cfg.seed, _STAGE_CODE[cfg.stage], 0 if fold is None else fold + 1, *extra])


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _optimizer(cfg: StageConfig):
    decay = DecayConfig(cfg.weight_decay)
    return make_optimizer(cfg.optimizer, decay, momentum=cfg.momentum, beta1=cfg.beta1,
                          beta2=cfg.beta2, eps=cfg.eps)


def predict_fused(model, images, batch_size=256) -> np.ndarray:
    out = np.empty(len(images))
    for start in range(0, len(images), batch_size):
        res, _ = model.forward(images[start:start + batch_size], mode="eval")
        out[start:start + batch_size] = res.fused
    return out


def fused_to_grades(fused) -> np.ndarray:
    return np.floor(np.clip(clamp_fused(fused), 0.0, 4.499) + 0.5).astype(np.int64)


def _run_epochs(model, dataset, cfg, fold, manifest, val=None, freeze_schedule=False):
    """Shared minibatch loop for pretraining and main training."""
    images, grades, ids = dataset.images(), dataset.grades, dataset.ids
    n = len(ids)
    opt = _optimizer(cfg)
    sched = LrSchedule(cfg.lr_max, cfg.lr_min, max(cfg.epochs, 1))
    policy = cfg.augment
    if policy is not None:
        fold_code = -1 if fold is None else fold
        policy = dataclasses.replace(policy, seed=_derived_seed(policy.seed, cfg.seed, _STAGE_CODE[cfg.stage],
                                                                fold_code + 1))
    best = (-np.inf, None, None)
    call_index = 0
    for epoch in range(cfg.epochs):
        if freeze_schedule:
            model.set_frozen("encoder", epoch < cfg.encoder_freeze_epochs)
        lr = lr_at(sched, epoch)
        rng = _stream(cfg, fold, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = images[idx]
            if policy is not None:
                batch = np.stack([sample_augmentation(policy, im, call_index + k) for k, im in enumerate(batch)])
                call_index += len(idx)
            out, cache = model.forward(batch, mode="train", rng=rng)
            loss, head_grads, _ = stage_loss(out, grades[idx], cfg.losses, cfg.smoothing, rng)
            grads = model.backward(cache, head_grads)
            opt.step(model.parameters(), grads, lr)
            manifest.audit.append((cfg.stage, _fold_tag(fold), epoch, tuple(ids[i] for i in idx)))
            total += loss * len(idx)
        val_qwk = None
        if val is not None:
            val_images, val_grades = val
            pred = fused_to_grades(predict_fused(model, val_images))
            val_qwk = metrics.qwk(val_grades, pred)
            if val_qwk > best[0]:
                best = (val_qwk, epoch, model.snapshot())
        manifest.rows.append(EpochLog(epoch, cfg.stage, _fold_tag(fold), total / n, val_qwk, lr))
        manifest.encoder_hashes.append(model.block_hash("encoder"))
        logger.info("%s fold=%s epoch=%d loss=%.4f val_qwk=%s lr=%.3g", cfg.stage, _fold_tag(fold),
                    epoch, total / n, val_qwk, lr)
    return best


def pretrain(model: ThreeHeadModel, dataset: Dataset, cfg: StageConfig, checkpoint_dir=None,
             fit_input_norm: bool = True):
    """Train encoder and heads on the source domain; fusion stays frozen.

    With ``fit_input_norm`` the model's fixed input standardisation is set from
    the source images first; later stages keep it unchanged.
    """
    if cfg.stage != "pretrain":
        raise ProtocolError(f"pretrain called with a {cfg.stage!r} config")
    if len(dataset) == 0:
        raise ValueError("pretraining dataset is empty")
    if fit_input_norm:
        model.fit_input_norm(dataset.images())
    model.freeze_all_but("encoder", *HEADS)
    manifest = RunManifest("pretrain", "all", config=_config_dict(cfg))
    _run_epochs(model, dataset, cfg, None, manifest)
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "stage_pretrain_fold_all.ckpt"
        model.save(path)
        manifest.checkpoints.append(str(path))
    return model, manifest


def main_train(pretrained: ThreeHeadModel, dataset: Dataset, split: FoldSplit, fold: int, cfg: StageConfig,
               checkpoint_dir=None):
    """Fine-tune on all folds but ``fold`` and keep the best-validation-QWK epoch.

    Heads are re-initialised before the first epoch; the encoder is frozen for
    ``cfg.encoder_freeze_epochs`` epochs.
    """
    if cfg.stage != "main":
        raise ProtocolError(f"main_train called with a {cfg.stage!r} config")
    if not 0 <= fold < split.n_folds:
        raise IndexError(f"fold {fold} out of range for {split.n_folds} folds")
    model = pretrained.copy().reinit_heads(_derived_seed(cfg.seed, fold, 7))
    model.freeze_all_but("encoder", *HEADS)
    model.meta = dict(model.meta, fold=fold)
    train_ds = dataset.subset(split.train_ids(fold))
    val_ds = dataset.subset(split.fold_ids(fold))
    leaked = set(train_ds.ids) & split.holdout_ids
    if leaked:
        raise ProtocolError(f"holdout ids in training set: {sorted(leaked)[:5]}")
    manifest = RunManifest("main", str(fold), config=_config_dict(cfg))
    best_qwk, best_epoch, best_state = _run_epochs(
        model, train_ds, cfg, fold, manifest, val=(val_ds.images(), val_ds.grades), freeze_schedule=True)
    model.set_frozen("encoder", False)
    if best_state is not None:
        model.load_parameters(best_state)
        manifest.best_epoch = best_epoch
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"stage_main_fold_{fold}.ckpt"
        model.save(path)
        manifest.checkpoints.append(str(path))
    return model, manifest


def posttrain_fusion(model: ThreeHeadModel, dataset: Dataset, cfg: StageConfig | None = None, fold=None,
                     checkpoint_dir=None):
    """Fit only the fusion weights by full-batch gradient descent on MSE.

    All non-fusion blocks must already be frozen. Each epoch is one gradient
    step over every sample in ``dataset``.
    """
    cfg = cfg or posttrain_config()
    if cfg.stage != "posttrain":
        raise ProtocolError(f"posttrain_fusion called with a {cfg.stage!r} config")
    live = [b for b in ("encoder", *HEADS) if not model.frozen[b]]
    if live:
        raise ProtocolError(f"post-training requires frozen non-fusion blocks; unfrozen: {live}")
    model.set_frozen("fusion", False)
    images, grades = dataset.images(), dataset.grades.astype(np.float64)
    manifest = RunManifest("posttrain", _fold_tag(fold), config=_config_dict(cfg))
    opt = _optimizer(cfg)
    sched = LrSchedule(cfg.lr_max, cfg.lr_min, max(cfg.epochs, 1))
    params = model.parameters("fusion")
    for epoch in range(cfg.epochs):
        lr = lr_at(sched, epoch)
        grads = {"fusion.w": np.zeros(3), "fusion.b": np.zeros(1)}
        total = 0.0
        for start in range(0, len(images), 256):
            out, cache = model.forward(images[start:start + 256], mode="eval")
            y = grades[start:start + 256]
            loss, _ = mse(out.fused, y)
            # full-batch mean: rescale the chunk gradient by chunk / total size
            d_fused = 2.0 * (out.fused - y) / len(images)
            g = model.backward(cache, {"fused": d_fused})
            for k in grads:
                grads[k] += g[k]
            total += loss * len(y)
            manifest.audit.append(("posttrain", _fold_tag(fold), epoch, tuple(dataset.ids[start:start + 256])))
        opt.step(params, grads, lr)
        manifest.rows.append(EpochLog(epoch, "posttrain", _fold_tag(fold), total / len(images), None, lr))
        manifest.encoder_hashes.append(model.block_hash("encoder"))
    model.set_frozen("fusion", True)
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"stage_posttrain_fold_{_fold_tag(fold)}.ckpt"
        model.save(path)
        manifest.checkpoints.append(str(path))
    return model, manifest


def fusion_features(model, dataset) -> np.ndarray:
    """(n, 3) head scalars in eval mode, the design matrix the fusion is fitted on."""
    images = dataset.images()
    rows = []
    for start in range(0, len(images), 256):
        out, _ = model.forward(images[start:start + 256], mode="eval")
        rows.append(out.head_scalars())
    return np.concatenate(rows)


def _config_dict(cfg: StageConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["augment"] = None if cfg.augment is None else cfg.augment.to_config()
    return d


# -- cross-validation ----------------------------------------------------------

@dataclass(frozen=True)
class StageConfigs:
    pretrain: StageConfig = field(default_factory=pretrain_config)
    main: StageConfig = field(default_factory=main_config)
    posttrain: StageConfig = field(default_factory=posttrain_config)


@dataclass
class CVResult:
    pretrained: ThreeHeadModel
    fold_models: dict
    manifests: list
    summary: dict

    def manifest_csv(self) -> str:
        return MANIFEST_HEADER + "\n" + "".join(m.to_csv(header=False) for m in self.manifests)


def _train_fold(pretrained, dataset, split, fold, cfgs, checkpoint_dir):
    model, man_main = main_train(pretrained, dataset, split, fold, cfgs.main, checkpoint_dir)
    model.freeze_all_but()
    fit_ds = dataset.subset(split.train_ids(fold))
    model, man_post = posttrain_fusion(model, fit_ds, cfgs.posttrain, fold, checkpoint_dir)
    return fold, model, man_main, man_post


def run_cv(datasets, split: FoldSplit, cfgs: StageConfigs = StageConfigs(), model_cfg: ModelConfig = ModelConfig(),
           folds=None, output_dir=None, jobs: int = 1, tta=None, trim: float = 0.25, pretrained=None):
    """Pretrain once, then main training and fusion fit per fold, then holdout scoring.

    Parameters
    ----------
    datasets : (Dataset, Dataset)
        Source-domain pretraining set and target-domain set; ``split`` indexes the latter.
    folds : iterable of int, optional
        Subset of folds to train (default all).
    tta : list of Transform, optional
        TTA set for the holdout ensemble (default :func:`~ordigrade.augment.tta_set`).
    pretrained : ThreeHeadModel, optional
        Skip pretraining and start from this model.
    """
    source, target = datasets
    folds = list(range(split.n_folds)) if folds is None else sorted(folds)
    for f in folds:
        if not 0 <= f < split.n_folds:
            raise IndexError(f"fold {f} out of range for {split.n_folds} folds")
    ckpt_dir = Path(output_dir) if output_dir is not None else None
    manifests = []
    if pretrained is None:
        pretrained, man = pretrain(model_cfg.build(), source, cfgs.pretrain, ckpt_dir)
        manifests.append(man)
    results = {}
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_train_fold, pretrained, target, split, f, cfgs, ckpt_dir) for f in folds]
            for fut in futs:
                f, model, m1, m2 = fut.result()
                results[f] = (model, m1, m2)
    else:
        for f in folds:
            try:
                _, model, m1, m2 = _train_fold(pretrained, target, split, f, cfgs, ckpt_dir)
            except Exception as exc:
                raise RuntimeError(f"fold {f}: {exc}") from exc
            results[f] = (model, m1, m2)
    fold_models = {}
    val_qwks = []
    for f in folds:
        model, m1, m2 = results[f]
        fold_models[f] = model
        manifests.extend([m1, m2])
        val_qwks.append(max(r.val_qwk for r in m1.rows) if m1.rows else float("nan"))

    summary = {"val_qwk": val_qwks, "val_qwk_mean": float(np.mean(val_qwks)) if val_qwks else float("nan"),
               "val_qwk_std": float(np.std(val_qwks)) if val_qwks else float("nan"), "holdout": {},
               "holdout_eval_ids": []}
    if split.holdout_ids:
        holdout = target.subset(split.holdout_ids)
        summary["holdout_eval_ids"] = holdout.ids
        single = {}
        for f, model in fold_models.items():
            _, rep = ensemble_predict(EnsembleConfig([model], tta_set([]), trim=0.0), holdout)
            single[f] = rep
        members = [fold_models[f] for f in folds]
        _, ens_plain = ensemble_predict(EnsembleConfig(members, tta_set([]), trim=trim), holdout)
        ens_cfg = EnsembleConfig(members, tta_set() if tta is None else tta, trim=trim)
        records, ens = ensemble_predict(ens_cfg, holdout)
        screening = metrics.report(holdout.grades, [r.grade for r in records], metrics.BINARY_SCREENING)
        summary["holdout"] = {"folds": single, "ensemble_no_tta": ens_plain, "ensemble": ens,
                              "ensemble_screening": screening, "ensemble_records": records}
    return CVResult(pretrained, fold_models, manifests, summary)
