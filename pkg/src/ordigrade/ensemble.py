"""TTA inference, trimmed-mean pooling over (model, fold, TTA) and grade rounding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .augment import Transform, apply, tta_set
from .nn import REG_MAX, ThreeHeadModel, load_checkpoint
from .preprocess import resize

GRADE_CAP = 4.499


class InferenceError(RuntimeError):
    pass


def trimmed_mean(values, q: float = 0.25) -> float:
    """Mean after dropping ``floor(q * n)`` values from each end of the sorted list."""
    if not 0.0 <= q < 0.5:
        raise ValueError("trim fraction must lie in [0, 0.5)")
    vals = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = vals.size
    if n == 0:
        raise ValueError("trimmed mean of an empty list")
    cut = int(math.floor(q * n))
    return float(vals[cut:n - cut].mean())


def round_to_grade(value) -> int:
    """Clamp to [0, 4.499] and round half away from zero."""
    value = float(value)
    if math.isnan(value):
        raise ValueError("cannot round NaN to a grade")
    value = min(max(value, 0.0), GRADE_CAP)
    return int(math.floor(value + 0.5))


def clamp_fused(x):
    return np.clip(x, 0.0, REG_MAX)


def predict_batch(model: ThreeHeadModel, images, tta, batch_size: int = 256) -> np.ndarray:
    """Clamped fused outputs, shape ``(n_images, len(tta))``."""
    images = np.asarray(images, dtype=np.float64)
    if tuple(images.shape[1:]) != model.input_shape:
        if images.shape[1] != model.input_shape[0]:
            raise ValueError(f"image shape {images.shape[1:]} incompatible with model input {model.input_shape}")
        images = np.stack([resize(im, model.input_shape[1:]) for im in images])
    out = np.empty((len(images), len(tta)))
    for j, t in enumerate(tta):
        aug = np.stack([apply(t, im) for im in images]) if t.kind != "identity" else images
        for start in range(0, len(aug), batch_size):
            res, _ = model.forward(aug[start:start + batch_size], mode="eval")
            out[start:start + batch_size, j] = clamp_fused(res.fused)
    return out


def predict_one(model: ThreeHeadModel, image, tta=None) -> list:
    """One clamped fused scalar per TTA transform for a single (3, H, W) image."""
    tta = tta_set([]) if tta is None else tta
    return predict_batch(model, np.asarray(image)[None], tta)[0].tolist()


@dataclass
class PredictionRecord:
    sample_id: str
    raw: list
    tags: list
    aggregated: float
    grade: int


@dataclass
class EnsembleConfig:
    """``models`` holds checkpoint paths or in-memory models."""

    models: list
    tta: list = field(default_factory=lambda: tta_set())
    trim: float = 0.25
    rounding: str = "half_away"

    def __post_init__(self):
        if not 0.0 <= self.trim < 0.5:
            raise ValueError("trim fraction must lie in [0, 0.5)")
        if self.rounding != "half_away":
            raise ValueError(f"unsupported rounding rule {self.rounding!r}")
        if not self.models:
            raise ValueError("ensemble needs at least one model")


def _member_name(model, index):
    meta = model.meta
    return str(meta.get("name", meta.get("arch", f"m{index}"))), meta.get("fold", "")


def load_members(models) -> list:
    loaded = []
    for m in models:
        if isinstance(m, ThreeHeadModel):
            loaded.append(m)
            continue
        path = Path(m)
        if not path.exists():
            raise InferenceError(f"missing checkpoint: {path}")
        loaded.append(load_checkpoint(path))
    return loaded


def ensemble_predict(config: EnsembleConfig, dataset, with_metrics=True, mode=metrics.FIVE_CLASS):
    """Pool every member's TTA predictions per sample with a trimmed mean.

    Returns the per-sample records and, when the dataset carries grades and
    ``with_metrics`` is set, a :class:`~ordigrade.metrics.MetricsReport`.
    """
    members = load_members(config.models)
    images = dataset.images()
    columns, tags = [], []
    for idx, model in enumerate(members):
        name, fold = _member_name(model, idx)
        columns.append(predict_batch(model, images, config.tta))
        tags.extend(f"{name}/{fold}/{t.label}" for t in config.tta)
    raw = np.concatenate(columns, axis=1)
    records = []
    for i, sample_id in enumerate(dataset.ids):
        agg = trimmed_mean(raw[i], config.trim)
        records.append(PredictionRecord(sample_id, raw[i].tolist(), tags, agg, round_to_grade(agg)))
    rep = None
    if with_metrics and getattr(dataset, "labelled", True):
        rep = metrics.report(dataset.grades, [r.grade for r in records], mode)
    return records, rep


def write_predictions(records, path, emit_raw: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    header = ["id", "aggregated", "grade"]
    if emit_raw and records:
        header += [f"raw_{j}[{tag}]" for j, tag in enumerate(records[0].tags)]
    lines.append(",".join(header))
    for r in records:
        row = [r.sample_id, repr(float(r.aggregated)), str(r.grade)]
        if emit_raw:
            row += [repr(float(v)) for v in r.raw]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
