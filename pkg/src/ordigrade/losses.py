"""Per-head losses with gradients w.r.t. raw head scores, plus label smoothing.

Every loss takes raw scores (logits for the classification and ordinal heads,
the unclamped scalar for the regression head) and returns ``(loss, grad)``
where ``loss`` is the batch mean and ``grad`` has the shape of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_GRADES = 5


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def _as_batch(scores, target):
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if scores.shape != target.shape:
        raise ValueError(f"score shape {scores.shape} does not match target shape {target.shape}")
    return scores, target


# -- ordinal encoding ------------------------------------------------------

def encode_ordinal(grade, k: int = N_GRADES) -> np.ndarray:
    """Cumulative bits: ``bits[j] = 1`` iff ``j <= grade``. Works on scalars or arrays."""
    grade = np.asarray(grade)
    return (np.arange(k) <= grade[..., None]).astype(np.float64)


def decode_ordinal(sigmoids, threshold: float = 0.5):
    """Grade from ordinal sigmoids: count above threshold, minus one, clamped to [0, k-1]."""
    s = np.asarray(sigmoids, dtype=np.float64)
    k = s.shape[-1]
    grade = np.clip((s > threshold).sum(axis=-1) - 1, 0, k - 1)
    return int(grade) if grade.ndim == 0 else grade.astype(np.int64)


def one_hot(grades, k: int = N_GRADES) -> np.ndarray:
    return np.eye(k)[np.asarray(grades, dtype=np.int64)]


# -- smoothing -------------------------------------------------------------

def smooth_classification(target, eps: float, k: int = N_GRADES) -> np.ndarray:
    """``(1 - eps) * target + eps / k``; ``target`` is one-hot (or a batch of them)."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    return (1.0 - eps) * np.asarray(target, dtype=np.float64) + eps / k


def smooth_ordinal(bits, eps: float) -> np.ndarray:
    """Binary label smoothing of ordinal bits toward 0.5."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    return (1.0 - eps) * np.asarray(bits, dtype=np.float64) + eps / 2.0


def smooth_regression(target, halfwidth: float, rng: np.random.Generator):
    """Add ``U(-halfwidth, halfwidth)`` noise to discrete regression targets.

    With unit-spaced grades a halfwidth of 1/3 keeps every smoothed target
    strictly closer to its own grade than to a neighbour.
    """
    if not 0.0 < halfwidth < 0.5:
        raise ValueError("halfwidth must lie in (0, 0.5)")
    target = np.asarray(target, dtype=np.float64)
    return target + rng.uniform(-halfwidth, halfwidth, size=target.shape)


# -- classification --------------------------------------------------------

def cross_entropy(logits, target):
    """Softmax cross-entropy; gradient w.r.t. logits is ``(p - t) / n``."""
    z, t = _as_batch(logits, target)
    logp = log_softmax(z)
    n = z.shape[0]
    loss = -(t * logp).sum() / n
    return float(loss), (np.exp(logp) - t) / n


def focal_loss(logits, target, gamma: float = 2.0, alpha: float = 1.0):
    """Softmax focal loss ``-alpha * sum_k t_k (1 - p_k)^gamma log p_k``.

    For a one-hot target this is ``-alpha (1 - p_t)^gamma log p_t``. Soft
    (smoothed) targets are accepted.
    """
    if gamma < 0 or alpha <= 0:
        raise ValueError("focal loss needs gamma >= 0 and alpha > 0")
    z, t = _as_batch(logits, target)
    n = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    one_minus = np.clip(1.0 - p, 0.0, None)
    mod = one_minus ** gamma
    loss = -alpha * (t * mod * logp).sum() / n
    # g_k = p_k * dL/dp_k ; dL/dz_j = g_j - p_j * sum_k g_k
    if gamma == 0:
        g = -alpha * t
    else:
        with np.errstate(divide="ignore"):
            pw = np.where(one_minus > 0, one_minus ** (gamma - 1), 0.0)
        g = alpha * t * (gamma * pw * p * logp - mod)
    grad = g - p * g.sum(axis=-1, keepdims=True)
    return float(loss), grad / n


# -- ordinal ---------------------------------------------------------------

def binary_cross_entropy(logits, target):
    """Mean over batch and components of sigmoid BCE."""
    z, t = _as_batch(logits, target)
    loss = -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z)).mean()
    return float(loss), (sigmoid(z) - t) / z.size


def binary_focal_loss(logits, target, gamma: float = 2.0, alpha: float = 1.0):
    """Sigmoid focal loss averaged over components and batch.

    Per component ``-alpha (1 - q)^gamma log q`` with ``q = sigma`` when the bit
    is 1 and ``1 - sigma`` when it is 0; soft targets interpolate the two terms.
    """
    if gamma < 0 or alpha <= 0:
        raise ValueError("focal loss needs gamma >= 0 and alpha > 0")
    z, t = _as_batch(logits, target)
    s = sigmoid(z)
    ls, l1s = log_sigmoid(z), log_sigmoid(-z)
    pos = (1.0 - s) ** gamma
    neg = s ** gamma
    loss = -alpha * (t * pos * ls + (1.0 - t) * neg * l1s).mean()
    d_pos = pos * ((1.0 - s) - gamma * s * ls)
    d_neg = neg * (gamma * (1.0 - s) * l1s - s)
    grad = -alpha * (t * d_pos + (1.0 - t) * d_neg) / z.size
    return float(loss), grad


# -- regression ------------------------------------------------------------

def mae(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float((diff ** 2).mean()), 2.0 * diff / diff.size


# -- stage loss ------------------------------------------------------------

CLS_LOSSES = ("cross_entropy", "focal")
ORD_LOSSES = ("binary_cross_entropy", "binary_focal")
REG_LOSSES = ("mae", "mse")


@dataclass(frozen=True)
class SmoothingConfig:
    eps_cls: float = 0.0
    eps_ord: float = 0.0
    reg_halfwidth: float = 0.0  # 0 disables regression smoothing

    def __post_init__(self):
        if not (0.0 <= self.eps_cls < 1.0 and 0.0 <= self.eps_ord < 1.0):
            raise ValueError("smoothing eps must lie in [0, 1)")
        if not 0.0 <= self.reg_halfwidth < 0.5:
            raise ValueError("reg_halfwidth must be below half the grade spacing (0.5)")


@dataclass(frozen=True)
class StageLossSet:
    cls_loss: str = "cross_entropy"
    ord_loss: str = "binary_cross_entropy"
    reg_loss: str = "mae"
    gamma: float = 2.0
    alpha: float = 1.0
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    ord_weight: float = 1.0

    def __post_init__(self):
        if self.cls_loss not in CLS_LOSSES:
            raise ValueError(f"unknown classification loss {self.cls_loss!r}")
        if self.ord_loss not in ORD_LOSSES:
            raise ValueError(f"unknown ordinal loss {self.ord_loss!r}")
        if self.reg_loss not in REG_LOSSES:
            raise ValueError(f"unknown regression loss {self.reg_loss!r}")


PRETRAIN_LOSSES = StageLossSet("cross_entropy", "binary_cross_entropy", "mae")
MAIN_LOSSES = StageLossSet("focal", "binary_focal", "mse")


def stage_loss(outputs, grades, losses: StageLossSet, smoothing: SmoothingConfig | None = None,
               rng: np.random.Generator | None = None):
    """Weighted sum of the three head losses for one batch.

    Parameters
    ----------
    outputs : HeadOutputs
        Batch of model outputs; raw scores are read from ``cls_logits``,
        ``reg_raw`` and ``ord_logits``.
    grades : array_like of int, shape (n,)
    losses : StageLossSet
    smoothing : SmoothingConfig, optional
    rng : numpy Generator
        Required when regression smoothing is enabled.

    Returns
    -------
    total : float
    grads : dict
        ``{"cls": (n, 5), "reg": (n,), "ord": (n, 5)}`` gradients of ``total``
        w.r.t. the raw head scores.
    parts : dict
        Unweighted per-head losses.
    """
    grades = np.asarray(grades, dtype=np.int64)
    n = len(grades)
    if outputs.cls_logits.shape[0] != n:
        raise ValueError(f"batch mismatch: {outputs.cls_logits.shape[0]} outputs vs {n} targets")
    smoothing = smoothing or SmoothingConfig()
    k = outputs.cls_logits.shape[1]

    t_cls = smooth_classification(one_hot(grades, k), smoothing.eps_cls, k)
    t_ord = smooth_ordinal(encode_ordinal(grades, outputs.ord_logits.shape[1]), smoothing.eps_ord)
    t_reg = grades.astype(np.float64)
    if smoothing.reg_halfwidth > 0:
        if rng is None:
            raise ValueError("regression smoothing needs an rng")
        t_reg = smooth_regression(t_reg, smoothing.reg_halfwidth, rng)

    if losses.cls_loss == "focal":
        l_cls, g_cls = focal_loss(outputs.cls_logits, t_cls, losses.gamma, losses.alpha)
    else:
        l_cls, g_cls = cross_entropy(outputs.cls_logits, t_cls)
    if losses.ord_loss == "binary_focal":
        l_ord, g_ord = binary_focal_loss(outputs.ord_logits, t_ord, losses.gamma, losses.alpha)
    else:
        l_ord, g_ord = binary_cross_entropy(outputs.ord_logits, t_ord)
    reg_fn = mse if losses.reg_loss == "mse" else mae
    l_reg, g_reg = reg_fn(outputs.reg_raw, t_reg)

    total = losses.cls_weight * l_cls + losses.reg_weight * l_reg + losses.ord_weight * l_ord
    grads = {
        "cls": losses.cls_weight * g_cls,
        "reg": losses.reg_weight * g_reg,
        "ord": losses.ord_weight * g_ord,
    }
    return total, grads, {"cls": l_cls, "reg": l_reg, "ord": l_ord}
