"""Image transforms, the stochastic training policy and the deterministic TTA set.

A :class:`Transform` carries every parameter it needs, so :func:`apply` is a
pure function. Random behaviour lives only in :class:`AugmentPolicy`, which
draws concrete transforms from its candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preprocess import resize

GEOMETRIC_EXACT = ("identity", "hflip", "vflip", "transpose", "rot90", "rot180", "rot270")
DETERMINISTIC_KINDS = GEOMETRIC_EXACT + ("zoom",)
PARAMETRIC_KINDS = ("brightness", "contrast", "gauss_noise", "cutout", "shift", "scale")
KINDS = DETERMINISTIC_KINDS + PARAMETRIC_KINDS
DEFAULT_TTA = ("hflip", "vflip", "transpose", "rot90", "rot180", "rot270", "zoom")
DEFAULT_ZOOM = 0.9


@dataclass(frozen=True)
class Transform:
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def make(cls, kind, **params):
        return cls(kind, tuple(sorted(params.items())))

    def get(self, name, default=None):
        return dict(self.params).get(name, default)

    @property
    def label(self) -> str:
        if not self.params:
            return self.kind
        args = ";".join(f"{k}={v}" for k, v in self.params)
        return f"{self.kind}({args})"


def _require_square(image, kind):
    if image.shape[1] != image.shape[2]:
        raise ValueError(f"{kind} needs a square image, got {image.shape[1]}x{image.shape[2]}")


def _center_crop(image, fraction):
    _, h, w = image.shape
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    return image[:, top:top + ch, left:left + cw]


def _shifted(image, dx, dy):
    out = np.zeros_like(image)
    _, h, w = image.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[:, dst_r, dst_c] = image[:, src_r, src_c]
    return out


def _scaled(image, factor):
    _, h, w = image.shape
    if factor == 1.0:
        return image.copy()
    if factor > 1.0:
        return resize(_center_crop(image, 1.0 / factor), (h, w))
    nh, nw = max(2, int(round(h * factor))), max(2, int(round(w * factor)))
    small = resize(image, (nh, nw))
    out = np.zeros_like(image)
    top, left = (h - nh) // 2, (w - nw) // 2
    out[:, top:top + nh, left:left + nw] = small
    return out


def apply(transform: Transform, image) -> np.ndarray:
    """Apply one transform to a (C, H, W) image; output keeps the shape and stays in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    kind = transform.kind
    p = dict(transform.params)
    if kind == "identity":
        out = image.copy()
    elif kind == "hflip":
        out = image[:, :, ::-1]
    elif kind == "vflip":
        out = image[:, ::-1, :]
    elif kind == "transpose":
        _require_square(image, kind)
        out = image.transpose(0, 2, 1)
    elif kind in ("rot90", "rot180", "rot270"):
        if kind != "rot180":
            _require_square(image, kind)
        out = np.rot90(image, k={"rot90": 1, "rot180": 2, "rot270": 3}[kind], axes=(1, 2))
    elif kind == "zoom":
        fraction = p.get("fraction", DEFAULT_ZOOM)
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"zoom fraction must lie in (0, 1], got {fraction}")
        out = resize(_center_crop(image, fraction), image.shape[1:])
    elif kind == "brightness":
        out = image + p["delta"]
    elif kind == "contrast":
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = (image - mean) * p["factor"] + mean
    elif kind == "gauss_noise":
        rng = np.random.default_rng(p.get("seed", 0))
        out = image + rng.normal(0.0, p["std"], size=image.shape)
    elif kind == "cutout":
        rng = np.random.default_rng(p.get("seed", 0))
        size = int(p["hole_size"])
        _, h, w = image.shape
        if size > min(h, w):
            raise ValueError("cutout hole larger than the image")
        out = image.copy()
        for _ in range(int(p["n_holes"])):
            top = rng.integers(0, h - size + 1)
            left = rng.integers(0, w - size + 1)
            out[:, top:top + size, left:left + size] = 0.0
    elif kind == "shift":
        out = _shifted(image, int(p["dx"]), int(p["dy"]))
    elif kind == "scale":
        factor = p["factor"]
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        out = _scaled(image, factor)
    else:  # pragma: no cover - guarded by Transform
        raise ValueError(kind)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


# -- stochastic policy -------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    kind: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS + ("rotate",):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")

    def draw(self, rng, image_size) -> Transform:
        kind, p = self.kind, self.params
        if kind == "rotate":
            return Transform(("rot90", "rot180", "rot270")[rng.integers(3)])
        if kind in GEOMETRIC_EXACT:
            return Transform(kind)
        if kind == "zoom":
            lo, hi = p.get("min", 0.8), p.get("max", 1.0)
            return Transform.make("zoom", fraction=float(rng.uniform(lo, hi)))
        if kind == "brightness":
            lim = p.get("limit", 0.1)
            return Transform.make("brightness", delta=float(rng.uniform(-lim, lim)))
        if kind == "contrast":
            lim = p.get("limit", 0.2)
            return Transform.make("contrast", factor=float(rng.uniform(1 - lim, 1 + lim)))
        if kind == "gauss_noise":
            return Transform.make("gauss_noise", std=float(p.get("std", 0.02)),
                                  seed=int(rng.integers(2**31)))
        if kind == "cutout":
            return Transform.make("cutout", n_holes=int(p.get("n_holes", 1)),
                                  hole_size=int(p.get("hole_size", max(1, image_size // 8))),
                                  seed=int(rng.integers(2**31)))
        if kind == "shift":
            max_px = int(round(p.get("limit", 0.1) * image_size))
            dx, dy = rng.integers(-max_px, max_px + 1, size=2)
            return Transform.make("shift", dx=int(dx), dy=int(dy))
        if kind == "scale":
            lim = p.get("limit", 0.1)
            return Transform.make("scale", factor=float(rng.uniform(1 - lim, 1 + lim)))
        raise ValueError(kind)  # pragma: no cover


DEFAULT_CANDIDATES = (
    Candidate("hflip"), Candidate("vflip"), Candidate("rotate"),
    Candidate("shift"), Candidate("scale"), Candidate("brightness"),
    Candidate("contrast"), Candidate("gauss_noise"), Candidate("cutout"),
)


@dataclass(frozen=True)
class AugmentPolicy:
    """Each candidate fires independently with its probability; draws with fewer
    than ``min_applied`` transforms are rejected and redrawn."""

    candidates: tuple = DEFAULT_CANDIDATES
    min_applied: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ValueError("augmentation policy needs at least one candidate")
        if self.min_applied < 1:
            raise ValueError("min_applied must be at least 1")
        reachable = sum(c.probability > 0 for c in self.candidates)
        if reachable < self.min_applied:
            raise ValueError("min_applied exceeds the number of candidates with non-zero probability")

    def draw(self, call_index: int, image_size: int = 64) -> list:
        """Concrete transforms for one call; reproducible from ``(seed, call_index)``."""
        rng = np.random.default_rng([self.seed, call_index])
        probs = np.array([c.probability for c in self.candidates])
        while True:
            mask = rng.random(len(probs)) < probs
            if mask.sum() >= self.min_applied:
                break
        return [c.draw(rng, image_size) for c, on in zip(self.candidates, mask) if on]

    def to_config(self) -> dict:
        return {
            "min_applied": self.min_applied,
            "seed": self.seed,
            "candidates": [{"kind": c.kind, "probability": c.probability, "params": dict(c.params)}
                           for c in self.candidates],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "AugmentPolicy":
        cands = cfg.get("candidates")
        if cands is None:
            cands = DEFAULT_CANDIDATES
        else:
            cands = tuple(Candidate(c["kind"], float(c.get("probability", 0.5)), dict(c.get("params") or {}))
                          for c in cands)
        return cls(cands, int(cfg.get("min_applied", 1)), int(cfg.get("seed", 0)))


def sample_augmentation(policy: AugmentPolicy, image, call_index: int = 0) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    for t in policy.draw(call_index, out.shape[-1]):
        out = apply(t, out)
    return out


# -- TTA -------------------------------------------------------------------

def tta_set(config=DEFAULT_TTA) -> list:
    """Ordered deterministic transforms with identity first.

    Entries may be kind names, ``{"kind": ..., **params}`` dicts or
    :class:`Transform` objects; ``"rotate"`` expands to the three quarter turns.
    """
    if config is None:
        config = DEFAULT_TTA
    out = [Transform("identity")]
    for entry in config:
        if isinstance(entry, Transform):
            kind, params = entry.kind, dict(entry.params)
        elif isinstance(entry, dict):
            params = dict(entry)
            kind = params.pop("kind")
        else:
            kind, params = str(entry), {}
        if kind == "rotate":
            out.extend(Transform(k) for k in ("rot90", "rot180", "rot270"))
            continue
        if kind not in DETERMINISTIC_KINDS:
            raise ValueError(f"TTA accepts only deterministic transforms, got {kind!r}")
        if kind == "identity":
            continue
        if kind == "zoom":
            params.setdefault("fraction", DEFAULT_ZOOM)
        out.append(Transform.make(kind, **params))
    return out
