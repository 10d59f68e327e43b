"""Graded image datasets: Kaggle-style ingestion, synthetic domains, stratified splits.

Images are float64 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import N_GRADES
from .preprocess import PreprocessConfig, preprocess

APTOS_SCHEMA = ("id_code", "diagnosis")
KAGGLE_2015_SCHEMA = ("image", "level")
IMAGE_EXTS = (".png", ".jpeg", ".jpg")
DEFAULT_PROPORTIONS = (0.49, 0.10, 0.27, 0.05, 0.09)


class DataError(ValueError):
    """Bad or missing dataset input."""


@dataclass(frozen=True)
class GradedSample:
    id: str
    pixels: np.ndarray
    grade: int

    def __post_init__(self):
        if not 0 <= int(self.grade) < N_GRADES:
            raise DataError(f"sample {self.id}: grade {self.grade} out of range")
        px = self.pixels
        if px.ndim != 3 or px.shape[0] != 3 or px.shape[1] < 8 or px.shape[2] < 8:
            raise DataError(f"sample {self.id}: expected (3, H>=8, W>=8) pixels, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"sample {self.id}: pixels must be finite and in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    domain_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("sample ids must be unique within a dataset")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    @property
    def grades(self) -> np.ndarray:
        return np.array([s.grade for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples])

    def subset(self, ids) -> "Dataset":
        wanted = set(ids)
        return Dataset(tuple(s for s in self.samples if s.id in wanted), self.domain_tag)


@dataclass(frozen=True)
class ImageSet:
    """Unlabelled images with ids, enough for inference."""

    ids: tuple
    pixels: np.ndarray
    labelled = False

    def __len__(self):
        return len(self.ids)

    def images(self) -> np.ndarray:
        return self.pixels


def load_images(path, schema=APTOS_SCHEMA, preprocess_config: PreprocessConfig | None = None) -> ImageSet:
    """Images of a dataset folder, labelled or not.

    Ids come from ``labels.csv`` when present (only the id column is read),
    otherwise from the sorted image file names.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    labels = path / "labels.csv"
    if labels.exists():
        with open(labels, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if schema[0] not in header:
                raise DataError(f"{labels}: header must contain {schema[0]!r}")
            col = header.index(schema[0])
            ids = [row[col].strip() for row in reader if row]
    else:
        ids = sorted(p.stem for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not ids:
        raise DataError(f"no images found in {path}")
    stack = []
    for sample_id in ids:
        img = _find_image(path, sample_id)
        if img is None:
            raise DataError(f"missing image for id {sample_id!r} in {path}")
        px = read_image(img)
        stack.append(preprocess(px, preprocess_config) if preprocess_config is not None else px)
    shapes = {p.shape for p in stack}
    if len(shapes) != 1:
        raise DataError(f"images in {path} differ in size {sorted(shapes)}; configure preprocessing")
    return ImageSet(tuple(ids), np.stack(stack))


def has_labels(path, schema=APTOS_SCHEMA) -> bool:
    labels = Path(path) / "labels.csv"
    if not labels.exists():
        return False
    with open(labels, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    return schema[1] in header


def class_distribution(dataset: Dataset, k: int = N_GRADES):
    """Per-grade ``(counts, proportions)``."""
    if len(dataset) == 0:
        raise DataError("class distribution of an empty dataset")
    counts = np.bincount(dataset.grades, minlength=k)
    return counts, counts / counts.sum()


# -- image I/O ---------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_png(pixels, path):
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def _find_image(images_dir: Path, sample_id: str):
    for ext in IMAGE_EXTS:
        p = images_dir / f"{sample_id}{ext}"
        if p.exists():
            return p
    return None


def load_kaggle_csv(labels_path, images_dir=None, schema=APTOS_SCHEMA, domain_tag="",
                    preprocess_config: PreprocessConfig | None = None) -> Dataset:
    """Read a ``<id>,<grade>`` label file and the matching ``<id>.png|jpeg|jpg`` images.

    Parameters
    ----------
    labels_path : path
        CSV with a header row naming the id and grade columns.
    images_dir : path, optional
        Defaults to the CSV's directory.
    schema : (str, str)
        Id and grade column names; ``("image", "level")`` for the 2015 files.
    preprocess_config : PreprocessConfig, optional
        When given, each image is cropped to content and resized.
    """
    labels_path = Path(labels_path)
    images_dir = Path(images_dir) if images_dir is not None else labels_path.parent
    id_col, grade_col = schema
    samples = []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{labels_path}: empty label file") from None
        except csv.Error as exc:
            raise DataError(f"{labels_path}: parse error at line 1: {exc}") from None
        header = [h.strip() for h in header]
        if id_col not in header or grade_col not in header:
            raise DataError(f"{labels_path}: header must contain {id_col!r} and {grade_col!r}, got {header}")
        i_id, i_grade = header.index(id_col), header.index(grade_col)
        row_no = 1
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise DataError(f"{labels_path}: parse error at line {reader.line_num}: {exc}") from None
            row_no += 1
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{labels_path}: parse error at line {reader.line_num}: "
                                f"expected {len(header)} fields, got {len(row)}")
            sample_id = row[i_id].strip()
            try:
                grade = int(row[i_grade])
            except ValueError:
                raise DataError(f"{labels_path}: parse error at line {reader.line_num}: "
                                f"grade {row[i_grade]!r} is not an integer") from None
            if not 0 <= grade < N_GRADES:
                raise DataError(f"grade out of range at row {row_no}: {grade}")
            path = _find_image(images_dir, sample_id)
            if path is None:
                raise DataError(f"missing image for id {sample_id!r} in {images_dir}")
            pixels = read_image(path)
            if preprocess_config is not None:
                pixels = preprocess(pixels, preprocess_config)
            samples.append(GradedSample(sample_id, pixels, grade))
    return Dataset(tuple(samples), domain_tag)


def save_dataset(dataset: Dataset, out_dir, manifest: dict | None = None, schema=APTOS_SCHEMA):
    """Write ``labels.csv``, one PNG per sample and a ``manifest`` text file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema)
        for s in dataset:
            writer.writerow([s.id, s.grade])
            write_png(s.pixels, out_dir / f"{s.id}.png")
    info = {"domain_tag": dataset.domain_tag, "n": len(dataset)}
    info.update(manifest or {})
    with open(out_dir / "manifest", "w") as fh:
        for key in sorted(info):
            fh.write(f"{key}={json.dumps(info[key], sort_keys=True)}\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = json.loads(value)
    return out


def load_dataset_dir(path, schema=APTOS_SCHEMA) -> Dataset:
    path = Path(path)
    tag = ""
    if (path / "manifest").exists():
        tag = read_manifest(path / "manifest").get("domain_tag", "")
    return load_kaggle_csv(path / "labels.csv", path, schema, domain_tag=tag)


# -- synthetic domains -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Disc-shaped background with ``grade`` bright gaussian lesions plus noise."""

    n: int = 1000
    domain_tag: str = "main"
    image_size: int = 64
    class_proportions: tuple = DEFAULT_PROPORTIONS
    noise_std: float = 0.05
    seed: int = 0
    background: float = 0.40
    lesion_amplitude: float = 0.55
    lesion_sigma: float | None = None  # default 5 px at 64 x 64, scaled with image_size

    def __post_init__(self):
        object.__setattr__(self, "class_proportions", tuple(float(p) for p in self.class_proportions))
        p = np.asarray(self.class_proportions)
        if p.shape != (N_GRADES,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DataError(f"class_proportions must be {N_GRADES} non-negative values summing to 1")
        if self.n < N_GRADES:
            raise DataError(f"n must be at least {N_GRADES}")
        if self.image_size < 8:
            raise DataError("image_size must be at least 8")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")

    @property
    def sigma(self) -> float:
        return self.lesion_sigma if self.lesion_sigma is not None else max(1.0, self.image_size * 5.0 / 64.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_proportions"] = list(self.class_proportions)
        return d


def domain_a(n=2000, seed=0, image_size=64, **kw) -> SyntheticConfig:
    """Large, darker, cleaner pretraining domain."""
    return SyntheticConfig(n=n, domain_tag="pretrain", image_size=image_size, seed=seed,
                           background=0.30, noise_std=0.04, **kw)


def domain_b(n=1000, seed=1, image_size=64, **kw) -> SyntheticConfig:
    """Smaller, brighter, noisier target domain."""
    return SyntheticConfig(n=n, domain_tag="main", image_size=image_size, seed=seed,
                           background=0.45, noise_std=0.06, **kw)


BACKGROUND_TINT = np.array([1.0, 0.55, 0.35])
LESION_TINT = np.array([1.0, 0.95, 0.6])


def _disc(size):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    radius = 0.45 * size
    return ((yy - c) ** 2 + (xx - c) ** 2) <= radius ** 2, c, radius


def _place_lesions(rng, count, size, sigma):
    _, c, radius = _disc(size)
    max_r = max(1.0, radius - 1.5 * sigma)
    min_sep = 3.5 * sigma
    centres = []
    attempts = 0
    while len(centres) < count:
        attempts += 1
        r = max_r * np.sqrt(rng.random())
        theta = 2 * np.pi * rng.random()
        pt = (c + r * np.sin(theta), c + r * np.cos(theta))
        if attempts < 10_000 and any(np.hypot(pt[0] - q[0], pt[1] - q[1]) < min_sep for q in centres):
            continue
        centres.append(pt)
    return centres


def render_clean(grade, config: SyntheticConfig, rng) -> np.ndarray:
    """Noise-free image for one grade; consumes ``rng`` for lesion placement."""
    size = config.image_size
    disc, _, _ = _disc(size)
    img = disc[None].astype(np.float64) * (config.background * BACKGROUND_TINT)[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = config.sigma
    for cy, cx in _place_lesions(rng, int(grade), size, sigma):
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img += config.lesion_amplitude * LESION_TINT[:, None, None] * blob[None]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(config: SyntheticConfig, return_clean: bool = False):
    """Deterministic synthetic dataset for ``config.seed``.

    Grades are drawn i.i.d. from ``class_proportions``; a grade-``g`` image
    holds ``g`` separated lesion blobs inside the disc. With
    ``return_clean=True`` the pre-noise images are returned alongside.
    """
    rng = np.random.default_rng(config.seed)
    grades = rng.choice(N_GRADES, size=config.n, p=config.class_proportions)
    width = len(str(config.n - 1))
    samples, clean = [], []
    for i, g in enumerate(grades):
        img = render_clean(g, config, rng)
        noisy = np.clip(img + rng.normal(0.0, config.noise_std, size=img.shape), 0.0, 1.0)
        samples.append(GradedSample(f"{config.domain_tag}_{i:0{width}d}", noisy, int(g)))
        if return_clean:
            clean.append(img)
    ds = Dataset(tuple(samples), config.domain_tag)
    return (ds, clean) if return_clean else ds


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    n_folds: int
    assignments: dict
    holdout_ids: frozenset = field(default_factory=frozenset)

    def fold_ids(self, fold: int) -> list:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        return [i for i, f in self.assignments.items() if f != fold]

    def to_json(self) -> str:
        return json.dumps({"n_folds": self.n_folds, "assignments": self.assignments,
                           "holdout_ids": sorted(self.holdout_ids)}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        d = json.loads(text)
        return cls(int(d["n_folds"]), {k: int(v) for k, v in d["assignments"].items()},
                   frozenset(d["holdout_ids"]))


def _apportion(counts, total):
    """Largest-remainder allocation of ``total`` across classes proportional to ``counts``."""
    counts = np.asarray(counts, dtype=np.float64)
    if total == 0 or counts.sum() == 0:
        return np.zeros(len(counts), dtype=np.int64)
    quota = counts * total / counts.sum()
    base = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:total - base.sum()]] += 1
    return base


def split_folds(dataset: Dataset, n_folds: int = 5, holdout_fraction: float = 0.0, seed: int = 0) -> FoldSplit:
    """Stratified holdout then stratified k-fold assignment.

    The holdout is drawn first, proportionally per grade, and never enters a
    fold. Remaining ids of each grade are shuffled and dealt round-robin, with
    the dealing position carried across grades so fold sizes differ by at most one.
    """
    if n_folds < 2:
        raise DataError("n_folds must be at least 2")
    if not 0.0 <= holdout_fraction < 0.5:
        raise DataError("holdout_fraction must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    ids = np.array(dataset.ids, dtype=object)
    grades = dataset.grades
    counts = np.bincount(grades, minlength=N_GRADES)
    n_hold = _apportion(counts, int(round(holdout_fraction * len(dataset))))
    holdout, pools = [], []
    for g in range(N_GRADES):
        members = ids[grades == g]
        members = members[rng.permutation(len(members))]
        holdout.extend(members[:n_hold[g]])
        rest = members[n_hold[g]:]
        if 0 < len(rest) < n_folds or (len(rest) == 0 and counts[g] > 0):
            raise DataError(f"grade {g} has {len(rest)} samples after holdout; need at least {n_folds}")
        pools.append(rest)
    assignments, pos = {}, 0
    for rest in pools:
        for sid in rest:
            assignments[str(sid)] = pos % n_folds
            pos += 1
    order = {sid: i for i, sid in enumerate(dataset.ids)}
    assignments = dict(sorted(assignments.items(), key=lambda kv: order[kv[0]]))
    return FoldSplit(n_folds, assignments, frozenset(str(h) for h in holdout))
