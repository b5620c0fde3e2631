"""Episodic datasets: the on-disk ``imrseg-dir`` format, a seeded synthetic
shapes generator and fold-aware episode sampling."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .embeddings import TOY_CLASSES, canonical_color
from .errors import ConfigError, DatasetLoadError, SamplingError

N_FOLDS = 4
SPLITS = ("train", "test")


@dataclass
class Record:
    image_id: str
    class_label: str
    image: np.ndarray      # (H, W, 3) uint8
    mask: np.ndarray       # (H, W) bool

    def image_float(self):
        return self.image.astype(np.float32) / 255.0


@dataclass
class DatasetIndex:
    classes: list
    folds: dict                        # class -> fold id
    records: dict                      # class -> [Record]
    resolution: tuple
    meta: dict = field(default_factory=dict)

    def fold_classes(self, fold):
        return [c for c in self.classes if self.folds[c] == fold]

    def split_classes(self, fold, split):
        if split == "test":
            return self.fold_classes(fold)
        if split == "train":
            return [c for c in self.classes if self.folds[c] != fold]
        raise SamplingError(f"split must be one of {SPLITS}, got {split!r}")

    def all_records(self):
        return [r for c in self.classes for r in self.records[c]]


@dataclass
class Episode:
    class_label: str
    supports: list     # [Record]
    query: Record
    episode_id: int = 0

    @property
    def k(self):
        return len(self.supports)


def contiguous_folds(classes, n_folds=N_FOLDS):
    per = len(classes) / n_folds
    return {c: min(int(i // per), n_folds - 1) for i, c in enumerate(classes)}


# ---------------------------------------------------------------------------
# synthetic shapes

@dataclass
class SyntheticSpec:
    n_classes: int = 12
    images_per_class: int = 40
    resolution: int = 64
    min_radius: float = 9.0
    max_radius: float = 20.0
    color_jitter: float = 0.04
    max_shading: float = 0.65
    distractor_count: int = 2
    seed: int = 0

    @property
    def classes(self):
        return list(TOY_CLASSES[: self.n_classes])


def _shape_mask(name, xx, yy, r, theta):
    c, s = np.cos(theta), np.sin(theta)
    x = c * xx + s * yy
    y = -s * xx + c * yy
    d = np.hypot(x, y)
    ax, ay = np.abs(x), np.abs(y)
    if name == "circle":
        return d <= r
    if name == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if name == "triangle":
        k = np.sqrt(3.0)
        return (y >= -0.5 * r) & (k * x - y <= r) & (-k * x - y <= r)
    if name == "cross":
        arm = 0.32 * r
        return ((ax <= arm) & (ay <= r)) | ((ay <= arm) & (ax <= r))
    if name == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if name == "diamond":
        return ax + ay <= r
    if name == "star":
        phi = np.arctan2(y, x)
        return d <= r * (0.62 + 0.38 * np.cos(5 * phi))
    if name == "hexagon":
        return np.maximum(ax, 0.5 * ax + 0.866 * ay) <= 0.9 * r
    if name == "ellipse":
        return (x / r) ** 2 + (y / (0.55 * r)) ** 2 <= 1.0
    if name == "bar":
        return (ax <= r) & (ay <= 0.38 * r)
    if name == "crescent":
        return (d <= r) & (np.hypot(x - 0.5 * r, y) > 0.75 * r)
    if name == "frame":
        m = np.maximum(ax, ay)
        return (m <= 0.85 * r) & (m >= 0.5 * r)
    raise ValueError(f"no drawing rule for shape {name!r}")


def _background(rng, res):
    base = rng.uniform(0.3, 0.7)
    coarse = rng.normal(0.0, 0.08, size=(res // 16 + 1, res // 16 + 1, 3))
    field_ = np.kron(coarse, np.ones((16, 16, 1)))[:res, :res]
    # cheap smoothing of the blocky field
    for _ in range(2):
        field_ = 0.25 * (np.roll(field_, 4, 0) + np.roll(field_, -4, 0)
                         + np.roll(field_, 4, 1) + np.roll(field_, -4, 1))
    return base + field_ + rng.normal(0.0, 0.02, size=(res, res, 3))


def _draw_object(rng, canvas, spec, class_idx, n_cls, radius):
    res = spec.resolution
    name = TOY_CLASSES[class_idx]
    margin = radius + 1
    cx, cy = rng.uniform(margin, res - margin, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    mask = _shape_mask(name, xx - cx, yy - cy, radius, theta)
    color = canonical_color(class_idx, n_cls) + rng.normal(0.0, spec.color_jitter, 3)
    # linear shading ramp across the object along a random direction
    direction = rng.uniform(0, 2 * np.pi)
    proj = ((xx - cx) * np.cos(direction) + (yy - cy) * np.sin(direction)) / (2 * radius) + 0.5
    shade = 1.0 - rng.uniform(0.0, spec.max_shading) * np.clip(proj, 0.0, 1.0)
    pixels = color[None, None, :] * shade[..., None]
    canvas[mask] = pixels[mask]
    return mask


def _render(rng, spec, class_idx):
    n_cls = spec.n_classes
    res = spec.resolution
    for _ in range(100):
        canvas = _background(rng, res)
        n_distract = int(rng.integers(0, spec.distractor_count + 1)) if spec.distractor_count else 0
        others = [i for i in range(n_cls) if i != class_idx]
        distractors = []
        for _ in range(n_distract):
            d_idx = int(rng.choice(others))
            _draw_object(rng, canvas, spec, d_idx, n_cls,
                         rng.uniform(spec.min_radius * 0.7, spec.max_radius * 0.7))
            distractors.append(TOY_CLASSES[d_idx])
        radius = rng.uniform(spec.min_radius, spec.max_radius)
        mask = _draw_object(rng, canvas, spec, class_idx, n_cls, radius)
        frac = mask.mean()
        if 0.02 < frac < 0.6:
            image = np.clip(np.round(np.clip(canvas, 0, 1) * 255), 0, 255).astype(np.uint8)
            return image, mask, distractors
    raise RuntimeError("could not place an object with a valid foreground fraction")


def generate_synthetic_dataset(spec=SyntheticSpec(), out_dir=None):
    if not 1 <= spec.n_classes <= len(TOY_CLASSES):
        raise ConfigError(f"n_classes must be in [1, {len(TOY_CLASSES)}]")
    if not 0 < spec.min_radius <= spec.max_radius or 2 * (spec.max_radius + 1) >= spec.resolution:
        raise ConfigError(f"radii [{spec.min_radius}, {spec.max_radius}] do not fit a {spec.resolution} px canvas")
    rng = np.random.default_rng(spec.seed)
    classes = spec.classes
    records = {c: [] for c in classes}
    distractor_log = {}
    for ci, cls in enumerate(classes):
        for j in range(spec.images_per_class):
            image, mask, distractors = _render(rng, spec, ci)
            rid = f"{cls}_{j:04d}"
            records[cls].append(Record(rid, cls, image, mask))
            distractor_log[rid] = distractors
    index = DatasetIndex(
        classes=classes,
        folds=contiguous_folds(classes),
        records=records,
        resolution=(spec.resolution, spec.resolution),
        meta={"provenance": "synthetic", "seed": spec.seed, "spec": asdict(spec),
              "distractors": distractor_log},
    )
    if out_dir is not None:
        write_dataset(index, out_dir)
    return index


# ---------------------------------------------------------------------------
# imrseg-dir format

def write_dataset(index, root):
    root = Path(root)
    for cls in index.classes:
        (root / "images" / cls).mkdir(parents=True, exist_ok=True)
        (root / "masks" / cls).mkdir(parents=True, exist_ok=True)
        for rec in index.records[cls]:
            Image.fromarray(rec.image, mode="RGB").save(root / "images" / cls / f"{rec.image_id}.png")
            Image.fromarray(rec.mask.astype(np.uint8) * 255, mode="L").save(
                root / "masks" / cls / f"{rec.image_id}.png")
    with open(root / "folds.json", "w") as fh:
        json.dump({c: int(index.folds[c]) for c in index.classes}, fh, indent=2)
    manifest = {
        "format": "imrseg-dir",
        "resolution": list(index.resolution),
        "classes": list(index.classes),
        "provenance": index.meta.get("provenance", "unknown"),
        "seed": index.meta.get("seed"),
        "meta": {k: v for k, v in index.meta.items() if k not in ("provenance", "seed")},
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetLoadError(f"cannot decode {path}: {exc}") from exc


def load_dataset(root, format="imrseg-dir"):
    if format != "imrseg-dir":
        raise DatasetLoadError(f"unsupported dataset format {format!r}")
    root = Path(root)
    try:
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetLoadError(f"{root}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"{root / 'manifest.json'}: {exc}") from exc
    classes = list(manifest["classes"])
    resolution = tuple(manifest["resolution"])
    try:
        with open(root / "folds.json") as fh:
            raw_folds = json.load(fh)
    except FileNotFoundError:
        raise DatasetLoadError(f"{root}: missing folds.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"{root / 'folds.json'}: malformed fold file ({exc})") from exc
    if not isinstance(raw_folds, dict) or set(raw_folds) != set(classes):
        raise DatasetLoadError(f"{root / 'folds.json'}: fold file must map every class exactly once")
    try:
        folds = {c: int(raw_folds[c]) for c in classes}
    except (TypeError, ValueError):
        raise DatasetLoadError(f"{root / 'folds.json'}: fold ids must be integers") from None
    if any(not 0 <= f < N_FOLDS for f in folds.values()):
        raise DatasetLoadError(f"{root / 'folds.json'}: fold ids must lie in [0, {N_FOLDS})")

    records = {}
    for cls in classes:
        img_dir = root / "images" / cls
        if not img_dir.is_dir():
            raise DatasetLoadError(f"missing image directory {img_dir}")
        recs = []
        for img_path in sorted(img_dir.glob("*.png")):
            mask_path = root / "masks" / cls / img_path.name
            if not mask_path.is_file():
                raise DatasetLoadError(f"missing mask for {img_path}: expected {mask_path}")
            image = _read_png(img_path, "RGB")
            mask_raw = _read_png(mask_path, "L")
            if image.shape[:2] != mask_raw.shape:
                raise DatasetLoadError(
                    f"{mask_path}: resolution {mask_raw.shape} does not match image {image.shape[:2]}")
            if not np.isin(mask_raw, (0, 255)).all():
                raise DatasetLoadError(f"{mask_path}: mask is not binary 0/255")
            recs.append(Record(img_path.stem, cls, image, mask_raw == 255))
        records[cls] = recs
    meta = dict(manifest.get("meta", {}))
    meta.update(provenance=manifest.get("provenance"), seed=manifest.get("seed"), root=str(root))
    return DatasetIndex(classes=classes, folds=folds, records=records, resolution=resolution, meta=meta)


# ---------------------------------------------------------------------------
# episodes

class EpisodeSampler:
    """Uniform over classes, then K+1 distinct records of that class."""

    def __init__(self, index, fold, split, k=1, seed=0):
        self.index = index
        self.fold = fold
        self.split = split
        self.k = k
        self.classes = index.split_classes(fold, split)
        if not self.classes:
            raise SamplingError(f"fold {fold} has no {split} classes")
        self.rng = np.random.default_rng(seed)
        self.count = 0

    def sample(self):
        ep = sample_episode(self.index, self.fold, self.split, self.k, self.rng, classes=self.classes)
        ep.episode_id = self.count
        self.count += 1
        return ep

    def __iter__(self):
        while True:
            yield self.sample()


def sample_episode(index, fold, split, k, rng, classes=None):
    if k < 1:
        raise SamplingError("K must be >= 1")
    classes = classes if classes is not None else index.split_classes(fold, split)
    if not classes:
        raise SamplingError(f"fold {fold} has no {split} classes")
    cls = classes[int(rng.integers(len(classes)))]
    recs = index.records[cls]
    if len(recs) < k + 1:
        raise SamplingError(f"class {cls!r} has {len(recs)} records, need at least {k + 1}")
    picks = rng.choice(len(recs), size=k + 1, replace=False)
    return Episode(class_label=cls, supports=[recs[int(i)] for i in picks[1:]], query=recs[int(picks[0])])
