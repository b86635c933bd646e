"""EL image ingestion, label binarization, stratified splitting and augmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageEnhance, ImageFilter
from torch.utils.data import Dataset

log = logging.getLogger(__name__)

IMAGE_SIZE = 150
THRESHOLD = 0.5
CELL_TYPES = ("mono", "poly")
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("path", "probability", "cell_type")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
INTERPOLATION = {"bilinear": Image.BILINEAR, "area": Image.BOX, "nearest": Image.NEAREST}


class DatasetError(RuntimeError):
    def __init__(self, message: str, items: Sequence[str] = ()):
        self.items = list(items)
        detail = "".join(f"\n  {i}" for i in self.items[:50])
        more = f"\n  ... {len(self.items) - 50} more" if len(self.items) > 50 else ""
        super().__init__(message + detail + more)


def binarize(probability: float, threshold: float = THRESHOLD) -> int:
    """1 (defective) iff probability >= threshold."""
    return int(probability >= threshold)


@dataclass
class Sample:
    image: np.ndarray
    defect_probability: float
    cell_type: str
    sample_id: str = ""
    label: int = -1

    def __post_init__(self):
        if not 0.0 <= self.defect_probability <= 1.0:
            raise ValueError(f"defect probability {self.defect_probability} outside [0, 1]")
        if self.cell_type not in CELL_TYPES:
            raise ValueError(f"unknown cell type {self.cell_type!r}")
        if self.label < 0:
            self.label = binarize(self.defect_probability)

    @property
    def stratum(self) -> tuple[int, str]:
        return self.label, self.cell_type


def _read_manifest(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise DatasetError(f"{path}: manifest must have columns {MANIFEST_FIELDS}")
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_upstream_labels(root) -> list[dict]:
    """Rows of the public dataset's whitespace ``labels.csv`` in manifest form.

    Upstream rows look like ``images/cell0001.png  1.0  mono``.
    """
    src = Path(root) / "labels.csv"
    if not src.exists():
        raise DatasetError(f"{root}: neither {MANIFEST_NAME} nor labels.csv found")
    rows, bad = [], []
    for n, line in enumerate(src.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            path, prob, ctype = parts
            rows.append({"path": path, "probability": float(prob), "cell_type": ctype})
        except ValueError:
            bad.append(f"labels.csv line {n}: {line!r}")
    if bad:
        raise DatasetError("malformed label rows", bad)
    return rows


def import_upstream_labels(root, out=None) -> Path:
    """Write the upstream labels as a manifest (default ``<root>/manifest.csv``)."""
    out = Path(out) if out else Path(root) / MANIFEST_NAME
    write_manifest(out, read_upstream_labels(root))
    return out


def load_image(path, size: int = IMAGE_SIZE, interpolation: str = "bilinear") -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "I;16", "I", "1", "P", "LA") else im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), INTERPOLATION[interpolation])
        return np.asarray(im, dtype=np.uint8).copy()


def load_dataset(root, size: int = IMAGE_SIZE, interpolation: str = "bilinear",
                 threshold: float = THRESHOLD, manifest: str | None = None) -> list[Sample]:
    """Load every manifest row, resized to ``size`` and binarized at ``threshold``.

    Relative manifest paths resolve against ``root`` even when the manifest
    itself lives elsewhere.
    """
    root = Path(root)
    mpath = Path(manifest) if manifest else root / MANIFEST_NAME
    if mpath.exists():
        rows, base = _read_manifest(mpath), root
    elif (root / "labels.csv").exists():
        rows, base = read_upstream_labels(root), root
    else:
        if root.is_dir() and not any(p.suffix.lower() in IMAGE_SUFFIXES for p in root.rglob("*")):
            raise DatasetError(f"{root}: no images found")
        raise DatasetError(f"{root}: missing {MANIFEST_NAME}")
    if not rows:
        raise DatasetError(f"{mpath}: no images found")
    samples, errors = [], []
    for n, row in enumerate(rows, 2):
        rel = row["path"]
        try:
            prob = float(row["probability"])
            img = load_image(base / rel, size, interpolation)
            samples.append(Sample(img, prob, row["cell_type"].strip(), rel,
                                  binarize(prob, threshold)))
        except (OSError, ValueError) as e:
            errors.append(f"row {n} ({rel}): {e}")
    if errors:
        raise DatasetError(f"{len(errors)} manifest rows failed to load", errors)
    counts = Counter(s.label for s in samples)
    log.info("loaded %d samples: %d defective, %d functional", len(samples), counts[1], counts[0])
    return samples


def _allocate(sizes: dict, ratio: float) -> dict:
    """Largest-remainder apportionment of round(N * ratio) over strata."""
    total = sum(sizes.values())
    target = math.floor(total * ratio + 0.5)
    exact = {k: n * ratio for k, n in sizes.items()}
    alloc = {k: math.floor(v) for k, v in exact.items()}
    order = sorted(sizes, key=lambda k: (-(exact[k] - alloc[k]), k))
    for k in order[:target - sum(alloc.values())]:
        alloc[k] += 1
    return alloc


@dataclass
class SplitPlan:
    train_ratio: float = 0.75
    search_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for r in (self.train_ratio, self.search_ratio):
            if not 0.0 < r < 1.0:
                raise ValueError(f"split ratio {r} outside (0, 1)")


def stratified_split(samples: Sequence[Sample], ratio: float = 0.75, seed: int = 0):
    """Split preserving (label, cell_type) proportions; returns (first, second)."""
    strata = defaultdict(list)
    for i, s in enumerate(samples):
        strata[s.stratum].append(i)
    alloc = _allocate({k: len(v) for k, v in strata.items()}, ratio)
    rng = np.random.default_rng(seed)
    first, second = [], []
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = alloc[key]
        if n == 0 or n == len(idx):
            log.warning("stratum %s (%d samples) is not represented on both sides", key, len(idx))
        first.extend(idx[:n].tolist())
        second.extend(idx[n:].tolist())
    return [samples[i] for i in sorted(first)], [samples[i] for i in sorted(second)]


def split_dataset(samples: Sequence[Sample], plan: SplitPlan = SplitPlan()) -> dict[str, list[Sample]]:
    """train/test plus the 50/50 search partition of train."""
    train, test = stratified_split(samples, plan.train_ratio, plan.seed)
    search_train, search_val = stratified_split(train, plan.search_ratio, plan.seed + 1)
    return {"train": train, "test": test, "search_train": search_train, "search_val": search_val}


def strata_counts(samples: Sequence[Sample]) -> dict[tuple[int, str], int]:
    return dict(Counter(s.stratum for s in samples))


# ---------------------------------------------------------------- tensors

def to_chw(image: np.ndarray) -> np.ndarray:
    """uint8 HxW or HxWx3 -> float32 3xHxW in [0, 1]; grayscale is replicated."""
    a = image.astype(np.float32) / 255.0
    if a.ndim == 2:
        a = np.repeat(a[None], 3, axis=0)
    else:
        a = a.transpose(2, 0, 1)
    return np.ascontiguousarray(a)


def channel_stats(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the given (training) samples."""
    s = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for smp in samples:
        a = to_chw(smp.image).astype(np.float64)
        s += a.sum(axis=(1, 2))
        sq += (a ** 2).sum(axis=(1, 2))
        n += a.shape[1] * a.shape[2]
    mean = s / n
    std = np.sqrt(np.maximum(sq / n - mean ** 2, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


def sample_seed(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


class SampleDataset(Dataset):
    """Normalized 3-channel tensors with optional online augmentation."""

    def __init__(self, samples: Sequence[Sample], mean=None, std=None, augment: "AugmentConfig | None" = None,
                 seed: int = 0):
        self.samples = list(samples)
        if mean is None:
            mean, std = channel_stats(self.samples)
        self.mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
        self.std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def image(self, i) -> np.ndarray:
        s = self.samples[i]
        if self.augment is None:
            return s.image
        return augment_online(s.image, sample_seed(self.seed, s.sample_id or str(i), self.epoch), self.augment)

    def __getitem__(self, i):
        x = (to_chw(self.image(i)) - self.mean) / self.std
        return torch.from_numpy(x), self.samples[i].label

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]

    @property
    def cell_types(self) -> list[str]:
        return [s.cell_type for s in self.samples]


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    small_rotation: float = 0.5
    max_small_angle: float = 2.0
    rot90: float = 0.5
    affine: float = 0.5
    max_translate: float = 0.05
    max_scale: float = 0.05
    max_shear: float = 2.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=0, vflip=0, small_rotation=0, rot90=0, affine=0)


def _pil(a: np.ndarray) -> Image.Image:
    return Image.fromarray(a)


def hflip(a):
    return np.ascontiguousarray(a[:, ::-1])


def vflip(a):
    return np.ascontiguousarray(a[::-1])


def rotate90(a, k: int):
    return np.ascontiguousarray(np.rot90(a, k, axes=(0, 1)))


def rotate(a, degrees: float):
    return np.asarray(_pil(a).rotate(degrees, resample=Image.BILINEAR))


def affine(a, translate=(0.0, 0.0), scale=1.0, shear=0.0):
    """Affine warp about the image center (PIL inverse-matrix convention)."""
    h, w = a.shape[:2]
    cx, cy = w / 2, h / 2
    sh = math.tan(math.radians(shear))
    # forward: p' = S(scale) * Shear * (p - c) + c + t ; PIL wants the inverse
    m = np.array([[scale, scale * sh, 0], [0, scale, 0], [0, 0, 1]])
    t = np.array([[1, 0, cx + translate[0] * w], [0, 1, cy + translate[1] * h], [0, 0, 1]])
    c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    inv = np.linalg.inv(t @ m @ c)
    return np.asarray(_pil(a).transform((w, h), Image.AFFINE, tuple(inv[:2].ravel()), resample=Image.BILINEAR))


def augment_online(image: np.ndarray, rng: np.random.Generator | int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Flips, +-2 degree rotation, 90-degree rotation and a mild affine, each independently."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    # draw every decision up front so the stream layout never depends on outcomes
    u = rng.random(5)
    angle = rng.uniform(-cfg.max_small_angle, cfg.max_small_angle)
    k = int(rng.integers(0, 4))
    tx, ty = rng.uniform(-cfg.max_translate, cfg.max_translate, 2)
    sc = 1.0 + rng.uniform(-cfg.max_scale, cfg.max_scale)
    shear = rng.uniform(-cfg.max_shear, cfg.max_shear)
    a = image
    if u[0] < cfg.hflip:
        a = hflip(a)
    if u[1] < cfg.vflip:
        a = vflip(a)
    if u[2] < cfg.small_rotation:
        a = rotate(a, angle)
    if u[3] < cfg.rot90:
        a = rotate90(a, k)
    if u[4] < cfg.affine:
        a = affine(a, (tx, ty), sc, shear)
    return np.ascontiguousarray(a)


def _offline_op(name: str, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = a.shape[:2]
    if name == "hflip":
        return hflip(a)
    if name == "vflip":
        return vflip(a)
    if name == "rotate_small":
        return rotate(a, rng.uniform(-2, 2))
    if name == "rotate90":
        return rotate90(a, int(rng.integers(1, 4)))
    if name == "contrast":
        return np.asarray(ImageEnhance.Contrast(_pil(a)).enhance(rng.uniform(1.2, 1.8)))
    if name == "gaussian_blur":
        return np.asarray(_pil(a).filter(ImageFilter.GaussianBlur(rng.uniform(0.5, 1.5))))
    if name == "affine":
        return affine(a, tuple(rng.uniform(-0.05, 0.05, 2)), 1 + rng.uniform(-0.05, 0.05), rng.uniform(-2, 2))
    if name == "center_crop":
        f = rng.uniform(0.8, 0.95)
        ch, cw = int(h * f), int(w * f)
        top, left = (h - ch) // 2, (w - cw) // 2
        crop = _pil(np.ascontiguousarray(a[top:top + ch, left:left + cw]))
        return np.asarray(crop.resize((w, h), Image.BILINEAR))
    if name == "gaussian_noise":
        return np.clip(a + rng.normal(0, 8.0, a.shape), 0, 255).astype(np.uint8)
    if name == "black_border":
        b = max(1, int(min(h, w) * rng.uniform(0.02, 0.06)))
        out = a.copy()
        out[:b] = 0
        out[-b:] = 0
        out[:, :b] = 0
        out[:, -b:] = 0
        return out
    raise ValueError(f"unknown offline augmentation {name!r}")


OFFLINE_OPS = ("hflip", "vflip", "rotate_small", "rotate90", "contrast", "gaussian_blur",
               "affine", "center_crop", "gaussian_noise", "black_border")


def augment_offline(samples: Sequence[Sample], out_root, factor: int = 1, seed: int = 0,
                    max_chain: int = 3) -> list[Path]:
    """Write ``factor`` augmented copies of every defective sample under ``out_root``.

    Each copy gets a PNG plus a ``.json`` sidecar naming its source and op
    chain, and the whole set is listed in ``out_root/manifest.csv``.
    """
    if factor < 1:
        raise ValueError("expansion factor must be >= 1")
    out_root = Path(out_root)
    written, rows, errors = [], [], []
    for s in samples:
        if s.label != 1:
            continue
        rel = Path(s.sample_id or "sample.png")
        for k in range(factor):
            rng = sample_seed(seed, s.sample_id, k)
            n_ops = int(rng.integers(1, max_chain + 1))
            chain = [OFFLINE_OPS[i] for i in rng.choice(len(OFFLINE_OPS), n_ops, replace=False)]
            a = s.image
            for name in chain:
                a = _offline_op(name, a, rng)
            dst = out_root / rel.parent / f"{rel.stem}_aug{k}.png"
            try:
                dst.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.ascontiguousarray(a)).save(dst)
                dst.with_suffix(".json").write_text(json.dumps({
                    "source": s.sample_id, "ops": chain, "seed": seed, "copy": k,
                    "probability": s.defect_probability, "cell_type": s.cell_type,
                }))
            except OSError as e:
                errors.append(f"{dst}: {e}")
                continue
            written.append(dst)
            rows.append({"path": dst.relative_to(out_root).as_posix(), "probability": s.defect_probability,
                         "cell_type": s.cell_type})
    if errors:
        raise DatasetError(f"{len(errors)} augmented images failed to write", errors)
    write_manifest(out_root / MANIFEST_NAME, rows)
    return written


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    size: int = 32
    patch: int = 0           # 0 -> size // 4
    contrast: float = 60.0   # darkening of the defect patch
    noise: float = 12.0
    fingers: int = 4


def synthetic_samples(n: int, seed: int = 0, spec: SyntheticSpec = SyntheticSpec(),
                      defective_fraction: float = 0.5, return_boxes: bool = False):
    """EL-like toy cells: textured background with dark busbars; defectives carry a dark patch.

    Returns samples (and, with ``return_boxes``, the (top, left, h, w) patch
    box per sample, None for functional ones).
    """
    rng = np.random.default_rng(seed)
    size = spec.size
    patch = spec.patch or max(2, size // 4)
    samples, boxes = [], []
    n_def = int(round(n * defective_fraction))
    labels = np.array([1] * n_def + [0] * (n - n_def))
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size]
    for i, lab in enumerate(labels):
        ctype = CELL_TYPES[i % 2]
        base = 150.0 + rng.normal(0, 5)
        img = np.full((size, size), base)
        if ctype == "poly":
            img += rng.normal(0, spec.noise * 0.6, (size // 4 + 1, size // 4 + 1)).repeat(4, 0).repeat(4, 1)[:size, :size]
        img += rng.normal(0, spec.noise, (size, size))
        for b in range(1, spec.fingers):
            x = int(b * size / spec.fingers)
            img[:, x] -= 50
        # darker rim
        r = np.sqrt((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / size
        img -= 40 * np.clip(r - 0.45, 0, None)
        box = None
        if lab:
            top = int(rng.integers(0, size - patch + 1))
            left = int(rng.integers(0, size - patch + 1))
            img[top:top + patch, left:left + patch] -= spec.contrast
            box = (top, left, patch, patch)
        prob = float(rng.choice([0.67, 1.0])) if lab else float(rng.choice([0.0, 0.33]))
        samples.append(Sample(np.clip(img, 0, 255).astype(np.uint8), prob, ctype, f"syn{seed}_{i:05d}.png"))
        boxes.append(box)
    return (samples, boxes) if return_boxes else samples


def write_dataset(samples: Sequence[Sample], root) -> Path:
    """Write samples as PNGs plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rel = s.sample_id or f"{len(rows):05d}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(s.image).save(root / rel)
        rows.append({"path": rel, "probability": s.defect_probability, "cell_type": s.cell_type})
    write_manifest(root / MANIFEST_NAME, rows)
    return root / MANIFEST_NAME


def save_split(split: dict[str, list[Sample]], path) -> None:
    Path(path).write_text(json.dumps({k: [s.sample_id for s in v] for k, v in split.items()}, indent=1))


def load_split(samples: Sequence[Sample], path) -> dict[str, list[Sample]]:
    ids = json.loads(Path(path).read_text())
    by_id = {s.sample_id: s for s in samples}
    missing = [i for v in ids.values() for i in v if i not in by_id]
    if missing:
        raise DatasetError("split references samples absent from the manifest", missing)
    return {k: [by_id[i] for i in v] for k, v in ids.items()}

