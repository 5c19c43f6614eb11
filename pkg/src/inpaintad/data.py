"""Dataset ingestion for MVTec-style trees, VisA split manifests, and a
synthetic texture layout for desk-scale end-to-end runs.

The synthetic layout is an MVTec-shaped tree plus a ``clean/`` sibling
of ``test/`` holding the pre-defect reference for every anomalous image,
which the oracle inpainting backend consumes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ParameterError
from .imageops import resize_bilinear, save_image

LAYOUTS = ("mvtec", "visa", "synthetic")


@dataclass
class TestItem:
    path: str
    label: str                      # "normal" | "anomalous"
    gt_path: str | None = None
    clean_path: str | None = None

    def __post_init__(self):
        if self.label not in ("normal", "anomalous"):
            raise ParameterError(f"bad label {self.label!r}")
        if self.label == "anomalous" and not self.gt_path:
            raise DataError(f"anomalous item {self.path} has no ground-truth mask")
        if self.label == "normal" and self.gt_path:
            raise DataError(f"normal item {self.path} should not carry a ground-truth mask")


@dataclass
class DatasetIndex:
    layout: str
    root: str
    categories: list[str] = field(default_factory=list)
    train_normals: dict[str, list[str]] = field(default_factory=dict)
    test_items: dict[str, list[TestItem]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "layout": self.layout,
            "root": self.root,
            "categories": self.categories,
            "train_normals": self.train_normals,
            "test_items": {
                cat: [vars(t) for t in items] for cat, items in self.test_items.items()
            },
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        payload = json.loads(text)
        return cls(
            layout=payload["layout"],
            root=payload["root"],
            categories=payload["categories"],
            train_normals=payload["train_normals"],
            test_items={cat: [TestItem(**t) for t in items]
                        for cat, items in payload["test_items"].items()},
        )

    def save_cache(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load_cache(cls, path) -> "DatasetIndex":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class SupportSet:
    k: int
    per_category: dict[str, list[str]]
    seed: int


def _verify_image(path: Path) -> None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"))


def load_dataset(root, layout: str = "mvtec", verify: bool = True) -> DatasetIndex:
    """Walk the dataset tree into a DatasetIndex.

    mvtec/synthetic: category/train/good, category/test/<defect>,
    category/ground_truth/<defect>/<stem>_mask.png.
    visa: a split_csv/1cls.csv manifest with object,split,label,image,mask.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ParameterError(f"unknown layout {layout!r}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "visa":
        return _load_visa(root, verify)
    return _load_mvtec_tree(root, layout, verify)


def _load_mvtec_tree(root: Path, layout: str, verify: bool) -> DatasetIndex:
    index = DatasetIndex(layout=layout, root=str(root))
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        train_good = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_good.is_dir() or not test_dir.is_dir():
            continue
        cat = cat_dir.name
        normals = _image_files(train_good)
        items: list[TestItem] = []
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for img in _image_files(defect_dir):
                if verify:
                    _verify_image(img)
                if defect_dir.name == "good":
                    items.append(TestItem(path=str(img), label="normal"))
                    continue
                gt = cat_dir / "ground_truth" / defect_dir.name / f"{img.stem}_mask.png"
                if not gt.exists():
                    raise DataError(f"missing ground-truth mask {gt} for {img}")
                clean = cat_dir / "clean" / defect_dir.name / img.name
                items.append(TestItem(
                    path=str(img), label="anomalous", gt_path=str(gt),
                    clean_path=str(clean) if clean.exists() else None))
        if verify:
            for img in normals:
                _verify_image(Path(img))
        if not normals and not items:
            continue
        index.categories.append(cat)
        index.train_normals[cat] = [str(p) for p in normals]
        index.test_items[cat] = items
    if not index.categories:
        raise DataError(f"no categories found under {root}")
    return index


def _load_visa(root: Path, verify: bool) -> DatasetIndex:
    manifest = root / "split_csv" / "1cls.csv"
    if not manifest.exists():
        raise DataError(f"VisA manifest {manifest} not found")
    index = DatasetIndex(layout="visa", root=str(root))
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    by_cat: dict[str, dict[str, list]] = {}
    for row in rows:
        cat = row["object"]
        slot = by_cat.setdefault(cat, {"train": [], "test": []})
        img = root / row["image"]
        if row["split"] == "train":
            slot["train"].append(img)
            continue
        if row["label"] == "normal":
            slot["test"].append(TestItem(path=str(img), label="normal"))
        else:
            mask = row.get("mask", "")
            if not mask:
                raise DataError(f"missing ground-truth mask entry for {img}")
            slot["test"].append(TestItem(path=str(img), label="anomalous",
                                         gt_path=str(root / mask)))
    for cat in sorted(by_cat):
        if verify:
            for p in by_cat[cat]["train"]:
                _verify_image(Path(p))
            for t in by_cat[cat]["test"]:
                _verify_image(Path(t.path))
        index.categories.append(cat)
        index.train_normals[cat] = [str(p) for p in by_cat[cat]["train"]]
        index.test_items[cat] = by_cat[cat]["test"]
    if not index.categories:
        raise DataError(f"no categories found in {manifest}")
    return index


def sample_k_shot(index: DatasetIndex, k: int, seed: int) -> SupportSet:
    """Uniform without-replacement draw of k train normals per category."""
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    rng = np.random.default_rng(seed)
    per_category: dict[str, list[str]] = {}
    for cat in index.categories:
        pool = sorted(index.train_normals.get(cat, []))
        if len(pool) < k:
            raise ParameterError(f"category {cat!r} has {len(pool)} train normals, need k={k}")
        if k == 0:
            per_category[cat] = []
            continue
        picks = rng.choice(len(pool), size=k, replace=False)
        per_category[cat] = [pool[i] for i in picks]
    return SupportSet(k=k, per_category=per_category, seed=seed)


# --------------------------------------------------------------------------
# Synthetic texture generator
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    category: str = "synthtex"
    n_train: int = 4
    n_test_normal: int = 8
    n_test_defective: int = 8
    size: int = 256
    seed: int = 7
    defects_per_image: tuple[int, int] = (1, 2)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.35, 0.65, (9, 9))
    base = resize_bilinear(coarse, (size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = 0.04 * np.sin(2 * np.pi * (xx * rng.uniform(2, 5) / size
                                         + yy * rng.uniform(0, 2) / size))
    tint = rng.uniform(-0.04, 0.04, 3)
    grain = rng.normal(0.0, 0.015, (size, size))
    img = np.stack([base + stripes + grain + t for t in tint], axis=2)
    return np.clip(img, 0.05, 0.95)


def _inject_defect(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mutate img in place with one defect; returns its exact mask."""
    size = img.shape[0]
    margin = max(size // 8, 4)
    kind = rng.choice(["blob", "scratch", "square"])
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "blob":
        cy, cx = rng.integers(margin, size - margin, 2)
        r = int(rng.integers(max(size // 32, 3), max(size // 14, 5)))
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    elif kind == "scratch":
        y0, x0 = rng.integers(margin, size - margin, 2)
        angle = rng.uniform(0, np.pi)
        length = int(rng.integers(size // 6, size // 3 + 1))
        y1 = int(np.clip(y0 + length * np.sin(angle), 4, size - 4))
        x1 = int(np.clip(x0 + length * np.cos(angle), 4, size - 4))
        dist = _segment_distance(yy, xx, y0, x0, y1, x1)
        mask[dist <= rng.integers(2, 4)] = 1
    else:
        cy, cx = rng.integers(margin, size - margin, 2)
        half = int(rng.integers(max(size // 32, 3), max(size // 16, 5)))
        mask[max(cy - half, 0):cy + half, max(cx - half, 0):cx + half] = 1
    shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.35)
    color = np.clip(rng.uniform(0.0, 1.0, 3) * 0.2 + shift + 0.5, 0.0, 1.0)
    sel = mask.astype(bool)
    img[sel] = np.clip(0.25 * img[sel] + 0.75 * color, 0.0, 1.0)
    return mask


def _segment_distance(yy, xx, y0, x0, y1, x1) -> np.ndarray:
    vy, vx = y1 - y0, x1 - x0
    norm = max(vy * vy + vx * vx, 1e-9)
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / norm, 0.0, 1.0)
    py, px = y0 + t * vy, x0 + t * vx
    return np.hypot(yy - py, xx - px)


def generate_synthetic_dataset(root, cfg: SynthConfig | None = None) -> Path:
    """Write a synthetic-layout dataset and return its root."""
    cfg = cfg or SynthConfig()
    root = Path(root)
    rng = np.random.default_rng(cfg.seed)
    cat = root / cfg.category
    (cat / "train" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "defect").mkdir(parents=True, exist_ok=True)
    (cat / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)
    (cat / "clean" / "defect").mkdir(parents=True, exist_ok=True)

    for i in range(cfg.n_train):
        save_image(_texture(rng, cfg.size), cat / "train" / "good" / f"{i:03d}.png")
    for i in range(cfg.n_test_normal):
        save_image(_texture(rng, cfg.size), cat / "test" / "good" / f"{i:03d}.png")
    for i in range(cfg.n_test_defective):
        clean = _texture(rng, cfg.size)
        defective = clean.copy()
        mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
        for _ in range(int(rng.integers(cfg.defects_per_image[0], cfg.defects_per_image[1] + 1))):
            mask |= _inject_defect(defective, rng)
        save_image(clean, cat / "clean" / "defect" / f"{i:03d}.png")
        save_image(defective, cat / "test" / "defect" / f"{i:03d}.png")
        save_image(mask.astype(np.float64), cat / "ground_truth" / "defect" / f"{i:03d}_mask.png")
    return root
