"""Dataset manifests, sample preparation and a synthetic crack generator."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import ConsistencyError, LoadError, PairingError, ParameterError, ShapeError

SPLITS = ("train", "val", "test", "zeroshot")
DEFAULT_RESOLUTION = 256
MASK_THRESHOLD = 127


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )


@dataclass
class ManifestEntry:
    image: Path
    mask: Path

    @property
    def id(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    name: str
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    declared_size: Optional[int] = None
    path: Optional[Path] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConsistencyError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if self.declared_size is not None and self.declared_size != len(self.entries):
            raise ConsistencyError(
                f"manifest {self.name!r} declares {self.declared_size} entries "
                f"but lists {len(self.entries)}"
            )

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def to_dict(self, relative_to: Optional[Path] = None) -> dict:
        def rel(p: Path) -> str:
            if relative_to is not None:
                try:
                    return p.resolve().relative_to(relative_to).as_posix()
                except ValueError:
                    pass
            return p.as_posix()

        doc = {
            "name": self.name,
            "split": self.split,
            "entries": [{"image": rel(e.image), "mask": rel(e.mask)} for e in self.entries],
        }
        if self.declared_size is not None:
            doc["declared_size"] = self.declared_size
        return doc


def load_manifest(path) -> DatasetManifest:
    """Read a JSON manifest and check that every entry pairs two readable files.

    Relative paths inside the manifest resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise LoadError(f"{path}: manifest needs 'name', 'split' and 'entries'")

    base = path.parent
    entries = []
    for i, item in enumerate(doc["entries"]):
        image, mask = item.get("image"), item.get("mask")
        if not image or not mask:
            orphan = image or mask or f"entry #{i}"
            missing = "mask" if image else "image"
            raise PairingError(f"{path}: {orphan} has no {missing}")
        entry = ManifestEntry(base / image, base / mask)
        for p in (entry.image, entry.mask):
            if not p.is_file():
                raise LoadError(f"{path}: listed file does not exist: {p}")
        entries.append(entry)

    return DatasetManifest(
        name=doc.get("name", path.stem),
        split=doc.get("split", "test"),
        entries=entries,
        declared_size=doc.get("declared_size"),
        path=path,
    )


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest.to_dict(relative_to=path.parent.resolve())
    path.write_text(json.dumps(doc, indent=2) + "\n")
    manifest.path = path
    return path


def _to_unit_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.bool_:
        return image.astype(np.float32)
    if np.issubdtype(image.dtype, np.integer):
        # wider integer images only scale by their own range when they use it
        top = 255.0
        if image.dtype != np.uint8 and image.max(initial=0) > 255:
            top = float(np.iinfo(image.dtype).max)
        return (image.astype(np.float32) / top).clip(0.0, 1.0)
    return image.astype(np.float32).clip(0.0, 1.0)


def _binarize_mask(mask: np.ndarray) -> np.ndarray:
    if mask.dtype == np.bool_:
        return mask.astype(np.uint8)
    values = np.unique(mask)
    if np.isin(values, (0, 1)).all():
        return mask.astype(np.uint8)
    return (mask > MASK_THRESHOLD).astype(np.uint8)


def prepare_sample(raw_image, raw_mask, target: int = DEFAULT_RESOLUTION, id: str = "") -> ImageSample:
    """Resize an image/mask pair to ``target`` x ``target`` and normalise it.

    The image is resized bilinearly and scaled to [0, 1]. The mask is resized
    with nearest-neighbour sampling and thresholded at intensity > 127, unless
    it already holds only 0/1 values, in which case it is kept as is.
    """
    if not isinstance(target, (int, np.integer)) or target <= 0:
        raise ParameterError(f"target resolution must be a positive integer, got {target!r}")
    image = np.asarray(raw_image)
    mask = np.asarray(raw_mask)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[..., 0]
    if image.ndim != 3 or image.shape[2] != 3 or mask.ndim != 2:
        raise ShapeError(f"expected HxWx3 image and HxW mask, got {image.shape} and {mask.shape}")
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    if min(mask.shape) < 1:
        raise ShapeError("empty image")

    image = _to_unit_float(image)
    mask = _binarize_mask(mask)
    if mask.shape != (target, target):
        image = cv2.resize(image, (target, target), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (target, target), interpolation=cv2.INTER_NEAREST)
    return ImageSample(id=id, image=np.ascontiguousarray(image, dtype=np.float32), mask=mask)


def read_entry(entry: ManifestEntry, target: int = DEFAULT_RESOLUTION) -> ImageSample:
    try:
        with Image.open(entry.image) as im:
            image = np.asarray(im.convert("RGB"))
        with Image.open(entry.mask) as im:
            mask = np.asarray(im.convert("L"))
    except OSError as exc:
        raise LoadError(f"cannot read {entry.image} / {entry.mask}: {exc}") from exc
    return prepare_sample(image, mask, target, id=entry.id)


def iter_samples(manifest: DatasetManifest, target: int = DEFAULT_RESOLUTION) -> Iterator[ImageSample]:
    for entry in manifest:
        yield read_entry(entry, target)


@dataclass
class SampleSet:
    """A whole split held in memory as stacked arrays."""

    name: str
    split: str
    ids: list[str]
    images: np.ndarray  # N x H x W x 3
    masks: np.ndarray  # N x H x W

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample], name: str = "", split: str = "test"):
        if not samples:
            return cls(name, split, [], np.zeros((0, 0, 0, 3), np.float32), np.zeros((0, 0, 0), np.uint8))
        return cls(
            name,
            split,
            [s.id for s in samples],
            np.stack([s.image for s in samples]),
            np.stack([s.mask for s in samples]),
        )

    def samples(self) -> list[ImageSample]:
        return [ImageSample(i, im, m) for i, im, m in zip(self.ids, self.images, self.masks)]


def load_split(manifest: DatasetManifest, target: int = DEFAULT_RESOLUTION, workers: int = 1) -> SampleSet:
    """Read and prepare every entry of a manifest, preserving manifest order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda e: read_entry(e, target), manifest.entries))
    else:
        samples = list(iter_samples(manifest, target))
    return SampleSet.from_samples(samples, manifest.name, manifest.split)


# -- synthetic cracks ---------------------------------------------------------


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.45, 0.75)
    coarse = cv2.GaussianBlur(rng.normal(0.0, 1.0, (size, size)).astype(np.float32), (0, 0), size / 12)
    coarse /= np.abs(coarse).max() + 1e-8
    grain = rng.normal(0.0, 0.04, (size, size)).astype(np.float32)
    gray = base + 0.12 * coarse + grain
    tint = rng.uniform(0.9, 1.1, 3).astype(np.float32)
    return np.clip(gray[..., None] * tint, 0.0, 1.0)


def _crack_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size), np.uint8)
    for _ in range(rng.integers(1, 3, endpoint=True)):
        n_pts = rng.integers(3, 7)
        pt = rng.uniform(0, size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        pts = [pt.copy()]
        for _ in range(n_pts - 1):
            heading += rng.normal(0, 0.6)
            pt = pt + rng.uniform(size / 10, size / 4) * np.array([np.cos(heading), np.sin(heading)])
            pts.append(pt.copy())
        poly = np.round(np.array(pts)).astype(np.int32).reshape(-1, 1, 2)
        thickness = int(rng.integers(1, 3, endpoint=True))
        cv2.polylines(mask, [poly], False, 1, thickness=thickness, lineType=cv2.LINE_8)
    return mask


def generate_crack_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One textured image with dark thin polylines and its exact binary mask.

    Returns an ``size x size x 3`` uint8 image and an ``size x size`` uint8 mask
    in {0, 1}. The mask is never empty and covers under a quarter of the image.
    """
    image = _background(rng, size)
    while True:
        mask = _crack_mask(rng, size)
        frac = mask.mean()
        if 0 < frac < 0.25:
            break
    darkness = rng.uniform(0.25, 0.5)
    shade = image * darkness + rng.normal(0, 0.03, image.shape).astype(np.float32)
    image = np.where(mask[..., None] == 1, shade, image)
    return (np.clip(image, 0, 1) * 255).round().astype(np.uint8), mask


def synth_crack_dataset(
    n: int,
    size: int,
    seed: int,
    out_dir,
    name: str = "synthetic",
    split: str = "train",
) -> DatasetManifest:
    """Write ``n`` synthetic crack image/mask PNG pairs plus ``manifest.json``.

    Output is fully determined by ``(n, size, seed)``.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if size < 8:
        raise ParameterError(f"size must be >= 8, got {size}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        image, mask = generate_crack_pair(rng, size)
        stem = f"{name}_{i:05d}"
        img_path = out_dir / "images" / f"{stem}.png"
        mask_path = out_dir / "masks" / f"{stem}.png"
        Image.fromarray(image, "RGB").save(img_path)
        Image.fromarray(mask * 255, "L").save(mask_path)
        entries.append(ManifestEntry(img_path, mask_path))

    manifest = DatasetManifest(name=name, split=split, entries=entries, declared_size=n)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
