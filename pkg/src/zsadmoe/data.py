"""Synthetic texture/defect benchmark and dataset IO.

Each class is one procedural texture family with fixed parameters; images of a
class differ by phase/offset jitter and mild noise. Anomalous images carry one
rendered defect whose footprint is the ground-truth mask.
"""
from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DatasetError, InputError, ParameterError, ValidationError

logger = logging.getLogger(__name__)

TEXTURES = ("checker", "stripes", "blobs", "gradient", "noise-cellular")
DEFECTS = ("scratch-line", "blotch", "hole", "swap-patch")
MIN_DEFECT_CONTRAST = 0.1


@dataclass
class SyntheticClassSpec:
    class_id: str
    texture: str
    defect: str
    texture_params: dict = field(default_factory=dict)
    defect_area: Tuple[float, float] = (0.01, 0.06)
    anomaly_rate: float = 0.5

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ParameterError(f"unknown texture family {self.texture!r}; choose from {TEXTURES}")
        if self.defect not in DEFECTS:
            raise ParameterError(f"unknown defect family {self.defect!r}; choose from {DEFECTS}")
        lo, hi = self.defect_area = tuple(float(v) for v in self.defect_area)
        if not (0.001 < lo <= hi < 0.25):
            raise ParameterError(f"defect area range {self.defect_area} must lie inside (0.001, 0.25)")
        if not 0 <= self.anomaly_rate <= 1:
            raise ParameterError("anomaly_rate must lie in [0, 1]")


def default_class_specs() -> List[SyntheticClassSpec]:
    return [
        SyntheticClassSpec("A", "checker", "scratch-line", {"cell": 8, "colors": [[0.75, 0.7, 0.55], [0.45, 0.4, 0.3]]}),
        SyntheticClassSpec("B", "stripes", "blotch", {"period": 10, "angle": 0.5, "colors": [[0.3, 0.55, 0.7], [0.6, 0.75, 0.85]]}),
        SyntheticClassSpec("C", "blobs", "hole", {"n_blobs": 9, "scale": 7.0, "colors": [[0.55, 0.65, 0.4], [0.35, 0.45, 0.25]]}),
        SyntheticClassSpec("D", "gradient", "blotch", {"angle": 1.1, "colors": [[0.8, 0.55, 0.5], [0.5, 0.35, 0.45]]}),
        SyntheticClassSpec("E", "noise-cellular", "scratch-line", {"n_cells": 14, "colors": [[0.6, 0.6, 0.65], [0.4, 0.42, 0.5]]}),
    ]


@dataclass
class ManifestEntry:
    image: str
    mask: Optional[str]
    label: int
    class_id: str

    def to_json(self):
        return {"image": self.image, "mask": self.mask, "label": self.label, "class": self.class_id}


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: List[ManifestEntry]

    @property
    def classes(self) -> List[str]:
        return sorted({e.class_id for e in self.entries})

    def to_json(self) -> dict:
        return {"split": self.split, "entries": [e.to_json() for e in self.entries]}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict) or "entries" not in raw or "split" not in raw:
            raise ValidationError(f"manifest {path} must have 'split' and 'entries'")
        entries = []
        for i, e in enumerate(raw["entries"]):
            try:
                entries.append(ManifestEntry(e["image"], e.get("mask"), int(e["label"]), str(e["class"])))
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"manifest {path} entry {i} malformed: {exc}") from None
            if entries[-1].label not in (0, 1):
                raise ValidationError(f"manifest {path} entry {i}: label must be 0 or 1")
            if (entries[-1].label == 1) != (entries[-1].mask is not None):
                raise ValidationError(f"manifest {path} entry {i}: label/mask mismatch")
        return cls(path.parent, str(raw["split"]), entries)


# --------------------------------------------------------------------------- textures


def _coords(size):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy, xx


def _mix(colors, t):
    c0, c1 = np.asarray(colors[0], float), np.asarray(colors[1], float)
    return c0 + (c1 - c0) * t[..., None]


def render_texture(family: str, params: dict, size, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _coords(size)
    h, w = size
    colors = params.get("colors", [[0.7, 0.7, 0.7], [0.3, 0.3, 0.3]])
    if family == "checker":
        cell = params.get("cell", 8)
        oy, ox = rng.uniform(0, 2 * cell, size=2)
        t = ((np.floor((yy + oy) / cell) + np.floor((xx + ox) / cell)) % 2).astype(float)
    elif family == "stripes":
        period = params.get("period", 10)
        angle = params.get("angle", 0.0) + rng.normal(0, 0.05)
        phase = rng.uniform(0, 2 * math.pi)
        u = xx * math.cos(angle) + yy * math.sin(angle)
        t = 0.5 + 0.5 * np.sin(2 * math.pi * u / period + phase)
    elif family == "blobs":
        n = params.get("n_blobs", 8)
        scale = params.get("scale", 7.0)
        field_ = np.zeros(size)
        for _ in range(n):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = scale * rng.uniform(0.7, 1.3)
            field_ += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        t = np.clip(field_ / max(field_.max(), 1e-9), 0, 1)
    elif family == "gradient":
        angle = params.get("angle", 0.0) + rng.normal(0, 0.1)
        u = (xx - w / 2) * math.cos(angle) + (yy - h / 2) * math.sin(angle)
        t = np.clip(0.5 + u / (1.2 * max(h, w)) + rng.uniform(-0.1, 0.1), 0, 1)
    elif family == "noise-cellular":
        n = params.get("n_cells", 12)
        pts = rng.uniform(0, 1, size=(n, 2)) * np.array([h, w])
        d = np.sqrt((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2)
        d.sort(axis=-1)
        t = np.clip((d[..., 1] - d[..., 0]) / (0.35 * math.sqrt(h * w / n)), 0, 1)
    else:
        raise ParameterError(f"unknown texture family {family!r}")
    img = _mix(colors, t)
    img += rng.normal(0, 0.015, size=img.shape)
    return np.clip(img, 0, 1)


# --------------------------------------------------------------------------- defects


def _defect_mask(family: str, size, target_area: float, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    yy, xx = _coords(size)
    n_px = target_area * h * w
    if family == "scratch-line":
        width = rng.uniform(1.5, 2.5)
        length = min(n_px / width, 0.9 * math.hypot(h, w))
        theta = rng.uniform(0, math.pi)
        dy, dx = math.sin(theta), math.cos(theta)
        half = length / 2
        cy = rng.uniform(half * abs(dy) + 2, h - half * abs(dy) - 2) if h > length * abs(dy) + 4 else h / 2
        cx = rng.uniform(half * abs(dx) + 2, w - half * abs(dx) - 2) if w > length * abs(dx) + 4 else w / 2
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        return (np.abs(along) <= half) & (np.abs(across) <= width / 2)
    if family in ("blotch", "hole"):
        ratio = rng.uniform(0.6, 1.0)
        a = math.sqrt(n_px / (math.pi * ratio))
        b = a * ratio
        theta = rng.uniform(0, math.pi)
        cy, cx = rng.uniform(a + 1, h - a - 1), rng.uniform(a + 1, w - a - 1)
        u = (yy - cy) * math.cos(theta) + (xx - cx) * math.sin(theta)
        v = -(yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)
        r = (u / a) ** 2 + (v / b) ** 2
        if family == "blotch":
            ang = np.arctan2(v, u)
            wobble = 1 + 0.15 * np.sin(3 * ang + rng.uniform(0, 2 * math.pi))
            return r <= wobble
        return r <= 1
    if family == "swap-patch":
        side = max(2, int(round(math.sqrt(n_px))))
        y0, x0 = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        m = np.zeros(size, bool)
        m[y0:y0 + side, x0:x0 + side] = True
        return m
    raise ParameterError(f"unknown defect family {family!r}")


def apply_defect(image: np.ndarray, family: str, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = image.copy()
    if family == "scratch-line":
        value = 0.05 if image[mask].mean() > 0.5 else 0.95
        out[mask] = value + rng.normal(0, 0.02, size=(mask.sum(), 3))
    elif family == "blotch":
        shift = rng.choice([-1, 1]) * rng.uniform(0.2, 0.35, size=3)
        out[mask] = image[mask] + shift
    elif family == "hole":
        out[mask] = rng.uniform(0.02, 0.08) + rng.normal(0, 0.01, size=(mask.sum(), 3))
    elif family == "swap-patch":
        ys, xs = np.nonzero(mask)
        y0, x0, side = ys.min(), xs.min(), ys.max() - ys.min() + 1
        h, w = mask.shape
        sy, sx = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        patch = image[sy:sy + side, sx:sx + side]
        patch = np.rot90(patch, k=int(rng.integers(1, 4)))[..., ::-1]
        out[y0:y0 + side, x0:x0 + side] = patch
    else:
        raise ParameterError(f"unknown defect family {family!r}")
    return np.clip(out, 0, 1)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def render_sample(spec: SyntheticClassSpec, anomalous: bool, size, rng: np.random.Generator,
                  max_tries: int = 50) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Render one 8-bit image (and 8-bit mask if anomalous)."""
    clean = render_texture(spec.texture, spec.texture_params, size, rng)
    if not anomalous:
        return _to_uint8(clean), None
    lo, hi = spec.defect_area
    n = size[0] * size[1]
    for _ in range(max_tries):
        target = rng.uniform(lo, hi)
        mask = _defect_mask(spec.defect, size, target, rng)
        if not (lo * n <= mask.sum() <= hi * n):
            continue
        img = _to_uint8(apply_defect(clean, spec.defect, mask, rng))
        contrast = np.abs(img[mask].astype(float) / 255 - _to_uint8(clean)[mask].astype(float) / 255).mean()
        if contrast >= MIN_DEFECT_CONTRAST:
            return img, (mask.astype(np.uint8) * 255)
    raise DatasetError(f"could not render a valid {spec.defect} defect for class {spec.class_id}")


def _class_rng(seed: int, class_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(class_id.encode())])


def generate_synthetic_dataset(specs: Sequence[SyntheticClassSpec], n_per_class: int, seed: int, out_dir,
                               splits: Optional[Dict[str, Sequence[str]]] = None,
                               image_size=(64, 64)) -> Dict[str, DatasetManifest]:
    """Write PNG images/masks for every class plus one manifest JSON per split.

    ``splits`` maps split name to class ids (default: all classes in ``"all"``).
    Returns the manifests keyed by split name.
    """
    if not specs:
        raise ParameterError("need at least one class spec")
    if n_per_class < 1:
        raise ParameterError("n_per_class must be positive")
    ids = [s.class_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ParameterError(f"duplicate class ids {ids}")
    splits = dict(splits or {"all": ids})
    for name, cls in splits.items():
        unknown = set(cls) - set(ids)
        if unknown:
            raise ParameterError(f"split {name!r} names unknown classes {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries_by_class = {}
        for spec in specs:
            ss = _class_rng(seed, spec.class_id)
            n_anom = int(round(n_per_class * spec.anomaly_rate))
            order_rng = np.random.default_rng(ss.spawn(1)[0])
            anomalous = np.zeros(n_per_class, bool)
            anomalous[order_rng.permutation(n_per_class)[:n_anom]] = True
            img_dir, mask_dir = out / "images" / spec.class_id, out / "masks" / spec.class_id
            img_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for i, child in enumerate(np.random.SeedSequence([seed, zlib.crc32(spec.class_id.encode()), 1]).spawn(n_per_class)):
                rng = np.random.default_rng(child)
                img, mask = render_sample(spec, bool(anomalous[i]), image_size, rng)
                rel_img = f"images/{spec.class_id}/{i:04d}.png"
                Image.fromarray(img, "RGB").save(out / rel_img)
                rel_mask = None
                if mask is not None:
                    mask_dir.mkdir(parents=True, exist_ok=True)
                    rel_mask = f"masks/{spec.class_id}/{i:04d}.png"
                    Image.fromarray(mask, "L").save(out / rel_mask)
                entries.append(ManifestEntry(rel_img, rel_mask, int(mask is not None), spec.class_id))
            entries_by_class[spec.class_id] = entries
            logger.info("class %s: %d images (%d anomalous)", spec.class_id, n_per_class, n_anom)
        manifests = {}
        for name, cls in splits.items():
            man = DatasetManifest(out, name, [e for c in cls for e in entries_by_class[c]])
            man.save(out / f"{name}.json")
            manifests[name] = man
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    return manifests


# --------------------------------------------------------------------------- loading


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) float in [0, 1]
    mask: Optional[np.ndarray]  # (h, w) {0, 1} or None for normal images
    label: int
    class_id: str


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None


def load_dataset(manifest_path, shuffle_seed: Optional[int] = None) -> List[Sample]:
    man = manifest_path if isinstance(manifest_path, DatasetManifest) else DatasetManifest.read(manifest_path)
    order = np.arange(len(man.entries))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(order))
    samples = []
    for i in order:
        e = man.entries[i]
        img = _read_png(man.root / e.image, "RGB").astype(np.float64) / 255.0
        mask = None
        if e.mask is not None:
            mask = (_read_png(man.root / e.mask, "L").astype(np.float64) / 255.0 >= 0.5).astype(np.uint8)
            if mask.shape != img.shape[:2]:
                raise ValidationError(f"{e.mask}: mask shape {mask.shape} != image shape {img.shape[:2]}")
            if not mask.any():
                raise ValidationError(f"{e.image}: labelled anomalous but mask {e.mask} is empty")
        samples.append(Sample(img, mask, e.label, e.class_id))
    return samples


def stack_samples(samples: Sequence[Sample]):
    """``(X, masks, labels, classes)`` as arrays; normal images get all-zero masks."""
    if not samples:
        raise InputError("no samples")
    x = np.stack([s.image for s in samples])
    masks = np.stack([s.mask if s.mask is not None else np.zeros(s.image.shape[:2], np.uint8) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    classes = np.array([s.class_id for s in samples])
    return x, masks, y, classes


def check_disjoint(train_classes: Sequence[str], test_classes: Sequence[str]) -> None:
    shared = sorted(set(train_classes) & set(test_classes))
    if shared:
        raise ValidationError(f"train and test splits share classes {shared}")


def write_anomaly_map_image(m, path) -> None:
    """8-bit grayscale PNG (or PGM by suffix); pixel = round-half-up(255 * M)."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"anomaly map must be 2-D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise InputError("anomaly map values must lie in [0, 1]")
    px = np.floor(arr * 255 + 0.5).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(px, "L").save(path, format="PPM" if path.suffix.lower() == ".pgm" else "PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from None
