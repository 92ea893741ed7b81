"""Synthetic parts dataset and image-folder loader.

Every synthetic image shows one object: a grey body disk with ``P`` parts on
a ring around it. Part ``p`` always has the same shape and hue; its shade
encodes one class attribute. The class of an image fixes the attribute
vector (see :func:`attribute_table`), so the label is readable only from the
parts. Keypoints are exact part centroids.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from .backbone import ConfigError

log = logging.getLogger(__name__)

NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SPLITS = ("train", "val", "test")

PART_HUES = [(230, 40, 40), (40, 200, 60), (50, 90, 235), (240, 220, 40), (220, 60, 220), (40, 220, 220)]
PART_SIDES = [24, 4, 3, 4, 6, 5]  # polygon vertex count; 24 approximates a disk
PART_ROTATION = [0.0, 0.0, math.pi / 2, math.pi / 4, 0.0, math.pi / 5]
BODY_RGB = (170, 170, 170)
BACKGROUND_RGB = (25, 25, 25)


@dataclass
class SynthConfig:
    num_parts: int = 4
    num_classes: int = 4
    samples_per_class: int = 500
    image_size: int = 64
    attribute_levels: int = 2
    translation: float = 4.0  # max object shift, pixels
    rotation_deg: float = 10.0
    scale: tuple[float, float] = (0.9, 1.1)
    clutter: float = 0.1
    pixel_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.scale = tuple(self.scale)
        if not 1 <= self.num_parts <= len(PART_HUES):
            raise ConfigError(f"num_parts must be in [1, {len(PART_HUES)}]")
        capacity = self.attribute_levels**self.num_parts
        if self.num_classes > capacity:
            raise ConfigError(
                f"{self.num_classes} classes exceed attribute capacity {capacity} "
                f"({self.attribute_levels} levels ^ {self.num_parts} parts)"
            )
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ConfigError("num_classes and samples_per_class must be positive")

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def attribute_table(config: SynthConfig) -> np.ndarray:
    """``[C, P]`` shade level of each part for each class.

    Class ``c`` is written in base ``L`` with ``D = ceil(log_L C)`` digits and
    part ``p`` shows digit ``p mod D``, so every part carries class evidence.
    When ``D > P`` the extra digits go to the parts in turn.
    """
    C, P, L = config.num_classes, config.num_parts, config.attribute_levels
    digits = max(1, math.ceil(math.log(C, L) - 1e-9)) if C > 1 else 1
    table = np.zeros((C, P), dtype=np.int64)
    for c in range(C):
        ds = [(c // L**i) % L for i in range(digits)]
        if digits <= P:
            table[c] = [ds[p % digits] for p in range(P)]
        else:
            # more digits than parts: fold the code into mixed radix over parts
            code = c
            for p in range(P):
                table[c, p] = code % L
                code //= L
    if len({tuple(r) for r in table}) != C:
        raise ConfigError("attribute table is not injective for this configuration")
    return table


def part_color(part: int, level: int, levels: int) -> tuple[int, int, int]:
    base = np.array(PART_HUES[part], dtype=np.float64)
    factor = 1.0 - 0.5 * level / max(levels - 1, 1)
    return tuple(int(round(v)) for v in base * factor)


def _polygon(cx, cy, radius, sides, phase):
    return [
        (cx + radius * math.cos(phase + 2 * math.pi * t / sides), cy + radius * math.sin(phase + 2 * math.pi * t / sides))
        for t in range(sides)
    ]


def render_sample(config: SynthConfig, label: int, rng: np.random.Generator):
    """Render one image; returns ``(uint8 [3, H, W], keypoints [P, 3], part masks [P, H, W])``."""
    S = config.image_size
    u = S / 64.0
    attrs = attribute_table(config)[label]
    img = Image.new("RGB", (S, S), BACKGROUND_RGB)
    draw = ImageDraw.Draw(img)

    for _ in range(int(round(config.clutter * 20))):
        x0, y0 = rng.uniform(0, S, size=2)
        w, h = rng.uniform(2, 6, size=2) * u
        shade = tuple(int(v) for v in rng.integers(40, 110, size=3))
        draw.rectangle([x0, y0, x0 + w, y0 + h], fill=shade)

    cx = S / 2 + rng.uniform(-1, 1) * config.translation * u
    cy = S / 2 + rng.uniform(-1, 1) * config.translation * u
    angle = math.radians(rng.uniform(-1, 1) * config.rotation_deg)
    scale = rng.uniform(*config.scale)

    draw.polygon(_polygon(cx, cy, 13 * u * scale, 24, angle), fill=BODY_RGB)
    ring, size = 15 * u * scale, 6.5 * u * scale
    keypoints = np.zeros((config.num_parts, 3), dtype=np.float64)
    masks = np.zeros((config.num_parts, S, S), dtype=bool)
    for p in range(config.num_parts):
        theta = angle - math.pi / 2 + 2 * math.pi * p / config.num_parts
        px, py = cx + ring * math.cos(theta), cy + ring * math.sin(theta)
        poly = _polygon(px, py, size, PART_SIDES[p], PART_ROTATION[p] + angle)
        color = part_color(p, int(attrs[p]), config.attribute_levels)
        draw.polygon(poly, fill=color)
        mask_img = Image.new("L", (S, S), 0)
        ImageDraw.Draw(mask_img).polygon(poly, fill=255)
        masks[p] = np.asarray(mask_img) > 0
        vx, vy = np.mean(poly, axis=0)
        keypoints[p] = (vx, vy, 1.0)

    arr = np.asarray(img, dtype=np.float64)
    if config.pixel_noise > 0:
        arr = arr + rng.normal(0, config.pixel_noise * 255, size=arr.shape)
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    return arr.transpose(2, 0, 1), keypoints, masks


@dataclass
class PartsDataset:
    """Images as uint8 ``[N, 3, H, W]``; keypoints ``[N, P, 3]`` as ``(x, y, visible)``."""

    images: np.ndarray
    labels: np.ndarray
    keypoints: np.ndarray
    image_ids: list[str]
    class_names: list[str]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_parts(self) -> int:
        return self.keypoints.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str | None) -> np.ndarray:
        if split is None or split == "all":
            return np.arange(len(self))
        return self.splits[split]

    def tensors(self, indices=None) -> tuple[torch.Tensor, torch.Tensor]:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices)
        return normalize(self.images[idx]), torch.as_tensor(self.labels[idx], dtype=torch.long)

    def subset(self, split: str) -> "PartsDataset":
        idx = self.indices(split)
        return PartsDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            keypoints=self.keypoints[idx],
            image_ids=[self.image_ids[i] for i in idx],
            class_names=self.class_names,
            manifest=self.manifest,
        )


def normalize(images_uint8: np.ndarray | torch.Tensor) -> torch.Tensor:
    return normalize_pixels(torch.as_tensor(np.asarray(images_uint8), dtype=torch.float32) / 255.0)


def normalize_pixels(x: torch.Tensor) -> torch.Tensor:
    """Float pixels in [0, 1] to the fixed-statistics model input."""
    mean = torch.tensor(NORM_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(NORM_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`normalize`, returning float pixels in [0, 1] units."""
    mean = torch.tensor(NORM_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(NORM_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return x * std + mean


def split_indices(n: int, seed: int) -> dict[str, np.ndarray]:
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    a = int(round(SPLIT_FRACTIONS[0] * n))
    b = a + int(round(SPLIT_FRACTIONS[1] * n))
    return {"train": np.sort(order[:a]), "val": np.sort(order[a:b]), "test": np.sort(order[b:])}


def content_hash(images: np.ndarray, labels: np.ndarray, keypoints: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in (images, labels, keypoints):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def generate(config: SynthConfig, return_masks: bool = False):
    """Render the whole dataset. Sample ``i`` has class ``i % C`` and seed ``[seed, i]``."""
    N, S, P = config.num_samples, config.image_size, config.num_parts
    images = np.zeros((N, 3, S, S), dtype=np.uint8)
    keypoints = np.zeros((N, P, 3), dtype=np.float64)
    labels = np.arange(N) % config.num_classes
    masks = np.zeros((N, P, S, S), dtype=bool) if return_masks else None
    for i in range(N):
        rng = np.random.default_rng([config.seed, i])
        img, kp, m = render_sample(config, int(labels[i]), rng)
        images[i], keypoints[i] = img, kp
        if return_masks:
            masks[i] = m
    splits = split_indices(N, config.seed)
    manifest = {
        "config": asdict(config),
        "config_hash": config.config_hash(),
        "content_hash": content_hash(images, labels, keypoints),
        "split_sizes": {k: int(len(v)) for k, v in splits.items()},
        "normalization": {"mean": list(NORM_MEAN), "std": list(NORM_STD)},
        "attribute_table": attribute_table(config).tolist(),
    }
    class_names = [f"class_{c:02d}" for c in range(config.num_classes)]
    image_ids = [f"{class_names[labels[i]]}/img_{i:05d}" for i in range(N)]
    ds = PartsDataset(images, labels, keypoints, image_ids, class_names, splits, manifest)
    return (ds, masks) if return_masks else ds


# --- folder layout ---------------------------------------------------------

KEYPOINT_HEADER = ("image_id", "part_id", "x", "y", "visible")


def write_keypoints(path: str | Path, dataset: PartsDataset) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(KEYPOINT_HEADER)
        for i, image_id in enumerate(dataset.image_ids):
            for p in range(dataset.num_parts):
                x, y, v = dataset.keypoints[i, p]
                w.writerow([image_id, p, f"{x:.4f}", f"{y:.4f}", int(v)])


def write_folder(dataset: PartsDataset, root: str | Path) -> Path:
    """Write ``root/<class>/<name>.png``, ``root/keypoints.csv`` and ``root/manifest.json``."""
    root = Path(root)
    for i, image_id in enumerate(dataset.image_ids):
        path = root / f"{image_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(dataset.images[i].transpose(1, 2, 0)).save(path)
    write_keypoints(root / "keypoints.csv", dataset)
    manifest = dict(dataset.manifest)
    manifest["splits"] = {k: [dataset.image_ids[i] for i in v] for k, v in dataset.splits.items()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_keypoints(path: str | Path) -> dict[str, list[tuple[int, float, float, int]]]:
    rows: dict[str, list] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.setdefault(rec["image_id"], []).append(
                (int(rec["part_id"]), float(rec["x"]), float(rec["y"]), int(rec["visible"]))
            )
    return rows


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def load_folder(root: str | Path, keypoint_file: str | Path | None = None, image_size: int | None = None) -> PartsDataset:
    """Load ``root/<class_name>/<image>``; labels follow sorted class directory names.

    Image ids are ``"<class_name>/<file stem>"``. Images without keypoint rows
    get all-invisible keypoints; undecodable files are skipped and listed in
    ``dataset.errors``.
    """
    root = Path(root)
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    kp_rows = read_keypoints(keypoint_file) if keypoint_file and Path(keypoint_file).stat().st_size else {}
    num_parts = max((r[0] for rows in kp_rows.values() for r in rows), default=-1) + 1

    images, labels, kps, ids, errors = [], [], [], [], []
    missing = 0
    for c, name in enumerate(class_names):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            image_id = f"{name}/{path.stem}"
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    scale_x = scale_y = 1.0
                    if image_size is not None and im.size != (image_size, image_size):
                        scale_x, scale_y = image_size / im.size[0], image_size / im.size[1]
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
            except (UnidentifiedImageError, OSError) as exc:
                errors.append({"image_id": image_id, "path": str(path), "error": str(exc)})
                continue
            kp = np.zeros((num_parts, 3), dtype=np.float64)
            rows = kp_rows.get(image_id)
            if rows is None:
                missing += 1
            else:
                for part, x, y, vis in rows:
                    kp[part] = (x * scale_x, y * scale_y, float(vis))
            images.append(arr)
            labels.append(c)
            kps.append(kp)
            ids.append(image_id)

    if missing:
        log.warning("%d images have no keypoint rows", missing)
    if errors:
        log.warning("%d images could not be decoded", len(errors))
    if images and len({a.shape for a in images}) > 1:
        raise ConfigError("images differ in size; pass image_size to resize on load")
    images_arr = np.stack(images) if images else np.zeros((0, 3, 0, 0), dtype=np.uint8)
    labels_arr = np.asarray(labels, dtype=np.int64)
    kps_arr = np.stack(kps) if kps else np.zeros((0, num_parts, 3))

    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    order = {image_id: i for i, image_id in enumerate(ids)}
    stored = manifest.get("splits", {})
    if stored and all(image_id in order for v in stored.values() for image_id in v):
        splits = {k: np.sort(np.array([order[i] for i in v], dtype=np.int64)) for k, v in stored.items()}
    else:
        splits = split_indices(len(ids), 0)
    manifest["missing_keypoints"] = missing
    return PartsDataset(images_arr, labels_arr, kps_arr, ids, class_names, splits, manifest, errors)
