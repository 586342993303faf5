"""Synthetic shape/caption pairs and the on-disk dataset layout.

On disk a split is a directory holding ``images/*.png`` (lossless) and
``captions.jsonl`` with one ``{"id", "image", "caption"}`` record per line.
Item ``i`` of a dataset generated with ``seed`` is rendered from its own
generator seeded by ``(seed, i)``, so items can be produced in any order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from ..encoders import Vocab
from ..errors import ConfigError, InputError

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 220, 50),
    "purple": (140, 60, 200),
    "orange": (245, 140, 30),
    "white": (245, 245, 245),
    "cyan": (40, 210, 220),
}
SHAPES = ("circle", "square", "triangle", "cross")
SIZES = {"small": 0.14, "large": 0.23}  # radius as a fraction of the image side
RELATIONS = ("above", "below", "left of", "right of")

SYNTHETIC_WORDS = (
    ["a", "small", "large"] + list(COLORS) + list(SHAPES) + ["above", "below", "left", "right", "of"]
)


def synthetic_vocab() -> Vocab:
    return Vocab(SYNTHETIC_WORDS)


@dataclass
class SceneObject:
    size: str
    color: str
    shape: str
    center: tuple[float, float]  # (row, col) in pixels

    def phrase(self) -> str:
        return f"a {self.size} {self.color} {self.shape}"


@dataclass
class Scene:
    objects: list[SceneObject]
    relation: Optional[str] = None
    background: int = 0

    def caption(self) -> str:
        if len(self.objects) == 1:
            return self.objects[0].phrase()
        a, b = self.objects
        return f"{a.phrase()} {self.relation} {b.phrase()}"


@dataclass
class PairedDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    captions: list[str]
    ids: list[str]
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captions)

    def float_images(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.images).to(dtype) / 255.0

    def subset(self, index: Sequence[int]) -> "PairedDataset":
        index = list(index)
        return PairedDataset(
            images=self.images[index],
            captions=[self.captions[i] for i in index],
            ids=[self.ids[i] for i in index],
            scenes=[self.scenes[i] for i in index] if self.scenes else [],
        )


def _shape_mask(shape: str, center, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - center[0], xx - center[1]
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "triangle":
        t = (dy + radius) / (2 * radius)  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= radius * t)
    if shape == "cross":
        arm = radius / 3
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise ValueError(shape)


def _random_object(rng: np.random.Generator, center) -> SceneObject:
    return SceneObject(
        size=str(rng.choice(list(SIZES))),
        color=str(rng.choice(list(COLORS))),
        shape=str(rng.choice(SHAPES)),
        center=center,
    )


def sample_scene(rng: np.random.Generator, image_size: int = 32) -> Scene:
    s = image_size
    background = int(rng.integers(10, 70))
    if rng.random() < 0.5:
        center = tuple(float(c) for c in rng.uniform(0.35 * s, 0.65 * s, size=2))
        return Scene([_random_object(rng, center)], background=background)
    relation = str(rng.choice(RELATIONS))
    near, far = 0.25 * s, 0.75 * s
    j = rng.uniform(-0.06 * s, 0.06 * s, size=4)
    if relation in ("above", "below"):
        first, second = (near + j[0], 0.5 * s + j[1]), (far + j[2], 0.5 * s + j[3])
        if relation == "below":
            first, second = (far + j[0], first[1]), (near + j[2], second[1])
    else:
        first, second = (0.5 * s + j[0], near + j[1]), (0.5 * s + j[2], far + j[3])
        if relation == "right of":
            first, second = (first[0], far + j[1]), (second[0], near + j[3])
    a = _random_object(rng, tuple(map(float, first)))
    b = _random_object(rng, tuple(map(float, second)))
    return Scene([a, b], relation=relation, background=background)


def render_scene(scene: Scene, image_size: int = 32) -> np.ndarray:
    img = np.full((image_size, image_size, 3), scene.background, dtype=np.uint8)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, obj.center, SIZES[obj.size] * image_size, image_size)
        img[mask] = COLORS[obj.color]
    return img


def generate_synthetic_dataset(n_pairs: int, seed: int, image_size: int = 32, offset: int = 0) -> PairedDataset:
    """Render ``n_pairs`` scenes with captions from the same scene graph.

    ``offset`` shifts the item indices so that disjoint splits can be drawn
    from one seed.
    """
    if n_pairs < 2:
        raise ConfigError(f"need at least 2 pairs, got {n_pairs}")
    images, captions, ids, scenes = [], [], [], []
    for i in range(offset, offset + n_pairs):
        rng = np.random.default_rng([seed, i])
        scene = sample_scene(rng, image_size)
        images.append(render_scene(scene, image_size))
        captions.append(scene.caption())
        ids.append(f"{i:06d}")
        scenes.append(scene)
    return PairedDataset(np.stack(images), captions, ids, scenes)


def synthetic_splits(n_train: int, n_heldout: int, seed: int, image_size: int = 32):
    train = generate_synthetic_dataset(n_train, seed, image_size)
    heldout = generate_synthetic_dataset(n_heldout, seed, image_size, offset=n_train)
    return train, heldout


# ---------------------------------------------------------------------------
# Disk IO
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None


def save_image(array: np.ndarray, path) -> None:
    """Write an H x W x 3 array (uint8, or float in [0, 1]) as PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(ds: PairedDataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "captions.jsonl", "w") as fh:
        for img, cap, ident in zip(ds.images, ds.captions, ds.ids):
            rel = f"images/{ident}.png"
            save_image(img, directory / rel)
            fh.write(json.dumps({"id": ident, "image": rel, "caption": cap}) + "\n")
    return directory


def resolve_split(directory, split: Optional[str] = None) -> Path:
    directory = Path(directory)
    if split and (directory / split / "captions.jsonl").exists():
        return directory / split
    if (directory / "captions.jsonl").exists() and not split:
        return directory
    raise InputError(f"no captions.jsonl for split {split!r} under {directory}")


def load_dataset(directory, split: Optional[str] = None) -> PairedDataset:
    root = resolve_split(directory, split)
    images, captions, ids = [], [], []
    with open(root / "captions.jsonl") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ident, rel, cap = str(rec["id"]), rec["image"], rec["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{root / 'captions.jsonl'}:{lineno}: bad record ({exc})") from None
            images.append(load_image(root / rel))
            captions.append(cap)
            ids.append(ident)
    if len(captions) < 2:
        raise InputError(f"{root}: need at least 2 image-caption pairs")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InputError(f"{root}: images have mixed shapes {sorted(shapes)}")
    return PairedDataset(np.stack(images), captions, ids)


def lookup_caption(image_path) -> Optional[str]:
    """Caption recorded for ``image_path`` in a sibling captions.jsonl, if any."""
    image_path = Path(image_path).resolve()
    for root in (image_path.parent, image_path.parent.parent):
        index = root / "captions.jsonl"
        if not index.exists():
            continue
        with open(index) as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if (root / rec.get("image", "")).resolve() == image_path:
                    return rec.get("caption")
    return None
