"""
Synthetic scenes standing in for a real detection/captioning corpus.

Every scene is a small RGB image with one to four flat-colored shapes aligned to
the patch grid, a binary mask per object, and one region caption per object.
Dots, the smallest squares, fill the center of a single patch.
Classes are (hue, shape) pairs; each hue comes in several shades and scenes use
one of two background tones, so a class shows up under several appearances.
Generation only depends on ``(seed, scene_id)``.
"""

from __future__ import annotations

import itertools
import json
import logging
import pathlib
from typing import Iterable, Iterator, Sequence

import attr
import numpy as np

from unicontext import exceptions
from unicontext.quantizers.annotations import BBox

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "unicontext-dataset 1"
MANIFEST_FILE = "manifest.txt"
SCENES_DIR = "scenes"

HUES: dict[str, tuple[tuple[int, int, int], ...]] = {
    "red": ((230, 30, 30), (180, 20, 40), (250, 90, 80)),
    "green": ((30, 200, 60), (20, 140, 50), (110, 230, 120)),
    "blue": ((40, 70, 230), (20, 40, 160), (100, 150, 250)),
    "yellow": ((240, 220, 30), (200, 170, 20), (250, 240, 120)),
}
SHAPES = ("square", "bar", "pillar", "cross")
BACKGROUNDS = ((70, 70, 70), (150, 150, 150))
MASK_ON = (255, 255, 255)
MASK_OFF = (0, 0, 0)

# Squares at scale 0 are dots, smaller than a patch
DOT_SHAPE = "square"

# Largest scale (in cells) at which each shape still fits an 8x8 grid
MAX_SCALE = {"square": 5, "bar": 4, "pillar": 4, "cross": 3}
MIN_GRID = 8

MAX_PLACEMENT_ATTEMPTS = 50

CLASS_NAMES: tuple[str, ...] = tuple(
    f"{hue} {shape}" for hue, shape in itertools.product(HUES, SHAPES)
)


def class_parts(class_index: int) -> tuple[str, str]:
    hue, shape = CLASS_NAMES[class_index].split(" ")
    return hue, shape


def palette() -> list[tuple[int, int, int]]:
    """
    Every flat color a scene or a mask can contain.
    """
    colors = [color for shades in HUES.values() for color in shades]
    return [*colors, *BACKGROUNDS, MASK_OFF, MASK_ON]


def palette_patches(patch_size: int) -> np.ndarray:
    """
    One flat, flattened patch per palette color, scaled to [0, 1].
    """
    colors = np.array(palette(), dtype=np.float64) / 255.0
    return np.repeat(colors[:, None, :], patch_size * patch_size, axis=1).reshape(
        len(colors), -1
    )


def dot_pattern(patch_size: int) -> np.ndarray:
    """
    Pixel footprint of a dot inside its patch: a centered square of half the
    side.
    """
    side = patch_size // 2
    start = (patch_size - side) // 2
    pattern = np.zeros((patch_size, patch_size), dtype=bool)
    pattern[start : start + side, start : start + side] = True
    return pattern


def min_scale(shape: str, patch_size: int) -> int:
    return 0 if shape == DOT_SHAPE and patch_size >= 2 else 1


def pinned_patches(patch_size: int) -> np.ndarray:
    """
    Patches the codebook must reproduce exactly: every flat palette color and,
    when dots exist, the mask of a dot.
    """
    patches = [palette_patches(patch_size)]
    if patch_size >= 2:
        dot = np.where(dot_pattern(patch_size)[..., None], MASK_ON, MASK_OFF)
        patches.append(dot.reshape(1, -1).astype(np.float64) / 255.0)
    return np.concatenate(patches)


@attr.dataclass(frozen=True, kw_only=True)
class DataConfig:
    """
    Attributes
    ----------
    seed :
        Root seed of the scene generator.
    train_scenes :
        Number of scenes in the train split.
    val_scenes :
        Number of scenes in the val split.
    image_size :
        Height and width of every scene, in pixels.
    patch_size :
        Side of a codebook patch, in pixels. Shapes are aligned on this grid.
    max_objects :
        Maximum number of objects per scene (at least one is always placed).
    holdout_classes :
        Class names that never appear in the train split.
    codebook_size :
        Maximum number of codebook entries. The palette and the dot mask are
        always entries, k-means fits the rest on dot patches.
    codebook_iters :
        Maximum number of k-means iterations.
    bpe_merges :
        Number of BPE merges learned on the train captions.
    caption_budget :
        Maximum caption length in text tokens.
    """

    seed: int = 0
    train_scenes: int = 2000
    val_scenes: int = 200
    image_size: int = 32
    patch_size: int = 4
    max_objects: int = 4
    holdout_classes: tuple[str, ...] = ()
    codebook_size: int = 32
    codebook_iters: int = 50
    bpe_merges: int = 64
    caption_budget: int = 32

    def __attrs_post_init__(self):
        if self.image_size % self.patch_size:
            raise exceptions.ConfigError(
                f"image_size={self.image_size} is not a multiple of "
                f"patch_size={self.patch_size}"
            )
        if self.image_size // self.patch_size < MIN_GRID:
            raise exceptions.ConfigError(
                "The cell grid is too small for the shape catalog"
            )
        if not 1 <= self.max_objects <= len(CLASS_NAMES):
            raise exceptions.ConfigError(
                f"max_objects must be in [1, {len(CLASS_NAMES)}]"
            )
        pinned = len(palette()) + int(self.patch_size >= 2)
        if self.codebook_size < pinned:
            raise exceptions.ConfigError(
                f"codebook_size must be at least {pinned} to hold every flat color"
            )
        unknown = set(self.holdout_classes) - set(CLASS_NAMES)
        if unknown:
            raise exceptions.ConfigError(
                f"Unknown holdout class(es): {', '.join(sorted(unknown))}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_image(self) -> int:
        return self.grid**2


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class SceneObject:
    class_index: int
    bbox: BBox
    mask: np.ndarray
    caption: str


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class SceneRecord:
    scene_id: int
    image: np.ndarray
    objects: tuple[SceneObject, ...]

    @property
    def captions(self) -> list[tuple[int, BBox, str]]:
        return [(obj.class_index, obj.bbox, obj.caption) for obj in self.objects]

    def object_for(self, class_index: int) -> SceneObject:
        for obj in self.objects:
            if obj.class_index == class_index:
                return obj
        raise exceptions.DatasetError(
            f"Scene {self.scene_id} has no object of class {class_index}"
        )

    def mask_image(self, class_index: int) -> np.ndarray:
        """
        The class mask rendered as a black and white RGB image.
        """
        mask = self.object_for(class_index).mask
        return np.where(mask[..., None], MASK_ON, MASK_OFF).astype(np.uint8)

    def same_as(self, other: SceneRecord) -> bool:
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.image, other.image)
            and len(self.objects) == len(other.objects)
            and all(
                a.class_index == b.class_index
                and a.bbox == b.bbox
                and a.caption == b.caption
                and np.array_equal(a.mask, b.mask)
                for a, b in zip(self.objects, other.objects)
            )
        )


def shape_cells(shape: str, scale: int) -> np.ndarray:
    """
    Boolean cell footprint of a shape at the given scale. A dot (square at
    scale 0) takes one cell.
    """
    if shape == "square":
        side = max(scale, 1)
        return np.ones((side, side), dtype=bool)
    if shape == "bar":
        return np.ones((scale, 2 * scale), dtype=bool)
    if shape == "pillar":
        return np.ones((2 * scale, scale), dtype=bool)
    if shape == "cross":
        side = 2 * scale + 1
        cells = np.zeros((side, side), dtype=bool)
        cells[scale, :] = True
        cells[:, scale] = True
        return cells
    raise exceptions.DatasetError(f"Unknown shape {shape!r}")


def size_word(cell_area: float) -> str:
    if cell_area < 4:
        return "small"
    if cell_area < 12:
        return "medium"
    return "large"


def location_word(bbox: BBox) -> str:
    center_x = (bbox.x1 + bbox.x2) / 2
    center_y = (bbox.y1 + bbox.y2) / 2
    column = "left" if center_x < 1 / 3 else "right" if center_x > 2 / 3 else ""
    row = "top" if center_y < 1 / 3 else "bottom" if center_y > 2 / 3 else ""
    return " ".join(filter(None, (row, column))) or "center"


def make_caption(class_index: int, cell_area: float, bbox: BBox) -> str:
    hue, shape = class_parts(class_index)
    return f"a {size_word(cell_area)} {hue} {shape} in the {location_word(bbox)}"


def mask_bbox(mask: np.ndarray) -> BBox:
    height, width = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(
        x1=cols[0] / width,
        y1=rows[0] / height,
        x2=(cols[-1] + 1) / width,
        y2=(rows[-1] + 1) / height,
    )


def generate_scene(
    rng: np.random.Generator,
    *,
    scene_id: int,
    config: DataConfig,
    allowed_classes: Sequence[int],
) -> SceneRecord:
    size, cell = config.image_size, config.patch_size
    grid = config.grid
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[...] = background
    occupied = np.zeros((grid, grid), dtype=bool)

    count = int(rng.integers(1, min(config.max_objects, len(allowed_classes)) + 1))
    classes = rng.choice(np.asarray(allowed_classes), size=count, replace=False)

    objects = []
    for class_index in classes:
        class_index = int(class_index)
        hue, shape = class_parts(class_index)
        color = HUES[hue][rng.integers(len(HUES[hue]))]
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            scale = int(rng.integers(min_scale(shape, cell), MAX_SCALE[shape] + 1))
            cells = shape_cells(shape, scale)
            rows, cols = cells.shape
            top = int(rng.integers(0, grid - rows + 1))
            left = int(rng.integers(0, grid - cols + 1))
            window = occupied[top : top + rows, left : left + cols]
            if not (window & cells).any():
                break
        else:
            logger.debug(
                f"Dropping object of class {class_index} in scene {scene_id}",
                extra={"action": "drop_object", "scene_id": scene_id},
            )
            continue

        window |= cells
        cell_mask = np.zeros((grid, grid), dtype=bool)
        cell_mask[top : top + rows, left : left + cols] = cells
        pattern = dot_pattern(cell) if scale == 0 else np.ones((cell, cell), bool)
        mask = np.kron(cell_mask, pattern)
        image[mask] = color
        bbox = mask_bbox(mask)
        objects.append(
            SceneObject(
                class_index=class_index,
                bbox=bbox,
                mask=mask,
                caption=make_caption(
                    class_index, float(cells.sum() * pattern.mean()), bbox
                ),
            )
        )

    return SceneRecord(scene_id=scene_id, image=image, objects=tuple(objects))


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, scene_id])


@attr.dataclass(frozen=True, kw_only=True)
class Dataset:
    config: DataConfig
    train: tuple[SceneRecord, ...]
    val: tuple[SceneRecord, ...]

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES

    def split(self, name: str) -> tuple[SceneRecord, ...]:
        if name not in ("train", "val"):
            raise exceptions.DatasetError(f"Unknown split {name!r}")
        return getattr(self, name)

    def scene(self, scene_id: int) -> SceneRecord:
        for scene in itertools.chain(self.train, self.val):
            if scene.scene_id == scene_id:
                return scene
        raise exceptions.DatasetError(f"Unknown scene id {scene_id}")

    def captions_corpus(self) -> list[str]:
        return [obj.caption for scene in self.train for obj in scene.objects] + [
            name for name in CLASS_NAMES
        ]


def split_ids(config: DataConfig) -> dict[str, range]:
    return {
        "train": range(config.train_scenes),
        "val": range(config.train_scenes, config.train_scenes + config.val_scenes),
    }


def allowed_classes(config: DataConfig, split: str) -> list[int]:
    if split == "val":
        return list(range(len(CLASS_NAMES)))
    held_out = set(config.holdout_classes)
    return [i for i, name in enumerate(CLASS_NAMES) if name not in held_out]


def generate_split(config: DataConfig, split: str) -> Iterator[SceneRecord]:
    classes = allowed_classes(config, split)
    for scene_id in split_ids(config)[split]:
        yield generate_scene(
            scene_rng(config.seed, scene_id),
            scene_id=scene_id,
            config=config,
            allowed_classes=classes,
        )


def build_dataset(config: DataConfig) -> Dataset:
    dataset = Dataset(
        config=config,
        train=tuple(generate_split(config, "train")),
        val=tuple(generate_split(config, "val")),
    )
    logger.info(
        f"Generated {len(dataset.train)} train and {len(dataset.val)} val scenes",
        extra={
            "action": "build_dataset",
            "seed": config.seed,
            "train_scenes": len(dataset.train),
            "val_scenes": len(dataset.val),
        },
    )
    return dataset


# Pools


@attr.dataclass(frozen=True, kw_only=True)
class PoolEntry:
    scene_id: int
    object_index: int


@attr.dataclass(frozen=True, kw_only=True)
class ClassPool:
    """
    For every class present in a split, the objects showing it.
    """

    entries: dict[int, tuple[PoolEntry, ...]]

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    def size(self, class_index: int) -> int:
        return len(self.entries.get(class_index, ()))


def build_pools(scenes: Iterable[SceneRecord]) -> ClassPool:
    entries: dict[int, list[PoolEntry]] = {}
    for scene in scenes:
        for object_index, obj in enumerate(scene.objects):
            entries.setdefault(obj.class_index, []).append(
                PoolEntry(scene_id=scene.scene_id, object_index=object_index)
            )
    return ClassPool(entries={key: tuple(value) for key, value in entries.items()})


def sample_in_context(
    pool: ClassPool,
    class_index: int,
    k: int,
    rng: np.random.Generator,
    *,
    exclude: int | None = None,
) -> list[PoolEntry]:
    """
    Draw ``k`` distinct pool entries of a class, uniformly without replacement,
    none of them from the ``exclude`` scene.
    """
    if k == 0:
        return []
    candidates = [
        entry
        for entry in pool.entries.get(class_index, ())
        if entry.scene_id != exclude
    ]
    if len(candidates) < k:
        raise exceptions.InsufficientPool(
            class_index=class_index, deficit=k - len(candidates)
        )
    chosen = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[int(i)] for i in chosen]


# Storage


def _manifest(dataset: Dataset) -> str:
    config = attr.asdict(dataset.config)
    lines = [
        MANIFEST_HEADER,
        f"config {json.dumps(config, sort_keys=True)}",
        f"classes {json.dumps(list(CLASS_NAMES))}",
    ]
    for split in ("train", "val"):
        lines.extend(
            f"scene {scene.scene_id} {split} {len(scene.objects)}"
            for scene in dataset.split(split)
        )
    return "\n".join(lines) + "\n"


def _scene_file(path: pathlib.Path, scene_id: int, kind: str) -> pathlib.Path:
    return path / SCENES_DIR / f"{scene_id}.{kind}"


def _objects_text(scene: SceneRecord) -> str:
    return "".join(
        f"{obj.class_index} {obj.bbox.x1!r} {obj.bbox.y1!r} {obj.bbox.x2!r} "
        f"{obj.bbox.y2!r}\t{obj.caption}\n"
        for obj in scene.objects
    )


def save_dataset(dataset: Dataset, path: pathlib.Path) -> None:
    """
    Layout::

        manifest.txt                  header, config, class table, scene index
        scenes/<id>.image.bin         H·W·3 raw uint8, row-major
        scenes/<id>.masks.bin         n·H·W raw uint8 (0 or 1), one plane per object
        scenes/<id>.objects.txt       "class x1 y1 x2 y2<TAB>caption" per object
    """
    scenes_dir = path / SCENES_DIR
    scenes_dir.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST_FILE).write_text(_manifest(dataset))
    for scene in itertools.chain(dataset.train, dataset.val):
        masks = np.array([obj.mask for obj in scene.objects], dtype=np.uint8)
        scene_id = scene.scene_id
        _scene_file(path, scene_id, "image.bin").write_bytes(scene.image.tobytes())
        _scene_file(path, scene_id, "masks.bin").write_bytes(masks.tobytes())
        _scene_file(path, scene_id, "objects.txt").write_text(_objects_text(scene))
    logger.info(
        f"Saved dataset to {path}",
        extra={"action": "save_dataset", "path": str(path)},
    )


def _read_manifest(
    path: pathlib.Path,
) -> tuple[DataConfig, list[tuple[int, str, int]]]:
    try:
        lines = (path / MANIFEST_FILE).read_text().splitlines()
    except FileNotFoundError as exc:
        raise exceptions.DatasetError(f"No dataset manifest in {path}") from exc
    if not lines or lines[0] != MANIFEST_HEADER:
        raise exceptions.DatasetError(f"{path / MANIFEST_FILE} is not a manifest")

    config = None
    scenes = []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            values = json.loads(rest)
            values["holdout_classes"] = tuple(values["holdout_classes"])
            config = DataConfig(**values)
        elif kind == "classes":
            if tuple(json.loads(rest)) != CLASS_NAMES:
                raise exceptions.DatasetError("Dataset class table does not match")
        elif kind == "scene":
            scene_id, split, count = rest.split(" ")
            if split not in ("train", "val"):
                raise exceptions.DatasetError(f"Unknown split in manifest: {split!r}")
            scenes.append((int(scene_id), split, int(count)))
        else:
            raise exceptions.DatasetError(f"Invalid manifest line: {line!r}")
    if config is None:
        raise exceptions.DatasetError("Manifest has no config line")
    return config, scenes


def _load_scene(
    path: pathlib.Path, scene_id: int, count: int, config: DataConfig
) -> SceneRecord:
    size = config.image_size
    try:
        image = np.frombuffer(
            _scene_file(path, scene_id, "image.bin").read_bytes(), dtype=np.uint8
        ).reshape(size, size, 3)
        masks = np.frombuffer(
            _scene_file(path, scene_id, "masks.bin").read_bytes(), dtype=np.uint8
        ).reshape(count, size, size)
        objects_text = _scene_file(path, scene_id, "objects.txt").read_text()
    except (OSError, ValueError) as exc:
        raise exceptions.DatasetError(f"Cannot read scene {scene_id}") from exc

    objects = []
    for mask, line in zip(masks, objects_text.splitlines()):
        head, caption = line.split("\t")
        class_index, x1, y1, x2, y2 = head.split(" ")
        objects.append(
            SceneObject(
                class_index=int(class_index),
                bbox=BBox(x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2)),
                mask=mask.astype(bool),
                caption=caption,
            )
        )
    if len(objects) != count:
        raise exceptions.DatasetError(f"Scene {scene_id} is missing objects")
    return SceneRecord(scene_id=scene_id, image=image.copy(), objects=tuple(objects))


def load_dataset(path: pathlib.Path) -> Dataset:
    config, index = _read_manifest(path)
    splits: dict[str, list[SceneRecord]] = {"train": [], "val": []}
    for scene_id, split, count in index:
        splits[split].append(_load_scene(path, scene_id, count, config))
    return Dataset(
        config=config, train=tuple(splits["train"]), val=tuple(splits["val"])
    )


def regenerate(path: pathlib.Path) -> bool:
    """
    Rebuild the dataset from its manifest and check it is identical to the
    stored one.
    """
    stored = load_dataset(path)
    rebuilt = build_dataset(stored.config)
    same_sizes = (len(stored.train), len(stored.val)) == (
        len(rebuilt.train),
        len(rebuilt.val),
    )
    identical = same_sizes and all(
        a.same_as(b)
        for a, b in itertools.chain(
            zip(stored.train, rebuilt.train), zip(stored.val, rebuilt.val)
        )
    )
    logger.info(
        f"Regenerated dataset {'matches' if identical else 'differs from'} {path}",
        extra={"action": "regenerate_dataset", "identical": identical},
    )
    return identical
