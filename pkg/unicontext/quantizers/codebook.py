from __future__ import annotations

import logging
import pathlib
from typing import Sequence

import attr
import numpy as np
from sklearn.cluster import KMeans

from unicontext import exceptions
from unicontext.vocab import Segment, Vocabulary

logger = logging.getLogger(__name__)

CHANNELS = 3


def _check_entries(instance: Codebook, attribute, entries: np.ndarray) -> None:
    if entries.ndim != 2:
        raise exceptions.CodebookError(
            f"Codebook entries must be a 2D array, got shape {entries.shape}"
        )
    if entries.shape[0] < 2:
        raise exceptions.CodebookError("A codebook needs at least 2 entries")
    if not np.all(np.isfinite(entries)):
        raise exceptions.CodebookError("Codebook entries must be finite")
    if len(np.unique(entries, axis=0)) != len(entries):
        raise exceptions.CodebookError("Codebook entries must be distinct")


def _as_entries(value) -> np.ndarray:
    entries = np.array(value, dtype=np.float64)
    entries.setflags(write=False)
    return entries


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class Codebook:
    """
    Table of K patch embeddings of dimension D = 3·P², in [0, 1] RGB space.
    """

    entries: np.ndarray = attr.ib(converter=_as_entries, validator=_check_entries)
    patch_size: int

    def __attrs_post_init__(self):
        if self.patch_size < 1 or self.dimension != CHANNELS * self.patch_size**2:
            raise exceptions.CodebookError(
                f"Entry dimension {self.dimension} does not match "
                f"patch size {self.patch_size}"
            )

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dimension(self) -> int:
        return self.entries.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.patch_size == other.patch_size and np.array_equal(
            self.entries, other.entries
        )

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """
        Index of the L2-nearest entry for every row of ``vectors``. Ties go to
        the lowest index.
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        distances = ((vectors[:, None, :] - self.entries[None, :, :]) ** 2).sum(
            axis=-1
        )
        # argmin returns the first occurrence of the minimum
        return np.argmin(distances, axis=1)

    # Serialization

    def dumps(self) -> str:
        lines = [f"{self.size} {self.dimension} {self.patch_size}"]
        lines.extend(" ".join(repr(float(v)) for v in row) for row in self.entries)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Codebook:
        lines = text.splitlines()
        try:
            size, dimension, patch_size = (int(v) for v in lines[0].split())
            entries = [[float(v) for v in line.split()] for line in lines[1:]]
        except (IndexError, ValueError) as exc:
            raise exceptions.CodebookError("Malformed codebook file") from exc
        if len(entries) != size or any(len(row) != dimension for row in entries):
            raise exceptions.CodebookError(
                f"Codebook file announces {size}x{dimension} values but does not "
                "contain them"
            )
        return cls(entries=entries, patch_size=patch_size)

    def save(self, path: pathlib.Path) -> None:
        path.write_text(self.dumps())

    @classmethod
    def load(cls, path: pathlib.Path) -> Codebook:
        return cls.loads(path.read_text())


def image_to_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Split a H×W×3 image into row-major flattened patches. Integer images are
    scaled from [0, 255] to [0, 1], float images are taken as already scaled.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != CHANNELS:
        raise exceptions.ImageShapeError(
            f"Expected a H×W×3 image, got shape {image.shape}"
        )
    height, width, _ = image.shape
    if height % patch_size or width % patch_size:
        raise exceptions.ImageShapeError(
            f"Image of size {height}×{width} is not divisible by "
            f"patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    patches = (
        image.reshape(rows, patch_size, cols, patch_size, CHANNELS)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, CHANNELS * patch_size**2)
    )
    if np.issubdtype(patches.dtype, np.integer):
        return patches.astype(np.float64) / 255.0
    return patches.astype(np.float64)


def patches_to_image(
    patches: np.ndarray, patch_size: int, height: int, width: int
) -> np.ndarray:
    rows, cols = height // patch_size, width // patch_size
    image = (
        np.asarray(patches)
        .reshape(rows, cols, patch_size, patch_size, CHANNELS)
        .transpose(0, 2, 1, 3, 4)
        .reshape(height, width, CHANNELS)
    )
    return image.astype(np.float64)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def train_codebook(
    patches: np.ndarray,
    *,
    k: int,
    iters: int,
    seed: int,
    pinned: np.ndarray | None = None,
) -> Codebook:
    """
    Fit a codebook of ``k`` entries on flattened patches with k-means.

    Parameters
    ----------
    patches :
        Array of shape (n, D) with values in [0, 1].
    k :
        Number of entries.
    iters :
        Maximum number of Lloyd iterations.
    seed :
        Seeds the centroid initialization.
    pinned :
        Entries kept as they are, first in the codebook. k-means only fits the
        remaining entries, on the patches that are not pinned. When fewer such
        patches exist than free entries, each one becomes an entry and the
        codebook is smaller than ``k``.
    """
    if iters < 1:
        raise exceptions.CodebookError(f"iters must be >= 1, got {iters}")
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise exceptions.CodebookError(
            f"Patches must be a 2D array, got shape {patches.shape}"
        )
    patch_size = int(round((patches.shape[1] / CHANNELS) ** 0.5))

    unique, counts = np.unique(patches, axis=0, return_counts=True)
    if pinned is None:
        if len(unique) < k:
            raise exceptions.CodebookError(
                f"Cannot fit {k} entries on {len(unique)} distinct patches"
            )
        pinned = np.zeros((0, patches.shape[1]))
    else:
        pinned = np.asarray(pinned, dtype=np.float64)
        if len(pinned) > k:
            raise exceptions.CodebookError(
                f"{len(pinned)} pinned entries do not fit in {k} entries"
            )
        free = ~(unique[:, None, :] == pinned[None, :, :]).all(axis=-1).any(axis=-1)
        unique, counts = unique[free], counts[free]

    free_k = k - len(pinned)
    iterations, inertia = 0, 0.0
    if free_k == 0 or len(unique) <= free_k:
        centers = unique[:free_k]
    else:
        kmeans = KMeans(
            n_clusters=free_k,
            n_init=1,
            max_iter=iters,
            random_state=seed,
            algorithm="lloyd",
        ).fit(unique, sample_weight=counts.astype(np.float64))
        centers = kmeans.cluster_centers_
        iterations, inertia = int(kmeans.n_iter_), float(kmeans.inertia_)

    codebook = Codebook(
        entries=np.concatenate([pinned, centers]), patch_size=patch_size
    )
    logger.info(
        f"Trained codebook of {codebook.size} entries on {len(unique)} distinct "
        "patches",
        extra={
            "action": "train_codebook",
            "k": codebook.size,
            "pinned": len(pinned),
            "distinct_patches": len(unique),
            "iterations": iterations,
            "inertia": inertia,
        },
    )
    return codebook


def quantize_image(
    image: np.ndarray, codebook: Codebook, vocab: Vocabulary
) -> list[int]:
    """
    Map every patch of ``image`` to the vocabulary id of its nearest codebook
    entry, in row-major patch order.
    """
    codes = codebook.nearest(image_to_patches(image, codebook.patch_size))
    offset = vocab.segment_offsets[Segment.IMAGE]
    return [offset + int(code) for code in codes]


def dequantize_image(
    tokens: Sequence[int],
    codebook: Codebook,
    vocab: Vocabulary,
    height: int,
    width: int,
) -> np.ndarray:
    patch_size = codebook.patch_size
    if height % patch_size or width % patch_size:
        raise exceptions.ImageShapeError(
            f"Image of size {height}×{width} is not divisible by "
            f"patch size {patch_size}"
        )
    expected = (height // patch_size) * (width // patch_size)
    if len(tokens) != expected:
        raise exceptions.ImageShapeError(
            f"Expected {expected} image tokens for a {height}×{width} image, "
            f"got {len(tokens)}"
        )
    codes = []
    for token in tokens:
        segment, code = vocab.resolve(token)
        if segment is not Segment.IMAGE or code >= codebook.size:
            raise exceptions.TokenOutOfRange(f"Token {token} is not an image token")
        codes.append(code)
    return patches_to_image(codebook.entries[codes], patch_size, height, width)
