"""
Binary masks, uncompressed COCO run-length encoding, overlap measures and
morphology.

RLE layout: column-major (Fortran order) run counts, starting with the count
of zeros, stored as {"counts": [...], "size": [height, width]}.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.geometry.boxes import BoundingBox

# 3x3 square element for erosion, cross for 4-connectivity
SQUARE_3X3 = np.ones((3, 3), dtype=bool)
CROSS_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class BinaryMask:
    """Immutable H x W bit grid."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        array = np.array(bits, dtype=bool, copy=True)
        if array.ndim != 2:
            raise ValueError(f"BinaryMask expects a 2-D grid, got shape {array.shape}")
        array.setflags(write=False)
        self._bits = array

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_rle(cls, rle: Dict) -> "BinaryMask":
        return cls(decode_rle(rle))

    @property
    def bits(self) -> np.ndarray:
        """Read-only view of the underlying boolean grid."""
        return self._bits

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._bits.shape

    @property
    def area(self) -> int:
        return int(self._bits.sum())

    def to_rle(self) -> Dict:
        return encode_rle(self._bits)

    def bounding_box(self) -> BoundingBox:
        """Tight pixel box (x2/y2 exclusive); zero box at the origin when empty."""
        rows = np.flatnonzero(self._bits.any(axis=1))
        cols = np.flatnonzero(self._bits.any(axis=0))
        if rows.size == 0:
            return BoundingBox(0.0, 0.0, 0.0, 0.0)
        return BoundingBox(
            float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    __hash__ = None

    def __repr__(self) -> str:
        return f"BinaryMask(height={self.height}, width={self.width}, area={self.area})"


def encode_rle(bits) -> Dict:
    """Uncompressed column-major RLE of a 2-D boolean grid."""
    array = np.asarray(bits, dtype=bool)
    height, width = array.shape
    flat = array.ravel(order="F")
    if flat.size == 0:
        return {"counts": [], "size": [height, width]}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return {"counts": [int(r) for r in runs], "size": [int(height), int(width)]}


def decode_rle(rle: Dict) -> np.ndarray:
    """Inverse of encode_rle.

    Raises:
        ValueError: if the counts do not cover exactly height * width pixels
    """
    try:
        height, width = (int(v) for v in rle["size"])
        counts = np.asarray(rle["counts"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"Malformed RLE object: {e}")
    if np.any(counts < 0):
        raise ValueError("RLE counts must be nonnegative")
    if int(counts.sum()) != height * width:
        raise ValueError(
            f"RLE counts sum to {int(counts.sum())}, expected {height * width} for size {height}x{width}"
        )
    values = (np.arange(counts.size) % 2).astype(bool)
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def _check_same_shape(a: BinaryMask, b: BinaryMask):
    if a.shape != b.shape:
        raise ValueError(f"Mask dimension mismatch: {a.shape} vs {b.shape}")


def intersection_count(a: BinaryMask, b: BinaryMask) -> int:
    _check_same_shape(a, b)
    return int(np.logical_and(a.bits, b.bits).sum())


def overlap_ratio(a: BinaryMask, b: BinaryMask) -> float:
    """|a & b| / max(area(a), area(b)); 0 when both masks are empty."""
    inter = intersection_count(a, b)
    larger = max(a.area, b.area)
    if larger == 0:
        return 0.0
    return inter / larger


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter = intersection_count(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Pixelwise OR of a nonempty list of same-sized masks."""
    masks = list(masks)
    if not masks:
        raise ValueError("mask_union needs at least one mask")
    out = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        _check_same_shape(masks[0], m)
        out |= m.bits
    return BinaryMask(out)


def erode(mask: BinaryMask) -> BinaryMask:
    """Erosion by a 3x3 square; pixels outside the grid count as unset."""
    if mask.height == 0 or mask.width == 0:
        return mask
    eroded = ndimage.binary_erosion(mask.bits, structure=SQUARE_3X3, border_value=0)
    return BinaryMask(eroded)


def connected_components(mask: BinaryMask) -> Tuple[np.ndarray, int]:
    """4-connected labelling: (int grid with labels 1..n, 0 = unset; n)."""
    if mask.height == 0 or mask.width == 0:
        return np.zeros(mask.shape, dtype=np.int32), 0
    labels, count = ndimage.label(mask.bits, structure=CROSS_4)
    return labels.astype(np.int32), int(count)


def rasterize_box(box: BoundingBox, height: int, width: int) -> BinaryMask:
    """Pixels whose centers fall inside the box."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    rows = (ys >= box.y1) & (ys < box.y2)
    cols = (xs >= box.x1) & (xs < box.x2)
    return BinaryMask(rows[:, None] & cols[None, :])


def masks_to_matrix(masks: Sequence[BinaryMask]) -> np.ndarray:
    """Stack masks into an (n, H*W) float matrix."""
    if not masks:
        return np.zeros((0, 0), dtype=np.float64)
    return np.stack([m.bits.ravel() for m in masks]).astype(np.float64)


def pairwise_mask_iou(a: List[BinaryMask], b: List[BinaryMask]) -> np.ndarray:
    """IoU matrix between two lists of same-sized masks.

    Raises:
        ValueError: if any mask in either list differs in size from the first
    """
    if not a or not b:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    for m in list(a[1:]) + list(b):
        _check_same_shape(a[0], m)
    ma = masks_to_matrix(a)
    mb = masks_to_matrix(b)
    inter = ma @ mb.T
    union = ma.sum(axis=1)[:, None] + mb.sum(axis=1)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)
