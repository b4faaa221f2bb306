"""Feature maps, keypoints, pair annotations and patch-grid geometry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class GecoError(Exception):
    """Base class for all library errors."""


class FeatureError(GecoError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A rows x cols grid of ``dim``-dimensional patch features.

    ``values`` has shape ``(rows * cols, dim)``, row-major by patch. The dtype
    of the input array is kept (float32 after reading from disk, float64 when
    built in memory) so file round trips stay bit-exact.
    """

    rows: int
    cols: int
    dim: int
    values: np.ndarray
    patch_size_px: int = 14

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.dim < 1:
            raise FeatureError(f"invalid feature map shape {self.rows}x{self.cols}x{self.dim}")
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        values = values.reshape(self.rows * self.cols, self.dim)
        if not np.all(np.isfinite(values)):
            raise FeatureError("feature values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, array, patch_size_px: int = 14) -> "FeatureMap":
        """Build from an array shaped (rows, cols, dim)."""
        array = np.asarray(array)
        if array.ndim != 3:
            raise FeatureError("expected an array shaped (rows, cols, dim)")
        rows, cols, dim = array.shape
        return cls(rows, cols, dim, array.reshape(rows * cols, dim), patch_size_px)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def grid(self) -> GridGeometry:
        return GridGeometry(self.rows, self.cols, self.patch_size_px)

    def with_values(self, values) -> "FeatureMap":
        values = np.asarray(values)
        return FeatureMap(self.rows, self.cols, values.shape[-1], values, self.patch_size_px)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            (self.rows, self.cols, self.dim, self.patch_size_px)
            == (other.rows, other.cols, other.dim, other.patch_size_px)
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class Keypoint:
    id: int
    x_px: Optional[float]
    y_px: Optional[float]
    visible: bool
    symmetric_id: Optional[int] = None

    @property
    def location(self) -> tuple[float, float]:
        if not self.visible or self.x_px is None or self.y_px is None:
            raise FeatureError(f"keypoint {self.id} has no location")
        return (float(self.x_px), float(self.y_px))


@dataclass(frozen=True, eq=False)
class PairAnnotation:
    source_id: str
    target_id: str
    image_size_src: tuple[int, int]
    image_size_tgt: tuple[int, int]
    keypoints_src: tuple[Keypoint, ...]
    keypoints_tgt: tuple[Keypoint, ...]
    mask_src: np.ndarray
    mask_tgt: np.ndarray
    bbox_src: Optional[tuple[float, float, float, float]] = None
    bbox_tgt: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "keypoints_src", tuple(self.keypoints_src))
        object.__setattr__(self, "keypoints_tgt", tuple(self.keypoints_tgt))
        object.__setattr__(self, "image_size_src", tuple(int(v) for v in self.image_size_src))
        object.__setattr__(self, "image_size_tgt", tuple(int(v) for v in self.image_size_tgt))
        for name in ("mask_src", "mask_tgt"):
            mask = np.asarray(getattr(self, name), dtype=bool)
            if mask.ndim != 2:
                raise FeatureError(f"{name} must be a 2-d grid")
            mask = mask.copy()
            mask.setflags(write=False)
            object.__setattr__(self, name, mask)
        validate_keypoints(self.keypoints_src, self.image_size_src)
        validate_keypoints(self.keypoints_tgt, self.image_size_tgt)
        ids_src = {k.id for k in self.keypoints_src}
        ids_tgt = {k.id for k in self.keypoints_tgt}
        if ids_src != ids_tgt:
            raise FeatureError("source and target keypoints must share one id schema")

    def keypoint_src(self, kp_id: int) -> Keypoint:
        return _by_id(self.keypoints_src, kp_id)

    def keypoint_tgt(self, kp_id: int) -> Keypoint:
        return _by_id(self.keypoints_tgt, kp_id)

    def check_geometry(self, xs: FeatureMap, xt: FeatureMap) -> None:
        if self.mask_src.shape != (xs.rows, xs.cols):
            raise FeatureError("mask_src does not match the source feature grid")
        if self.mask_tgt.shape != (xt.rows, xt.cols):
            raise FeatureError("mask_tgt does not match the target feature grid")

    def __eq__(self, other):
        if not isinstance(other, PairAnnotation):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.target_id == other.target_id
            and self.image_size_src == other.image_size_src
            and self.image_size_tgt == other.image_size_tgt
            and self.keypoints_src == other.keypoints_src
            and self.keypoints_tgt == other.keypoints_tgt
            and np.array_equal(self.mask_src, other.mask_src)
            and np.array_equal(self.mask_tgt, other.mask_tgt)
            and self.bbox_src == other.bbox_src
            and self.bbox_tgt == other.bbox_tgt
        )


def _by_id(keypoints, kp_id):
    for kp in keypoints:
        if kp.id == kp_id:
            return kp
    raise KeyError(kp_id)


def validate_keypoints(keypoints, image_size) -> None:
    """Check visibility/location consistency and the symmetry relation."""
    width, height = image_size
    by_id = {}
    for kp in keypoints:
        if kp.id in by_id:
            raise FeatureError(f"duplicate keypoint id {kp.id}")
        by_id[kp.id] = kp
        if kp.visible:
            if kp.x_px is None or kp.y_px is None:
                raise FeatureError(f"visible keypoint {kp.id} has no location")
            if not (0 <= kp.x_px < width and 0 <= kp.y_px < height):
                raise FeatureError(f"keypoint {kp.id} lies outside the image")
    for kp in keypoints:
        if kp.symmetric_id is None:
            continue
        if kp.symmetric_id == kp.id:
            raise FeatureError(f"keypoint {kp.id} is its own symmetric counterpart")
        other = by_id.get(kp.symmetric_id)
        if other is None or other.symmetric_id != kp.id:
            raise FeatureError(f"symmetric link of keypoint {kp.id} is not reciprocal")


def keypoint_to_patch(kp: Keypoint, grid: GridGeometry) -> int:
    x, y = kp.location
    row = min(max(int(np.floor(y / grid.patch_size)), 0), grid.rows - 1)
    col = min(max(int(np.floor(x / grid.patch_size)), 0), grid.cols - 1)
    return row * grid.cols + col


def patch_center_px(index: int, grid: GridGeometry) -> tuple[float, float]:
    if not 0 <= index < grid.n_patches:
        raise FeatureError(f"patch index {index} out of range [0, {grid.n_patches})")
    row, col = divmod(int(index), grid.cols)
    return ((col + 0.5) * grid.patch_size, (row + 0.5) * grid.patch_size)


def normalize_rows(values: np.ndarray) -> np.ndarray:
    """Unit-normalize the rows of a (n, d) array in float64."""
    values = np.asarray(values, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", values, values))
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise FeatureError(f"zero-norm feature vector at patch {int(bad[0])}")
    return values / norms[:, None]


def l2_normalize(f: FeatureMap) -> FeatureMap:
    return f.with_values(normalize_rows(f.values))
