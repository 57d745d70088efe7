import enum
import math
from pathlib import Path
from typing import Any, Sequence, Tuple, Union

import numpy as np
from attr import define, field

from patchseek import netpbm
from patchseek.errors import AnnotationError, FormatError, ParameterError, ShapeError
from patchseek.gridcore import Grid2D

# Label values below this are flushed to zero to keep masks sparse.
FLUSH_BELOW = 1e-4


class Provenance(str, enum.Enum):  # noqa: WPS600
    """Where a pseudo-mask came from."""

    GAUSSIAN = "gaussian"
    EXTERNAL = "external"
    HYBRID = "hybrid"


class HybridMode(str, enum.Enum):  # noqa: WPS600
    """Scope of the non-empty test of the external mask."""

    PER_IMAGE = "per_image"
    PER_BOX = "per_box"


def _check_extent(instance: Any, attribute: Any, value: float) -> None:
    if not value > 0:
        raise AnnotationError(f"box {attribute.name} must be positive, got {value}")


@define(frozen=True)
class BoundingBox:
    """An axis-aligned box in center form."""

    xc: float = field(converter=float)
    yc: float = field(converter=float)
    w: float = field(converter=float, validator=_check_extent)
    h: float = field(converter=float, validator=_check_extent)
    category: int = 0

    @classmethod
    def from_corners(  # noqa: WPS211
        cls,
        x1: float,
        y1: float,
        x2: float,
        y2: float,
        category: int = 0,
    ) -> "BoundingBox":
        """
        Make a box from its top-left and bottom-right corners.

        :param x1: left edge.
        :param y1: top edge.
        :param x2: right edge.
        :param y2: bottom edge.
        :param category: class label.
        :return: the box.
        """
        return cls(
            xc=(x1 + x2) / 2,
            yc=(y1 + y2) / 2,
            w=x2 - x1,
            h=y2 - y1,
            category=category,
        )

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        """
        The (x1, y1, x2, y2) corners.

        :return: the corners.
        """
        return (
            self.xc - self.w / 2,
            self.yc - self.h / 2,
            self.xc + self.w / 2,
            self.yc + self.h / 2,
        )

    def scaled(self, factor: float) -> "BoundingBox":
        """
        Divide all coordinates by a factor, e.g. image pixels to mask cells.

        :param factor: the divisor.
        :return: the scaled box.
        """
        return BoundingBox(
            xc=self.xc / factor,
            yc=self.yc / factor,
            w=self.w / factor,
            h=self.h / factor,
            category=self.category,
        )


def _check_tau(instance: Any, attribute: Any, value: float) -> None:
    if not 0 < value < 1:
        raise ParameterError(f"tau must be in (0, 1), got {value}")


@define(frozen=True)
class GaussianSpec:
    """Parameters of the box-to-Gaussian label law."""

    tau: float = field(default=0.5, validator=_check_tau)


def _check_unit_range(instance: Any, attribute: Any, value: Grid2D) -> None:
    if value.values.min() < 0 or value.values.max() > 1:
        raise ParameterError("mask values must lie in [0, 1]")


@define(frozen=True, eq=False)
class PseudoMask:
    """An objectness label with values in [0, 1]."""

    grid: Grid2D = field(validator=_check_unit_range)
    provenance: Provenance = field(converter=Provenance)

    @property
    def shape(self) -> Tuple[int, int]:  # noqa: D102
        return self.grid.shape


def nearest_cell(coordinate: float, size: int) -> int:
    """
    Map a real mask coordinate to the index of the nearest cell.

    Halfway points go to the lower index, the same cell the row-major
    tie rule of the local-maxima search keeps. The index is clamped in-bounds.
    :param coordinate: real coordinate in mask units.
    :param size: number of cells along the axis.
    :return: the cell index.
    """
    return min(max(math.ceil(coordinate - 0.5), 0), size - 1)


def gaussian_reach(spec: GaussianSpec) -> float:
    """
    Distance from the center, in box half-extents, beyond which labels are flushed.

    :param spec: label parameters.
    :return: the reach.
    """
    return math.sqrt(2 * math.log(1 / FLUSH_BELOW) / -math.log(spec.tau))


def gaussian_profile(
    coordinates: np.ndarray,
    center: float,
    extent: float,
    spec: GaussianSpec,
) -> np.ndarray:
    """
    Evaluate one axis of the separable box Gaussian.

    The value is 1 at the center and sqrt(tau) at the box edge, so the
    product of both axes equals tau at the box corners.
    :param coordinates: sample coordinates.
    :param center: box center along the axis.
    :param extent: box extent along the axis.
    :param spec: label parameters.
    :return: the profile.
    """
    normalized = (coordinates - center) / (extent / 2)
    return np.exp(0.5 * normalized**2 * math.log(spec.tau))


def gaussian_mask(
    boxes: Sequence[BoundingBox],
    shape: Tuple[int, int],
    spec: GaussianSpec = GaussianSpec(),
) -> PseudoMask:
    """
    Rasterize boxes given in mask units into a Gaussian objectness label.

    Cells are sampled at their integer coordinates; overlapping boxes are
    combined by elementwise maximum.
    :param boxes: boxes in mask units.
    :param shape: (height, width) of the mask.
    :param spec: label parameters.
    :raises ShapeError: if the shape is not positive.
    :return: the label.
    """
    height, width = shape
    if height < 1 or width < 1:
        raise ShapeError(f"mask shape must be positive, got {shape}")
    values = np.zeros((height, width))
    reach = gaussian_reach(spec)
    for box in boxes:
        cols = _axis_window(box.xc, box.w * reach / 2, width)
        rows = _axis_window(box.yc, box.h * reach / 2, height)
        if not cols.size or not rows.size:
            continue
        stamp = np.outer(
            gaussian_profile(rows, box.yc, box.h, spec),
            gaussian_profile(cols, box.xc, box.w, spec),
        )
        window = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        values[window] = np.maximum(values[window], stamp)
    values[values < FLUSH_BELOW] = 0
    return PseudoMask(Grid2D(np.clip(values, 0, 1)), Provenance.GAUSSIAN)


def _axis_window(center: float, reach: float, size: int) -> np.ndarray:
    start = max(0, math.floor(center - reach))
    stop = min(size, math.ceil(center + reach) + 1)
    return np.arange(start, stop)


def box_footprint(box: BoundingBox, shape: Tuple[int, int]) -> Tuple[slice, slice]:
    """
    Find the cells whose centers lie inside a box given in mask units.

    The cell nearest to the box center is always included.
    :param box: box in mask units.
    :param shape: (height, width) of the mask.
    :return: (row slice, column slice).
    """
    height, width = shape
    x1, y1, x2, y2 = box.corners
    col_center = nearest_cell(box.xc, width)
    row_center = nearest_cell(box.yc, height)
    col_start = max(0, min(math.ceil(x1), col_center))
    col_stop = min(width - 1, max(math.floor(x2), col_center))
    row_start = max(0, min(math.ceil(y1), row_center))
    row_stop = min(height - 1, max(math.floor(y2), row_center))
    return (slice(row_start, row_stop + 1), slice(col_start, col_stop + 1))


def hybrid_mask(
    gaussian: PseudoMask,
    external: PseudoMask,
    mode: Union[HybridMode, str] = HybridMode.PER_BOX,
    boxes: Sequence[BoundingBox] = (),
) -> PseudoMask:
    """
    Modulate a Gaussian label with an external segmentation mask.

    Where the external mask is non-empty the label is the elementwise
    product of both masks, otherwise the Gaussian label is kept. In
    per-image mode the test covers the whole mask; in per-box mode it is
    applied within each box footprint and cells outside every box are zero.
    :param gaussian: box-derived label.
    :param external: segmentation mask.
    :param mode: per_image or per_box.
    :param boxes: boxes in mask units, used by per-box mode.
    :raises ShapeError: if the masks differ in shape.
    :return: the hybrid label.
    """
    if gaussian.shape != external.shape:
        raise ShapeError(
            f"mask shapes differ: {gaussian.shape} and {external.shape}",
        )
    mode = HybridMode(mode)
    prior = gaussian.grid.values
    shape_prior = external.grid.values
    if mode is HybridMode.PER_IMAGE:
        if shape_prior.sum() > 0:
            return PseudoMask(Grid2D(shape_prior * prior), Provenance.HYBRID)
        return PseudoMask(gaussian.grid, Provenance.HYBRID)

    values = np.zeros(gaussian.shape)
    for box in boxes:
        footprint = box_footprint(box, gaussian.shape)
        region = prior[footprint]
        if shape_prior[footprint].sum() > 0:
            region = region * shape_prior[footprint]
        values[footprint] = np.maximum(values[footprint], region)
    return PseudoMask(Grid2D(values), Provenance.HYBRID)


def load_mask_pgm(path: Union[str, Path]) -> PseudoMask:
    """
    Read an external mask from a PGM file, scaled into [0, 1] by maxval.

    :param path: the file.
    :raises FormatError: if the file is not a gray map.
    :return: the mask.
    """
    image = netpbm.read(path)
    if image.pixels.ndim != 2:
        raise FormatError(f"{path}: expected a PGM gray map")
    return PseudoMask(Grid2D(image.pixels / image.maxval), Provenance.EXTERNAL)


def save_mask_pgm(
    mask: Union[PseudoMask, Grid2D],
    path: Union[str, Path],
    maxval: int = 255,
    binary: bool = True,
) -> None:
    """
    Write a mask as a PGM file, quantized to maxval levels.

    :param mask: mask with values in [0, 1].
    :param path: the destination.
    :param maxval: number of quantization levels.
    :param binary: write P5 instead of P2.
    """
    grid = mask.grid if isinstance(mask, PseudoMask) else mask
    levels = np.rint(np.clip(grid.values, 0, 1) * maxval).astype(np.int64)
    netpbm.write(path, levels, maxval=maxval, binary=binary)
