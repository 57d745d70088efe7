import enum
import logging
import math
import re
from pathlib import Path
from typing import Any, Iterator, List, Sequence, Tuple, Union

import numpy as np
from attr import define, field

from patchseek.errors import ParameterError, ParseError, ShapeError
from patchseek.gridcore import BitGrid, FeatureStack, Grid2D, avgpool_same, maxpool_same
from patchseek.seeker import ObjectnessMask

logger = logging.getLogger(__name__)

SIZE_WINDOW = 9
PEAK_WINDOW = 3

_HEADER_PATTERN = re.compile(r"^(uniform|greedy|parallel) (\d+) (\d+) (\d+)$")
_BOX_PATTERN = re.compile(r"^(-?\d+) (-?\d+) (-?\d+) (-?\d+)$")


class Strategy(str, enum.Enum):  # noqa: WPS600
    """How a patch plan was produced."""

    UNIFORM = "uniform"
    GREEDY = "greedy"
    PARALLEL = "parallel"


@define(frozen=True, order=True)
class Center:
    """A local maximum of the objectness mask; ordering is row-major."""

    y: int
    x: int
    score: float = field(order=False)


@define(frozen=True)
class CenterSet:
    """Local maxima of an objectness mask in row-major order."""

    centers: Tuple[Center, ...] = field(converter=tuple, factory=tuple)

    def __len__(self) -> int:
        return len(self.centers)

    def __iter__(self) -> Iterator[Center]:
        return iter(self.centers)

    @property
    def coordinates(self) -> List[Tuple[int, int]]:
        """
        The (x, y) coordinates of the centers.

        :return: the coordinates.
        """
        return [(center.x, center.y) for center in self.centers]


@define(frozen=True, order=True)
class PatchBox:
    """A half-open box [x1, x2) x [y1, y2) in mask cells."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def width(self) -> int:  # noqa: D102
        return self.x2 - self.x1

    @property
    def height(self) -> int:  # noqa: D102
        return self.y2 - self.y1

    def contains(self, x: int, y: int) -> bool:
        """
        Check whether a cell lies inside the box.

        :param x: cell column.
        :param y: cell row.
        :return: whether it is inside.
        """
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2

    def encloses(self, other: "PatchBox") -> bool:
        """
        Check whether another box lies fully inside this one.

        :param other: the other box.
        :return: whether it is enclosed.
        """
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def translated(self, dx: int, dy: int) -> "PatchBox":
        """
        Move the box without resizing it.

        :param dx: column offset.
        :param dy: row offset.
        :return: the moved box.
        """
        return PatchBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clamped(self, height: int, width: int) -> "PatchBox":
        """
        Translate the box into the grid bounds, keeping its size.

        :param height: grid rows.
        :param width: grid columns.
        :return: the in-bounds box.
        """
        x1 = min(max(self.x1, 0), width - self.width)
        y1 = min(max(self.y1, 0), height - self.height)
        return PatchBox(x1, y1, x1 + self.width, y1 + self.height)


def _check_boxes(instance: "PatchPlan", attribute: Any, value: Tuple[PatchBox, ...]) -> None:
    for box in value:
        if box.width != instance.patch_w or box.height != instance.patch_h:
            raise ShapeError(
                f"patch {box} does not have the plan size "
                f"{instance.patch_w}x{instance.patch_h}",
            )


@define(frozen=True)
class PatchPlan:
    """Fixed-size patch boxes selected for the downstream computation."""

    strategy: Strategy = field(converter=Strategy)
    k: int
    patch_w: int
    patch_h: int
    boxes: Tuple[PatchBox, ...] = field(converter=tuple, validator=_check_boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def covered(self, x: int, y: int) -> bool:
        """
        Check whether any box contains a cell.

        :param x: cell column.
        :param y: cell row.
        :return: whether it is covered.
        """
        return any(box.contains(x, y) for box in self.boxes)


@define(frozen=True)
class TokenSet:
    """Activated cells in row-major order, as (x, y)."""

    tokens: Tuple[Tuple[int, int], ...] = field(converter=tuple, factory=tuple)

    def __len__(self) -> int:
        return len(self.tokens)


def _check_threshold(threshold: float) -> None:
    if not 0 < threshold < 1:
        raise ParameterError(f"activation threshold must be in (0, 1), got {threshold}")


def activation(mask: ObjectnessMask, threshold: float = 0.5) -> BitGrid:
    """
    Mark cells whose objectness reaches the threshold.

    :param mask: objectness mask.
    :param threshold: activation threshold, inclusive.
    :return: the activated cells.
    """
    _check_threshold(threshold)
    return BitGrid(mask.grid.values >= threshold)


def local_maxima(mask: ObjectnessMask, act: BitGrid) -> CenterSet:
    """
    Find activated cells that equal the maximum of their 3x3 neighbourhood.

    Candidates are visited in row-major order and a candidate is suppressed
    when an already kept center lies in its 3x3 window. Such a pair always
    ties, so every 3x3 tie group keeps one center and a plateau keeps a
    lattice of centers two cells apart.
    :param mask: objectness mask.
    :param act: activated cells.
    :raises ShapeError: if the shapes differ.
    :return: the centers.
    """
    if mask.shape != act.shape:
        raise ShapeError(f"mask shape {mask.shape} != activation shape {act.shape}")
    values = mask.grid.values
    candidates = act.bits & (values == maxpool_same(mask.grid, PEAK_WINDOW).values)

    kept = np.zeros_like(candidates)
    centers = []
    for row, col in zip(*np.nonzero(candidates)):
        if kept[max(row - 1, 0) : row + 2, max(col - 1, 0) : col + 2].any():
            continue
        kept[row, col] = True
        centers.append(Center(y=int(row), x=int(col), score=float(values[row, col])))
    return CenterSet(centers)


def estimate_sizes(act: BitGrid, centers: CenterSet) -> List[float]:
    """
    Estimate object sizes as the activated fraction of the 9x9 window around each center.

    :param act: activated cells.
    :param centers: the centers.
    :return: one size per center, in [0, 1].
    """
    density = avgpool_same(Grid2D(act.bits.astype(np.float64)), SIZE_WINDOW).values
    for center in centers:
        if not (0 <= center.y < act.height and 0 <= center.x < act.width):
            raise ShapeError(f"center ({center.x}, {center.y}) is out of bounds")
    return [float(density[center.y, center.x]) for center in centers]


def patch_size_for(grid_shape: Tuple[int, int], k: int) -> Tuple[int, int]:
    """
    Size of a patch when the grid is divided into k x k cells, rounded up.

    :param grid_shape: (height, width) of the mask.
    :param k: number of divisions per axis.
    :raises ParameterError: if k is not in [1, min(height, width)].
    :return: (patch width, patch height).
    """
    height, width = grid_shape
    if k < 1 or k > min(height, width):
        raise ParameterError(f"k must be in [1, {min(height, width)}], got {k}")
    return (math.ceil(width / k), math.ceil(height / k))


def _uniform_cells(
    grid_shape: Tuple[int, int],
    k: int,
) -> List[Tuple[PatchBox, PatchBox]]:
    height, width = grid_shape
    patch_w, patch_h = patch_size_for(grid_shape, k)
    cells = []
    for y1 in range(0, height, patch_h):
        for x1 in range(0, width, patch_w):
            cell = PatchBox(x1, y1, min(x1 + patch_w, width), min(y1 + patch_h, height))
            full = PatchBox(x1, y1, x1 + patch_w, y1 + patch_h).clamped(height, width)
            cells.append((cell, full))
    return cells


def uniform_cell_count(grid_shape: Tuple[int, int], k: int) -> int:
    """
    Number of cells of the uniform k x k division.

    :param grid_shape: (height, width) of the mask.
    :param k: number of divisions per axis.
    :return: the count.
    """
    return len(_uniform_cells(grid_shape, k))


def slice_uniform(act: BitGrid, centers: CenterSet, k: int) -> PatchPlan:
    """
    Keep the cells of the uniform k x k division that contain a center.

    Short cells at the last row or column are emitted as full-size boxes
    translated back into the grid.
    :param act: activated cells.
    :param centers: the centers.
    :param k: number of divisions per axis.
    :return: the plan.
    """
    patch_w, patch_h = patch_size_for(act.shape, k)
    boxes = [
        full
        for cell, full in _uniform_cells(act.shape, k)
        if any(cell.contains(center.x, center.y) for center in centers)
    ]
    return PatchPlan(Strategy.UNIFORM, k, patch_w, patch_h, boxes)


def adjust_patch(box: PatchBox, act: BitGrid) -> PatchBox:
    """
    Shift a box right and down to drop its empty leading rows and columns.

    The offsets are the distances from the top-left corner to the first
    activated column and row inside the box; the moved box is then clamped
    into the grid by translation. Activated cells inside stay inside.
    :param box: an in-bounds box.
    :param act: activated cells.
    :return: the adjusted box.
    """
    inside = act.bits[box.y1 : box.y2, box.x1 : box.x2]
    rows, cols = np.nonzero(inside)
    if not rows.size:
        return box
    return box.translated(int(cols.min()), int(rows.min())).clamped(act.height, act.width)


def _initial_box(center: Center, patch_w: int, patch_h: int, act: BitGrid) -> PatchBox:
    x1 = center.x - patch_w // 2
    y1 = center.y - patch_h // 2
    return PatchBox(x1, y1, x1 + patch_w, y1 + patch_h).clamped(act.height, act.width)


def slice_greedy(
    mask: ObjectnessMask,
    k: int,
    threshold: float = 0.5,
) -> PatchPlan:
    """
    Greedy adaptive slicing.

    Repeatedly takes the remaining center with the largest size estimate,
    centers a fixed-size box on it, adjusts the box, and removes every
    center the box contains, until no center is left.
    :param mask: objectness mask.
    :param k: number of divisions per axis that sets the patch size.
    :param threshold: activation threshold.
    :return: the plan.
    """
    act = activation(mask, threshold)
    centers = local_maxima(mask, act)
    sizes = estimate_sizes(act, centers)
    patch_w, patch_h = patch_size_for(mask.shape, k)

    remaining = list(zip(centers, sizes))
    boxes: List[PatchBox] = []
    while remaining:
        largest = max(range(len(remaining)), key=lambda index: (remaining[index][1], -index))
        center = remaining[largest][0]
        box = adjust_patch(_initial_box(center, patch_w, patch_h, act), act)
        boxes.append(box)
        remaining = [
            (other, size) for other, size in remaining if not box.contains(other.x, other.y)
        ]
        logger.debug("greedy patch %s, %d centers left", box, len(remaining))
    return PatchPlan(Strategy.GREEDY, k, patch_w, patch_h, boxes)


def remove_overlap(boxes: Sequence[PatchBox]) -> List[PatchBox]:
    """
    Drop duplicate boxes and boxes enclosed by an earlier kept one.

    :param boxes: candidate boxes in row-major order.
    :return: the kept boxes.
    """
    kept: List[PatchBox] = []
    for box in boxes:
        if any(other.encloses(box) for other in kept):
            continue
        kept = [other for other in kept if not box.encloses(other)]
        kept.append(box)
    return kept


def slice_parallel(
    mask: ObjectnessMask,
    k: int,
    threshold: float = 0.5,
) -> PatchPlan:
    """
    Simplified adaptive slicing in a single round.

    Candidates are the uniform cells that contain a center; each is adjusted
    independently, then duplicates and enclosed boxes are removed.
    :param mask: objectness mask.
    :param k: number of divisions per axis.
    :param threshold: activation threshold.
    :return: the plan.
    """
    act = activation(mask, threshold)
    centers = local_maxima(mask, act)
    candidates = slice_uniform(act, centers, k)
    adjusted = [adjust_patch(box, act) for box in candidates.boxes]
    return PatchPlan(
        Strategy.PARALLEL,
        k,
        candidates.patch_w,
        candidates.patch_h,
        remove_overlap(adjusted),
    )


def slice_mask(
    mask: ObjectnessMask,
    k: int,
    strategy: Union[Strategy, str],
    threshold: float = 0.5,
) -> Tuple[PatchPlan, CenterSet]:
    """
    Slice a mask with the named strategy.

    :param mask: objectness mask.
    :param k: number of divisions per axis.
    :param strategy: uniform, greedy or parallel.
    :param threshold: activation threshold.
    :return: the plan and the centers it was built from.
    """
    strategy = Strategy(strategy)
    act = activation(mask, threshold)
    centers = local_maxima(mask, act)
    if strategy is Strategy.UNIFORM:
        plan = slice_uniform(act, centers, k)
    elif strategy is Strategy.GREEDY:
        plan = slice_greedy(mask, k, threshold)
    else:
        plan = slice_parallel(mask, k, threshold)
    return plan, centers


def select_tokens(mask: ObjectnessMask, threshold: float = 0.5) -> TokenSet:
    """
    Keep every activated cell as a single token.

    :param mask: objectness mask.
    :param threshold: activation threshold.
    :return: activated (x, y) cells in row-major order.
    """
    rows, cols = np.nonzero(activation(mask, threshold).bits)
    return TokenSet((int(col), int(row)) for row, col in zip(rows, cols))


def extract_patches(features: FeatureStack, plan: PatchPlan) -> List[FeatureStack]:
    """
    Crop the feature stack to every box of the plan.

    :param features: stem features on the mask grid.
    :param plan: the plan.
    :raises ShapeError: if a box leaves the feature map.
    :return: one C x H_p x W_p stack per box.
    """
    patches = []
    for box in plan.boxes:
        if box.x1 < 0 or box.y1 < 0 or box.x2 > features.width or box.y2 > features.height:
            raise ShapeError(
                f"patch {box} leaves the {features.width}x{features.height} feature map",
            )
        patches.append(FeatureStack(features.values[:, box.y1 : box.y2, box.x1 : box.x2]))
    return patches


def dump_plan(plan: PatchPlan, path: Union[str, Path]) -> None:
    """
    Write a plan as a header line and one box per line.

    :param plan: the plan.
    :param path: the destination.
    """
    lines = [f"{plan.strategy.value} {plan.k} {plan.patch_w} {plan.patch_h}"]
    lines.extend(f"{box.x1} {box.y1} {box.x2} {box.y2}" for box in plan.boxes)
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path: Union[str, Path]) -> PatchPlan:
    """
    Read a plan written by dump_plan.

    :param path: the file.
    :raises ParseError: on a malformed line.
    :return: the plan.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    header = _HEADER_PATTERN.match(lines[0].strip()) if lines else None
    if not header:
        raise ParseError("expected 'strategy k W_p H_p' header", path, 1)
    strategy, k, patch_w, patch_h = header.groups()
    boxes = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        match = _BOX_PATTERN.match(line.strip())
        if not match:
            raise ParseError(f"expected 'x1 y1 x2 y2', got {line!r}", path, line_number)
        boxes.append(PatchBox(*(int(group) for group in match.groups())))
    try:
        return PatchPlan(Strategy(strategy), int(k), int(patch_w), int(patch_h), boxes)
    except ShapeError as error:
        raise ParseError(str(error), path)
