"""Recall of slicing, mask quality, the multiply-accumulate cost model and dataset statistics."""
import logging
import math
from typing import TYPE_CHECKING, Any, List, Sequence, Tuple

import numpy as np
from attr import define, field

from patchseek.errors import AnnotationError, ParameterError, ShapeError
from patchseek.gridcore import ConvSpec
from patchseek.labelgen import BoundingBox, PseudoMask, nearest_cell
from patchseek.seeker import DW_KERNEL, ObjectnessMask
from patchseek.slicer import CenterSet, PatchPlan, TokenSet
from patchseek.sparsehead import SparseSampleSet, receptive_field_sets

if TYPE_CHECKING:
    from patchseek.config import PipelineConfig

logger = logging.getLogger(__name__)

# Coverage above this fraction of a box's area counts as enclosed.
ENCLOSED_FRACTION = 0.5
_TOLERANCE = 1e-9


def _check_boxes_inside(instance: "SceneAnnotation", attribute: Any, value: Any) -> None:
    for box in value:
        x1, y1, x2, y2 = box.corners
        if (
            x1 < -_TOLERANCE
            or y1 < -_TOLERANCE
            or x2 > instance.image_w + _TOLERANCE
            or y2 > instance.image_h + _TOLERANCE
        ):
            raise AnnotationError(
                f"box {box} leaves the {instance.image_w}x{instance.image_h} image",
            )


def _check_image_extent(instance: Any, attribute: Any, value: int) -> None:
    if value < 1:
        raise AnnotationError(f"{attribute.name} must be positive, got {value}")


@define(frozen=True)
class SceneAnnotation:
    """Ground-truth boxes of one image, in pixels."""

    image_w: int = field(validator=_check_image_extent)
    image_h: int = field(validator=_check_image_extent)
    boxes: Tuple[BoundingBox, ...] = field(
        converter=tuple,
        factory=tuple,
        validator=_check_boxes_inside,
    )

    @classmethod
    def clipped(
        cls,
        image_w: int,
        image_h: int,
        corners: Sequence[Tuple[float, float, float, float, int]],
    ) -> "SceneAnnotation":
        """
        Build a scene from corner boxes, clipping them to the image.

        Boxes that lose all their area are dropped.
        :param image_w: image width.
        :param image_h: image height.
        :param corners: (x1, y1, x2, y2, category) tuples.
        :return: the scene.
        """
        boxes = []
        for x1, y1, x2, y2, category in corners:
            left, right = max(x1, 0), min(x2, image_w)
            top, bottom = max(y1, 0), min(y2, image_h)
            if right > left and bottom > top:
                boxes.append(BoundingBox.from_corners(left, top, right, bottom, category))
        return cls(image_w, image_h, boxes)

    def mask_shape(self, stride: int = 8) -> Tuple[int, int]:
        """
        Shape of the objectness mask of this image.

        :param stride: total stem stride.
        :return: (height, width), rounded up.
        """
        return (math.ceil(self.image_h / stride), math.ceil(self.image_w / stride))

    def mask_boxes(self, stride: int = 8) -> List[BoundingBox]:
        """
        The boxes in mask units.

        :param stride: total stem stride.
        :return: scaled boxes.
        """
        return [box.scaled(stride) for box in self.boxes]


@define(frozen=True)
class CostReport:
    """Multiply-accumulate counts of one image, for the sliced and dense pipelines."""

    stem: int
    seeker: int
    neck: int
    head: int
    dense_neck: int
    dense_head: int
    preserved_patch_ratio: float

    @property
    def sliced_total(self) -> int:  # noqa: D102
        return self.stem + self.seeker + self.neck + self.head

    @property
    def dense_total(self) -> int:  # noqa: D102
        return self.stem + self.seeker + self.dense_neck + self.dense_head

    @property
    def sliced_neck_head(self) -> int:  # noqa: D102
        return self.neck + self.head

    @property
    def dense_neck_head(self) -> int:  # noqa: D102
        return self.dense_neck + self.dense_head


@define(frozen=True)
class BprResult:
    """Best possible recall of a slicing, with one hit flag per object."""

    bpr_box: float
    bpr_ctr: float
    box_hits: Tuple[bool, ...] = field(converter=tuple)
    ctr_hits: Tuple[bool, ...] = field(converter=tuple)
    vacuous: bool = False


def _ratio(hits: Sequence[bool]) -> float:
    if not hits:
        return 1.0
    return sum(hits) / len(hits)


def _box_hits(scene: SceneAnnotation, plan: PatchPlan, stride: int) -> List[bool]:
    hits = []
    for box in scene.mask_boxes(stride):
        x1, y1, x2, y2 = box.corners
        area = box.w * box.h
        best = 0.0
        for patch in plan.boxes:
            overlap_w = min(x2, patch.x2 - 0.5) - max(x1, patch.x1 - 0.5)
            overlap_h = min(y2, patch.y2 - 0.5) - max(y1, patch.y1 - 0.5)
            if overlap_w > 0 and overlap_h > 0:
                best = max(best, overlap_w * overlap_h / area)
        hits.append(best > ENCLOSED_FRACTION)
    return hits


def _ctr_hits(scene: SceneAnnotation, centers: CenterSet, stride: int) -> List[bool]:
    height, width = scene.mask_shape(stride)
    found = set(centers.coordinates)
    return [
        (nearest_cell(box.xc / stride, width), nearest_cell(box.yc / stride, height)) in found
        for box in scene.boxes
    ]


def bpr_box(scene: SceneAnnotation, plan: PatchPlan, stride: int = 8) -> float:
    """
    Fraction of objects with more than half of their area inside a single patch.

    Intersections are exact, in real mask coordinates; patch cell i spans
    [i - 0.5, i + 0.5).
    :param scene: ground truth in pixels.
    :param plan: patches in mask cells.
    :param stride: mask-to-image scale.
    :return: the ratio, 1.0 for an empty scene.
    """
    return _ratio(_box_hits(scene, plan, stride))


def bpr_ctr(scene: SceneAnnotation, centers: CenterSet, stride: int = 8) -> float:
    """
    Fraction of objects whose center cell is among the found centers.

    :param scene: ground truth in pixels.
    :param centers: local maxima in mask cells.
    :param stride: mask-to-image scale.
    :return: the ratio, 1.0 for an empty scene.
    """
    return _ratio(_ctr_hits(scene, centers, stride))


def evaluate_bpr(
    scene: SceneAnnotation,
    plan: PatchPlan,
    centers: CenterSet,
    stride: int = 8,
) -> BprResult:
    """
    Compute both recalls with their per-object flags.

    :param scene: ground truth in pixels.
    :param plan: patches in mask cells.
    :param centers: local maxima in mask cells.
    :param stride: mask-to-image scale.
    :return: the result, flagged vacuous for an empty scene.
    """
    box_hits = _box_hits(scene, plan, stride)
    ctr_hits = _ctr_hits(scene, centers, stride)
    vacuous = not scene.boxes
    if vacuous:
        logger.warning("Scene without objects, recall reported as 1.0")
    return BprResult(
        bpr_box=_ratio(box_hits),
        bpr_ctr=_ratio(ctr_hits),
        box_hits=box_hits,
        ctr_hits=ctr_hits,
        vacuous=vacuous,
    )


def mask_pr(
    pred: ObjectnessMask,
    label: PseudoMask,
    threshold: float = 0.5,
) -> Tuple[float, float]:
    """
    Precision and recall of a predicted mask against its label, both binarized.

    :param pred: predicted mask.
    :param label: label mask.
    :param threshold: binarization threshold, inclusive.
    :raises ShapeError: if the shapes differ.
    :return: (precision, recall), 1.0 for an empty denominator.
    """
    if pred.shape != label.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} and {label.shape}")
    predicted = pred.grid.values >= threshold
    actual = label.grid.values >= threshold
    true_positive = int((predicted & actual).sum())
    predicted_count = int(predicted.sum())
    actual_count = int(actual.sum())
    precision = true_positive / predicted_count if predicted_count else 1.0
    recall = true_positive / actual_count if actual_count else 1.0
    return precision, recall


def _check_dims(*dims: int) -> None:
    if any(dim < 0 for dim in dims):
        raise ParameterError(f"cost dimensions must be non-negative, got {dims}")


def conv_cost(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """
    Multiply-accumulates of a dense layer.

    :param spec: the layer.
    :param out_h: output rows.
    :param out_w: output columns.
    :return: kh * kw * in * out * out_h * out_w.
    """
    _check_dims(out_h, out_w)
    return spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels * out_h * out_w


def depthwise_conv_cost(channels: int, kernel_size: int, out_h: int, out_w: int) -> int:
    """
    Multiply-accumulates of a depthwise layer.

    :param channels: channel count.
    :param kernel_size: square kernel size.
    :param out_h: output rows.
    :param out_w: output columns.
    :return: k * k * channels * out_h * out_w.
    """
    _check_dims(channels, kernel_size, out_h, out_w)
    return kernel_size * kernel_size * channels * out_h * out_w


def _chain_cost(layers: Sequence[ConvSpec], height: int, width: int) -> int:
    return sum(conv_cost(layer, height, width) for layer in layers)


def stem_cost(stem: Sequence[ConvSpec], image_shape: Tuple[int, int]) -> Tuple[int, Tuple[int, int]]:
    """
    Multiply-accumulates of the strided stem.

    :param stem: stem layers, applied with floor rounding.
    :param image_shape: (height, width) of the image.
    :return: the cost and the (height, width) of the stem output.
    """
    height, width = image_shape
    total = 0
    for layer in stem:
        height, width = layer.output_shape(height, width, floor_mode=True)
        total += conv_cost(layer, height, width)
    return total, (height, width)


def pipeline_cost(
    config: "PipelineConfig",
    plan: PatchPlan,
    samples: SparseSampleSet,
    image_shape: Tuple[int, int],
) -> CostReport:
    """
    Cost of one image for the sliced pipeline and its dense baseline.

    The stem and seeker run at full resolution. The neck is charged once per
    grid position covered by the union of the patches, so overlapping patches
    never cost more than the dense neck. The sparse head costs one output per
    position of its receptive-field sets, with the samples given in mask
    coordinates. The preserved ratio is the covered fraction of the grid.
    :param config: the network.
    :param plan: the patches.
    :param samples: head samples in mask coordinates.
    :param image_shape: (height, width) of the image.
    :return: the cost report.
    """
    stem, (height, width) = stem_cost(config.stem, image_shape)
    channels = config.seeker.channels
    seeker = depthwise_conv_cost(channels, DW_KERNEL, height, width) + conv_cost(
        config.seeker.pw,
        height,
        width,
    )
    covered = np.zeros((height, width), dtype=bool)
    for box in plan.boxes:
        covered[max(box.y1, 0) : box.y2, max(box.x1, 0) : box.x2] = True
    neck = int(covered.sum()) * _chain_cost(config.neck, 1, 1)
    head = 0
    if len(samples):
        sets = receptive_field_sets(samples, config.head, (height, width))
        head = sum(
            conv_cost(layer, 1, 1) * int(needed.bits.sum())
            for layer, needed in zip(config.head, sets)
        )
    preserved = float(covered.mean())
    return CostReport(
        stem=stem,
        seeker=seeker,
        neck=neck,
        head=head,
        dense_neck=_chain_cost(config.neck, height, width),
        dense_head=_chain_cost(config.head, height, width),
        preserved_patch_ratio=preserved,
    )


def _cell_edges(size: int, k: int) -> np.ndarray:
    return np.linspace(0, size, k + 1)


def patch_emptiness(scene: SceneAnnotation, k: int = 8) -> float:
    """
    Fraction of the k x k image cells that no box overlaps with positive area.

    :param scene: ground truth in pixels.
    :param k: divisions per axis.
    :raises ParameterError: if k < 1.
    :return: the ratio.
    """
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    x_edges = _cell_edges(scene.image_w, k)
    y_edges = _cell_edges(scene.image_h, k)
    occupied = np.zeros((k, k), dtype=bool)
    for box in scene.boxes:
        x1, y1, x2, y2 = box.corners
        cols = (np.minimum(x2, x_edges[1:]) - np.maximum(x1, x_edges[:-1])) > 0
        rows = (np.minimum(y2, y_edges[1:]) - np.maximum(y1, y_edges[:-1])) > 0
        occupied |= np.outer(rows, cols)
    return float(1 - occupied.mean())


def pixel_occupancy(scene: SceneAnnotation) -> float:
    """
    Area of the union of the boxes over the image area.

    The union is measured exactly on the grid of distinct box edges.
    :param scene: ground truth in pixels.
    :return: the ratio.
    """
    if not scene.boxes:
        return 0.0
    corners = np.array([box.corners for box in scene.boxes])
    xs = np.unique(corners[:, [0, 2]])
    ys = np.unique(corners[:, [1, 3]])
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for x1, y1, x2, y2 in corners:
        left, right = np.searchsorted(xs, [x1, x2])
        top, bottom = np.searchsorted(ys, [y1, y2])
        covered[top:bottom, left:right] = True
    areas = np.outer(np.diff(ys), np.diff(xs))
    return float((areas * covered).sum() / (scene.image_w * scene.image_h))


@define(frozen=True)
class DatasetStats:
    """Sparsity statistics averaged over scenes."""

    count: int
    mean_emptiness: float
    mean_occupancy: float
    mean_objects: float


def dataset_stats(scenes: Sequence[SceneAnnotation], k: int = 8) -> DatasetStats:
    """
    Average emptiness, occupancy and object count over scenes.

    :param scenes: the scenes.
    :param k: divisions per axis for the emptiness.
    :return: the statistics, NaN means when there are no scenes.
    """
    if not scenes:
        return DatasetStats(0, math.nan, math.nan, math.nan)
    return DatasetStats(
        count=len(scenes),
        mean_emptiness=float(np.mean([patch_emptiness(scene, k) for scene in scenes])),
        mean_occupancy=float(np.mean([pixel_occupancy(scene) for scene in scenes])),
        mean_objects=float(np.mean([len(scene.boxes) for scene in scenes])),
    )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else math.nan


@define(frozen=True)
class CostBucket:
    """Images whose preserved patch ratio falls in [lower, upper)."""

    lower: float
    upper: float
    count: int
    mean_sliced: float
    mean_dense: float


def bucketize(costs: Sequence[CostReport], bins: int = 10) -> List[CostBucket]:
    """
    Group image costs by preserved patch ratio into equal-width buckets.

    A ratio of exactly 1 goes into the last bucket. Empty buckets have NaN means.
    :param costs: per-image costs.
    :param bins: number of buckets over [0, 1].
    :raises ParameterError: if bins < 1.
    :return: the buckets in ascending order.
    """
    if bins < 1:
        raise ParameterError(f"bins must be at least 1, got {bins}")
    members: List[List[CostReport]] = [[] for _ in range(bins)]
    for cost in costs:
        index = min(int(cost.preserved_patch_ratio * bins), bins - 1)
        members[index].append(cost)
    buckets = []
    for index, group in enumerate(members):
        buckets.append(
            CostBucket(
                lower=index / bins,
                upper=(index + 1) / bins,
                count=len(group),
                mean_sliced=_mean([cost.sliced_total for cost in group]),
                mean_dense=_mean([cost.dense_total for cost in group]),
            ),
        )
    return buckets


def attention_cost(tokens: int, dim: int) -> int:
    """
    Multiply-accumulates of one self-attention layer.

    Projections cost 4 * n * d^2, attention weights and their product 2 * n^2 * d.
    :param tokens: token count n.
    :param dim: embedding size d.
    :return: the cost.
    """
    _check_dims(tokens, dim)
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def token_cost(tokens: TokenSet, grid_shape: Tuple[int, int], dim: int) -> Tuple[int, int]:
    """
    Attention cost of the selected tokens against keeping every token.

    :param tokens: the selected tokens.
    :param grid_shape: (height, width) of the token grid.
    :param dim: embedding size.
    :return: (selected cost, full cost).
    """
    height, width = grid_shape
    return attention_cost(len(tokens), dim), attention_cost(height * width, dim)
