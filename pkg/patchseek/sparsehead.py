"""Detection-head evaluation restricted to sampled feature positions."""
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from attr import define, field
from scipy import ndimage
from scipy.special import expit

from patchseek.errors import ParameterError, ShapeError
from patchseek.gridcore import (
    Activation,
    BitGrid,
    ConvSpec,
    FeatureStack,
    conv2d,
    conv2d_at,
    frozen_array,
    pointwise,
)

logger = logging.getLogger(__name__)

# Objectness logit, dw, dh, dx, dy; class logits follow.
BOX_CHANNELS = 5
SIZE_LOG_CLAMP = 4.0

Coordinate = Tuple[int, int]


def _dedupe(coordinates: Iterable[Sequence[int]]) -> Tuple[Coordinate, ...]:
    return tuple(dict.fromkeys((int(x), int(y)) for x, y in coordinates))


def _check_radius(instance: Any, attribute: Any, value: int) -> None:
    if value < 0:
        raise ParameterError(f"dilation radius must be non-negative, got {value}")


@define(frozen=True)
class SparseSampleSet:
    """Feature-map positions, as (x, y), at which the head is evaluated."""

    coordinates: Tuple[Coordinate, ...] = field(converter=_dedupe, factory=tuple)
    dilation_radius: int = field(default=0, validator=_check_radius)

    @classmethod
    def full(cls, height: int, width: int) -> "SparseSampleSet":
        """
        Sample every position of a grid in row-major order.

        :param height: grid rows.
        :param width: grid columns.
        :return: the samples.
        """
        return cls((x, y) for y in range(height) for x in range(width))

    def __len__(self) -> int:
        return len(self.coordinates)

    def check_bounds(self, height: int, width: int) -> None:
        """
        Make sure every coordinate lies on the grid.

        :param height: grid rows.
        :param width: grid columns.
        :raises ParameterError: for an out-of-bounds coordinate.
        """
        for x, y in self.coordinates:
            if not (0 <= x < width and 0 <= y < height):
                raise ParameterError(
                    f"sample ({x}, {y}) lies outside the {width}x{height} feature map",
                )

    def expanded(self, height: int, width: int) -> Tuple[Coordinate, ...]:
        """
        Grow every sample to its Chebyshev neighbourhood of the dilation radius.

        Neighbours are clipped to the grid and kept in first-seen order.
        :param height: grid rows.
        :param width: grid columns.
        :return: the expanded coordinates.
        """
        self.check_bounds(height, width)
        radius = self.dilation_radius
        if not radius:
            return self.coordinates
        offsets = range(-radius, radius + 1)
        return _dedupe(
            (x + dx, y + dy)
            for x, y in self.coordinates
            for dy in offsets
            for dx in offsets
            if 0 <= x + dx < width and 0 <= y + dy < height
        )

    def shifted(self, dx: int, dy: int) -> "SparseSampleSet":
        """
        Translate the samples, e.g. from mask to patch-local coordinates.

        :param dx: column offset.
        :param dy: row offset.
        :return: the moved samples.
        """
        return SparseSampleSet(
            ((x + dx, y + dy) for x, y in self.coordinates),
            self.dilation_radius,
        )


@define(frozen=True, eq=False)
class SparseOutput:
    """One head output vector per coordinate, aligned with the coordinates."""

    coordinates: Tuple[Coordinate, ...] = field(converter=_dedupe)
    values: np.ndarray = field(converter=frozen_array(np.float64), repr=False)

    def __attrs_post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] != len(self.coordinates):
            raise ShapeError(
                f"expected one output vector per coordinate ({len(self.coordinates)}), "
                f"got values of shape {self.values.shape}",
            )

    def __len__(self) -> int:
        return len(self.coordinates)

    @property
    def channels(self) -> int:  # noqa: D102
        return int(self.values.shape[1])

    def shifted(self, dx: int, dy: int) -> "SparseOutput":
        """
        Translate the coordinates, e.g. from patch-local back to mask coordinates.

        :param dx: column offset.
        :param dy: row offset.
        :return: the moved output.
        """
        return SparseOutput(((x + dx, y + dy) for x, y in self.coordinates), self.values)

    @classmethod
    def concatenate(cls, outputs: Sequence["SparseOutput"], channels: int) -> "SparseOutput":
        """
        Join outputs computed on separate patches.

        :param outputs: the parts.
        :param channels: the channel count, used when there are no parts.
        :return: the joined output.
        """
        coordinates = [coordinate for part in outputs for coordinate in part.coordinates]
        if not outputs:
            return cls((), np.zeros((0, channels)))
        return cls(coordinates, np.concatenate([part.values for part in outputs]))


def _check_score(instance: Any, attribute: Any, value: float) -> None:
    if not 0 <= value <= 1:
        raise ParameterError(f"detection score must be in [0, 1], got {value}")


def _check_positive_extent(instance: Any, attribute: Any, value: float) -> None:
    if not value > 0:
        raise ParameterError(f"detection {attribute.name} must be positive, got {value}")


@define(frozen=True)
class Detection:
    """A decoded prediction in image pixels."""

    xc: float
    yc: float
    w: float = field(validator=_check_positive_extent)
    h: float = field(validator=_check_positive_extent)
    score: float = field(validator=_check_score)
    category: int


def _check_same_conv(spec: ConvSpec) -> None:
    if spec.stride != 1:
        raise ShapeError(f"sparse evaluation needs stride 1, got {spec.stride}")
    if spec.kernel_h != spec.kernel_w or spec.padding != (spec.kernel_h - 1) // 2:
        raise ShapeError(
            f"sparse evaluation needs same padding, got kernel "
            f"{spec.kernel_h}x{spec.kernel_w} with padding {spec.padding}",
        )


def _split(coordinates: Sequence[Coordinate]) -> Tuple[np.ndarray, np.ndarray]:
    if not coordinates:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    cols, rows = np.asarray(coordinates, dtype=np.intp).T
    return rows, cols


def sparse_conv_at(
    features: FeatureStack,
    spec: ConvSpec,
    samples: SparseSampleSet,
) -> SparseOutput:
    """
    Evaluate one same-padded layer at the sampled positions only.

    :param features: layer input.
    :param spec: a stride-1 layer with same padding.
    :param samples: positions, grown by their dilation radius.
    :raises ShapeError: if the layer is strided or not same-padded.
    :raises ParameterError: if a sample lies outside the feature map.
    :return: the layer output at the (expanded) samples.
    """
    _check_same_conv(spec)
    coordinates = samples.expanded(features.height, features.width)
    if not coordinates:
        return SparseOutput((), np.zeros((0, spec.out_channels)))
    rows, cols = _split(coordinates)
    return SparseOutput(coordinates, conv2d_at(features, spec, rows, cols))


def receptive_field_sets(
    samples: SparseSampleSet,
    head: Sequence[ConvSpec],
    shape: Tuple[int, int],
) -> List[BitGrid]:
    """
    Find, for every layer, the output positions the sampled head outputs depend on.

    The last set is the expanded samples; each earlier set is the next one
    dilated by the half-kernel of the next layer and clipped to the grid.
    :param samples: the sampled head outputs.
    :param head: same-padded stride-1 layers.
    :param shape: (height, width) of the feature map.
    :return: one bit grid per layer, in layer order.
    """
    height, width = shape
    needed = np.zeros(shape, dtype=bool)
    rows, cols = _split(samples.expanded(height, width))
    needed[rows, cols] = True
    sets = [BitGrid(needed)]
    for layer in reversed(head[1:]):
        _check_same_conv(layer)
        needed = ndimage.maximum_filter(
            needed,
            size=(layer.kernel_h, layer.kernel_w),
            mode="constant",
            cval=False,
        )
        sets.append(BitGrid(needed))
    return sets[::-1]


def _dense_forward(features: FeatureStack, head: Sequence[ConvSpec]) -> FeatureStack:
    current = features
    for index, layer in enumerate(head):
        current = conv2d(current, layer)
        if index < len(head) - 1:
            current = pointwise(current, Activation.RELU)
    return current


def head_forward(
    features: FeatureStack,
    head: Sequence[ConvSpec],
    samples: Optional[SparseSampleSet] = None,
) -> Union[FeatureStack, SparseOutput]:
    """
    Run the head densely, or only where the sampled outputs need it.

    Layers are joined by ReLU; the last layer has no activation. The sparse
    path evaluates each layer at its receptive-field set and leaves every
    other position at zero, which no needed output ever reads.
    :param features: neck output.
    :param head: the head layers.
    :param samples: positions to evaluate, or None for the dense path.
    :raises ShapeError: if the layers do not chain.
    :return: a dense stack, or the outputs at the expanded samples.
    """
    if not head:
        raise ShapeError("the head needs at least one layer")
    if samples is None:
        return _dense_forward(features, head)

    height, width = features.height, features.width
    coordinates = samples.expanded(height, width)
    if not coordinates:
        return SparseOutput((), np.zeros((0, head[-1].out_channels)))
    _check_same_conv(head[0])
    sets = receptive_field_sets(samples, head, (height, width))
    current = features
    for layer, needed in zip(head[:-1], sets[:-1]):
        rows, cols = np.nonzero(needed.bits)
        responses = np.maximum(conv2d_at(current, layer, rows, cols), 0.0)
        values = np.zeros((layer.out_channels, height, width))
        values[:, rows, cols] = responses.T
        current = FeatureStack(values)
    rows, cols = _split(coordinates)
    logger.debug(
        "sparse head: %d samples, %d positions per layer",
        len(coordinates),
        [int(needed.bits.sum()) for needed in sets],
    )
    return SparseOutput(coordinates, conv2d_at(current, head[-1], rows, cols))


def decode_detections(
    out: SparseOutput,
    samples: Optional[SparseSampleSet] = None,
    stride: int = 8,
    score_threshold: float = 0.5,
) -> List[Detection]:
    """
    Turn head outputs at sampled positions into image-space detections.

    Channels are ordered objectness logit, dw, dh, dx, dy, then class logits.
    The center is (x + 0.5 + tanh(dx), y + 0.5 + tanh(dy)) times the stride and
    the extents are exp of the clamped size logits times the stride.
    :param out: head outputs with their mask coordinates.
    :param samples: if given, only these coordinates are decoded.
    :param stride: mask-to-image scale.
    :param score_threshold: minimum sigmoid objectness, inclusive.
    :raises ShapeError: if there is no class channel.
    :return: detections in output order.
    """
    if out.channels < BOX_CHANNELS + 1:
        raise ShapeError(
            f"head output needs {BOX_CHANNELS} box channels and at least one class, "
            f"got {out.channels} channels",
        )
    wanted = None if samples is None else set(samples.coordinates)
    detections = []
    for (x, y), vector in zip(out.coordinates, out.values):
        if wanted is not None and (x, y) not in wanted:
            continue
        score = float(expit(vector[0]))
        if score < score_threshold:
            continue
        log_w, log_h = np.clip(vector[1:3], -SIZE_LOG_CLAMP, SIZE_LOG_CLAMP)
        detections.append(
            Detection(
                xc=(x + 0.5 + math.tanh(vector[3])) * stride,
                yc=(y + 0.5 + math.tanh(vector[4])) * stride,
                w=math.exp(log_w) * stride,
                h=math.exp(log_h) * stride,
                score=score,
                category=int(np.argmax(vector[BOX_CHANNELS:])),
            ),
        )
    return detections


def dump_detections(detections: Sequence[Detection], path: Union[str, Path]) -> None:
    """
    Write one `xc yc w h score category` line per detection.

    :param detections: the detections.
    :param path: the destination.
    """
    lines = [
        f"{det.xc:.4f} {det.yc:.4f} {det.w:.4f} {det.h:.4f} {det.score:.6f} {det.category}"
        for det in detections
    ]
    Path(path).write_text("".join(f"{line}\n" for line in lines))
