"""The sliced detector: stem, seeker, slicer, neck per patch and the sparse head."""
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from attr import define

from patchseek import netpbm
from patchseek.config import IMAGE_CHANNELS, MaskSource, PipelineConfig
from patchseek.errors import ParameterError, ShapeError
from patchseek.gridcore import Activation, ConvSpec, FeatureStack, conv2d, pointwise
from patchseek.labelgen import GaussianSpec, PseudoMask, gaussian_mask, hybrid_mask
from patchseek.metrics import SceneAnnotation, evaluate_bpr, mask_pr, pipeline_cost
from patchseek.report import ImageReport
from patchseek.seeker import ObjectnessMask, seek
from patchseek.slicer import CenterSet, PatchPlan, extract_patches, slice_mask
from patchseek.sparsehead import (
    Detection,
    SparseOutput,
    SparseSampleSet,
    decode_detections,
    head_forward,
)

logger = logging.getLogger(__name__)

ImageInput = Union[netpbm.Image, np.ndarray, FeatureStack]


@define(frozen=True)
class PipelineResult:
    """Everything one pipeline run produced."""

    detections: List[Detection]
    report: ImageReport
    mask: ObjectnessMask
    plan: PatchPlan
    centers: CenterSet


def image_features(image: Union[netpbm.Image, np.ndarray]) -> FeatureStack:
    """
    Turn a raster into a 3-channel stack scaled into [0, 1].

    Gray rasters are repeated over the channels.
    :param image: a decoded image, or (H, W) / (H, W, 3) samples in [0, 255].
    :return: the stack.
    """
    if isinstance(image, netpbm.Image):
        pixels = image.pixels / image.maxval
    else:
        pixels = np.asarray(image, dtype=np.float64) / 255
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], IMAGE_CHANNELS, axis=2)
    return FeatureStack(pixels.transpose(2, 0, 1))


def run_layers(
    features: FeatureStack,
    layers: Sequence[ConvSpec],
    floor_mode: bool = False,
    final_relu: bool = False,
) -> FeatureStack:
    """
    Apply a chain of layers with ReLU in between.

    :param features: the input.
    :param layers: the chain.
    :param floor_mode: round strided output sizes down.
    :param final_relu: also apply ReLU after the last layer.
    :return: the output.
    """
    current = features
    for index, layer in enumerate(layers):
        current = conv2d(current, layer, floor_mode=floor_mode)
        if final_relu or index < len(layers) - 1:
            current = pointwise(current, Activation.RELU)
    return current


def oracle_label(
    scene: SceneAnnotation,
    shape: Tuple[int, int],
    config: PipelineConfig,
    external: Optional[PseudoMask] = None,
) -> PseudoMask:
    """
    Build the ground-truth objectness label of a scene.

    :param scene: ground truth in pixels.
    :param shape: (height, width) of the mask.
    :param config: supplies tau, stride and the hybrid mode.
    :param external: segmentation mask that modulates the Gaussian label.
    :return: the label.
    """
    boxes = scene.mask_boxes(config.stride)
    label = gaussian_mask(boxes, shape, GaussianSpec(config.tau))
    if external is None:
        return label
    return hybrid_mask(label, external, config.hybrid_mode, boxes)


def _sparse_head(
    patches: Sequence[FeatureStack],
    plan: PatchPlan,
    centers: CenterSet,
    config: PipelineConfig,
) -> Tuple[SparseOutput, SparseSampleSet]:
    assigned: List[List[Tuple[int, int]]] = [[] for _ in plan.boxes]
    for center in centers:
        for index, box in enumerate(plan.boxes):
            if box.contains(center.x, center.y):
                assigned[index].append((center.x, center.y))
                break
    outputs = []
    for patch, box, coordinates in zip(patches, plan.boxes, assigned):
        if not coordinates:
            continue
        local = SparseSampleSet(coordinates, config.dilation_radius).shifted(-box.x1, -box.y1)
        neck_out = run_layers(patch, config.neck, final_relu=True)
        out = head_forward(neck_out, config.head, local)
        outputs.append(out.shifted(box.x1, box.y1))
    samples = SparseSampleSet(
        [coordinate for coordinates in assigned for coordinate in coordinates],
        config.dilation_radius,
    )
    return SparseOutput.concatenate(outputs, config.head[-1].out_channels), samples


def run_pipeline(  # noqa: WPS210
    image: ImageInput,
    config: PipelineConfig,
    scene: Optional[SceneAnnotation] = None,
    name: str = "image",
    mask_source: Optional[MaskSource] = None,
    external: Optional[PseudoMask] = None,
) -> PipelineResult:
    """
    Detect objects in one image through the sliced pipeline.

    The stem runs on the whole image, then the mask (seeker prediction or
    oracle label) is sliced into patches. The neck runs on every patch and
    the head only at the centers, each evaluated in the first patch that
    contains it, before decoding in image coordinates.
    :param image: an image, or stem features.
    :param config: the network and options.
    :param scene: ground truth; required by the oracle mask, enables recall metrics.
    :param name: image name in the report.
    :param mask_source: overrides the configured mask source.
    :param external: segmentation mask for the hybrid oracle label.
    :raises ParameterError: if the oracle mask is requested without a scene.
    :raises ShapeError: if the mask and the features disagree.
    :return: detections, report and intermediate products.
    """
    source = MaskSource(mask_source or config.mask_source)
    if isinstance(image, FeatureStack):
        features = image
        if scene is not None:
            image_shape = (scene.image_h, scene.image_w)
        else:
            image_shape = (features.height * config.stride, features.width * config.stride)
    else:
        raster = image_features(image)
        image_shape = (raster.height, raster.width)
        features = run_layers(raster, config.stem, floor_mode=True)
    shape = (features.height, features.width)

    label = None
    if scene is not None:
        label = oracle_label(scene, shape, config, external)
    if source is MaskSource.ORACLE:
        if label is None:
            raise ParameterError("the oracle mask needs the scene annotation")
        mask = ObjectnessMask.from_label(label)
    else:
        mask = seek(features, config.seeker)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} != feature shape {shape}")

    plan, centers = slice_mask(mask, config.k, config.strategy, config.activation_threshold)
    patches = extract_patches(features, plan)
    out, samples = _sparse_head(patches, plan, centers, config)
    detections = decode_detections(
        out,
        SparseSampleSet(samples.coordinates),
        stride=config.stride,
        score_threshold=config.score_threshold,
    )
    logger.debug(
        "%s: %d centers, %d patches, %d detections",
        name,
        len(centers),
        len(plan),
        len(detections),
    )

    report = ImageReport(
        name=name,
        mask_source=source.value,
        strategy=plan.strategy.value,
        patch_count=len(plan),
        center_count=len(centers),
        detection_count=len(detections),
        cost=pipeline_cost(config, plan, samples, image_shape),
        bpr=evaluate_bpr(scene, plan, centers, config.stride) if scene is not None else None,
        mask_pr=mask_pr(mask, label, config.activation_threshold) if label is not None else None,
    )
    return PipelineResult(
        detections=detections,
        report=report,
        mask=mask,
        plan=plan,
        centers=centers,
    )
