"""Synthetic clustered small-object scenes."""
import logging
import math
from typing import Any, List, Optional, Tuple

import numpy as np
from attr import define, field

from patchseek.errors import ParameterError
from patchseek.labelgen import BoundingBox, GaussianSpec, nearest_cell
from patchseek.metrics import SceneAnnotation

logger = logging.getLogger(__name__)

CATEGORIES = 10
_BACKGROUND = 60
_NOISE = 12
# Peaks must win by more than rounding noise.
_MARGIN = 1 - 1e-9


def _check_positive(instance: Any, attribute: Any, value: float) -> None:
    if not value > 0:
        raise ParameterError(f"{attribute.name} must be positive, got {value}")


def _check_size_range(instance: "SynthParams", attribute: Any, value: Tuple[int, int]) -> None:
    low, high = value
    if not 0 < low <= high:
        raise ParameterError(f"object size range must satisfy 0 < low <= high, got {value}")
    if high > min(instance.image_w, instance.image_h):
        raise ParameterError(
            f"objects up to {high} px do not fit a "
            f"{instance.image_w}x{instance.image_h} image",
        )


@define(frozen=True)
class SynthParams:
    """Parameters of the clustered scene generator, sizes in pixels."""

    seed: int = 0
    image_w: int = field(default=1024, validator=_check_positive)
    image_h: int = field(default=1024, validator=_check_positive)
    cluster_count_mean: float = field(default=3.0, validator=_check_positive)
    objects_per_cluster_mean: float = field(default=36.0, validator=_check_positive)
    object_size_range: Tuple[int, int] = field(
        default=(16, 48),
        converter=tuple,
        validator=_check_size_range,
    )
    cluster_spread: float = field(default=48.0, validator=_check_positive)
    min_size: int = field(default=8, validator=_check_positive)
    max_attempts: int = field(default=25, validator=_check_positive)
    stride: int = field(default=8, validator=_check_positive)
    tau: float = 0.5


@define
class _Accepted:
    """Label geometry of the objects placed so far, in mask units."""

    spec: GaussianSpec
    shape: Tuple[int, int]
    xc: List[float] = field(factory=list)
    yc: List[float] = field(factory=list)
    w: List[float] = field(factory=list)
    h: List[float] = field(factory=list)
    col: List[int] = field(factory=list)
    row: List[int] = field(factory=list)
    peak: List[float] = field(factory=list)

    def cell(self, box: BoundingBox) -> Tuple[int, int]:
        height, width = self.shape
        return nearest_cell(box.xc, width), nearest_cell(box.yc, height)

    def value(self, box: BoundingBox, col: int, row: int) -> float:
        return float(self._neighbourhood_max(box.xc, box.yc, box.w, box.h, col, row, 0)[0])

    def separated(self, box: BoundingBox) -> bool:
        """
        Check that a new object and every placed one keep their centre cells as strict peaks.

        :param box: candidate in mask units.
        :return: whether the candidate can be placed.
        """
        if not self.xc:
            return True
        col, row = self.cell(box)
        own_peak = self.value(box, col, row)
        xc, yc = np.array(self.xc), np.array(self.yc)
        w, h = np.array(self.w), np.array(self.h)
        others_near_new = self._neighbourhood_max(xc, yc, w, h, col, row, 1)
        new_near_others = self._neighbourhood_max(
            box.xc,
            box.yc,
            box.w,
            box.h,
            np.array(self.col),
            np.array(self.row),
            1,
        )
        return bool(
            (others_near_new < own_peak * _MARGIN).all()
            and (new_near_others < np.array(self.peak) * _MARGIN).all(),
        )

    def add(self, box: BoundingBox) -> None:
        col, row = self.cell(box)
        self.xc.append(box.xc)
        self.yc.append(box.yc)
        self.w.append(box.w)
        self.h.append(box.h)
        self.col.append(col)
        self.row.append(row)
        self.peak.append(self.value(box, col, row))

    def _neighbourhood_max(  # noqa: WPS211
        self,
        xc: Any,
        yc: Any,
        w: Any,
        h: Any,
        col: Any,
        row: Any,
        radius: int,
    ) -> np.ndarray:
        log_tau = math.log(self.spec.tau)
        offsets = np.arange(-radius, radius + 1)[:, None]
        dx = (np.asarray(col)[None] + offsets - np.asarray(xc)[None]) / (np.asarray(w) / 2)
        dy = (np.asarray(row)[None] + offsets - np.asarray(yc)[None]) / (np.asarray(h) / 2)
        # The box Gaussian is separable, so its maximum over a square window is a product.
        return np.exp(0.5 * log_tau * (dx**2).min(axis=0)) * np.exp(
            0.5 * log_tau * (dy**2).min(axis=0),
        )


def _draw_object(
    params: SynthParams,
    rng: np.random.Generator,
    cluster: Tuple[float, float],
) -> Optional[BoundingBox]:
    low, high = params.object_size_range
    cx = cluster[0] + rng.normal(0, params.cluster_spread)
    cy = cluster[1] + rng.normal(0, params.cluster_spread)
    width, height = rng.uniform(low, high, size=2)
    category = int(rng.integers(1, CATEGORIES + 1))
    x1 = max(round(cx - width / 2), 0)
    y1 = max(round(cy - height / 2), 0)
    x2 = min(round(cx + width / 2), params.image_w)
    y2 = min(round(cy + height / 2), params.image_h)
    if x2 - x1 < params.min_size or y2 - y1 < params.min_size:
        return None
    return BoundingBox.from_corners(x1, y1, x2, y2, category)


def _synth_scene(params: SynthParams, rng: np.random.Generator) -> SceneAnnotation:
    shape = (math.ceil(params.image_h / params.stride), math.ceil(params.image_w / params.stride))
    accepted = _Accepted(GaussianSpec(params.tau), shape)
    boxes = []
    skipped = 0
    for _ in range(rng.poisson(params.cluster_count_mean)):
        cluster = (rng.uniform(0, params.image_w), rng.uniform(0, params.image_h))
        for _ in range(rng.poisson(params.objects_per_cluster_mean)):
            for _ in range(params.max_attempts):
                box = _draw_object(params, rng, cluster)
                if box is not None and accepted.separated(box.scaled(params.stride)):
                    accepted.add(box.scaled(params.stride))
                    boxes.append(box)
                    break
            else:
                skipped += 1
    if skipped:
        logger.debug("skipped %d objects that could not be separated", skipped)
    return SceneAnnotation(params.image_w, params.image_h, boxes)


def synth_scenes(params: SynthParams, n: int) -> List[SceneAnnotation]:
    """
    Generate scenes of clustered small objects.

    Cluster counts and objects per cluster are Poisson, objects scatter
    normally around their cluster, sizes are uniform per axis, and boxes are
    clipped to the image with whole-pixel corners. Objects whose Gaussian
    label would not keep every centre cell a strict local maximum are redrawn.
    :param params: generator parameters.
    :param n: number of scenes.
    :raises ParameterError: if n < 1.
    :return: the scenes, identical for the same seed.
    """
    if n < 1:
        raise ParameterError(f"scene count must be at least 1, got {n}")
    rng = np.random.default_rng(params.seed)
    scenes = [_synth_scene(params, rng) for _ in range(n)]
    logger.info(
        "Generated %d scenes with %d objects",
        n,
        sum(len(scene.boxes) for scene in scenes),
    )
    return scenes


def render_scene_image(scene: SceneAnnotation, rng: np.random.Generator) -> np.ndarray:
    """
    Paint a scene as an RGB raster: bright boxes on a noisy dark background.

    :param scene: the scene.
    :param rng: noise source.
    :return: (H, W, 3) integer samples in [0, 255].
    """
    pixels = rng.normal(_BACKGROUND, _NOISE, size=(scene.image_h, scene.image_w, 3))
    for box in scene.boxes:
        x1, y1, x2, y2 = (round(corner) for corner in box.corners)
        hue = np.array([160 + 9 * box.category, 220 - 7 * box.category, 190])
        pixels[y1:y2, x1:x2] = hue + rng.normal(0, _NOISE, size=(y2 - y1, x2 - x1, 3))
    return np.clip(np.rint(pixels), 0, 255).astype(np.int64)
