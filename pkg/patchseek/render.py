from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from patchseek import netpbm
from patchseek.metrics import SceneAnnotation
from patchseek.seeker import ObjectnessMask
from patchseek.slicer import PatchPlan
from patchseek.sparsehead import Detection

PATCH_COLOR = (0, 255, 0)
DETECTION_COLOR = (255, 255, 0)
MASK_WEIGHT = 0.6
_DEFAULT_GRAY = 64


def _outline(
    canvas: np.ndarray,
    corners: Tuple[int, int, int, int],
    color: Tuple[int, int, int],
) -> None:
    height, width = canvas.shape[:2]
    x1, y1, x2, y2 = corners
    left, right = max(x1, 0), min(x2, width - 1)
    top, bottom = max(y1, 0), min(y2, height - 1)
    if left > right or top > bottom:
        return
    for x in (x1, x2):
        if 0 <= x < width:
            canvas[top : bottom + 1, x] = color
    for y in (y1, y2):
        if 0 <= y < height:
            canvas[y, left : right + 1] = color


def render_overlay(  # noqa: WPS211
    scene: SceneAnnotation,
    mask: ObjectnessMask,
    plan: PatchPlan,
    detections: Sequence[Detection],
    path: Union[str, Path],
    stride: int = 8,
    image: Optional[netpbm.Image] = None,
) -> None:
    """
    Draw the mask, the patches and the detections over a gray image and write a P6 file.

    The mask is upsampled by the stride and tints the red channel. A patch
    [x1, x2) is outlined on pixel columns x1 * stride and x2 * stride - 1,
    rows likewise.
    :param scene: supplies the image size.
    :param mask: objectness mask.
    :param plan: patches in mask cells.
    :param detections: detections in pixels.
    :param path: the destination.
    :param stride: mask-to-image scale.
    :param image: background image, mid gray when missing.
    """
    height, width = scene.image_h, scene.image_w
    if image is not None:
        pixels = image.pixels * (255 / image.maxval)
        gray = pixels.mean(axis=2) if pixels.ndim == 3 else pixels
    else:
        gray = np.full((height, width), _DEFAULT_GRAY, dtype=np.float64)
    canvas = np.repeat(gray[:height, :width, None], 3, axis=2)

    upsampled = np.kron(mask.grid.values, np.ones((stride, stride)))[:height, :width]
    canvas[:, :, 0] += MASK_WEIGHT * upsampled * (255 - canvas[:, :, 0])
    canvas = np.clip(np.rint(canvas), 0, 255).astype(np.int64)

    for box in plan.boxes:
        corners = (box.x1 * stride, box.y1 * stride, box.x2 * stride - 1, box.y2 * stride - 1)
        _outline(canvas, corners, PATCH_COLOR)
    for det in detections:
        corners = (
            round(det.xc - det.w / 2),
            round(det.yc - det.h / 2),
            round(det.xc + det.w / 2) - 1,
            round(det.yc + det.h / 2) - 1,
        )
        _outline(canvas, corners, DETECTION_COLOR)
    netpbm.write(path, canvas, maxval=255, binary=True)
