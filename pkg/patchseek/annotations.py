import logging
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

from attr import define

from patchseek import netpbm
from patchseek.errors import ParameterError, ParseError
from patchseek.labelgen import PseudoMask, load_mask_pgm
from patchseek.metrics import SceneAnnotation

logger = logging.getLogger(__name__)

IGNORED_CATEGORY = 0

_VISDRONE_PATTERN = re.compile(
    r"^\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,"
    r"\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,?\s*$",
)


@define(frozen=True)
class DatasetItem:
    """One image of a dataset directory."""

    name: str
    scene: SceneAnnotation
    image: Optional[netpbm.Image] = None
    mask: Optional[PseudoMask] = None


def parse_visdrone(path: Union[str, Path], image_w: int, image_h: int) -> SceneAnnotation:
    """
    Read a VisDrone annotation file.

    Every line is `left,top,width,height,score,category,truncation,occlusion`
    with an optional trailing comma. Ignored regions (category 0) and boxes
    without area are dropped, the rest are clipped to the image.
    :param path: the annotation file.
    :param image_w: image width in pixels.
    :param image_h: image height in pixels.
    :raises ParseError: on a malformed line.
    :return: the scene.
    """
    path = Path(path)
    corners: List[Tuple[float, float, float, float, int]] = []
    for line_number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        match = _VISDRONE_PATTERN.match(line)
        if not match:
            raise ParseError(
                "expected 'left,top,width,height,score,category,truncation,occlusion'",
                path,
                line_number,
            )
        left, top, width, height, _, category = (int(group) for group in match.groups()[:6])
        if category == IGNORED_CATEGORY:
            continue
        if width <= 0 or height <= 0:
            logger.warning("%s:%d: dropping box without area", path, line_number)
            continue
        corners.append((left, top, left + width, top + height, category))
    return SceneAnnotation.clipped(image_w, image_h, corners)


def dump_visdrone(scene: SceneAnnotation, path: Union[str, Path]) -> None:
    """
    Write a scene in the VisDrone annotation format.

    Corners are rounded to whole pixels.
    :param scene: the scene.
    :param path: the destination.
    """
    lines = []
    for box in scene.boxes:
        x1, y1, x2, y2 = (round(corner) for corner in box.corners)
        lines.append(f"{x1},{y1},{x2 - x1},{y2 - y1},1,{box.category},0,0")
    Path(path).write_text("".join(f"{line}\n" for line in lines))


ANNOTATION_PARSERS: Dict[str, Callable[[Path, int, int], SceneAnnotation]] = {
    "visdrone": parse_visdrone,
}


def load_dataset(
    root: Union[str, Path],
    image_size: Tuple[int, int] = (1024, 1024),
    ann_format: str = "visdrone",
) -> List[DatasetItem]:
    """
    Load `annotations/*.txt` of a dataset directory with the matching `images/*.ppm`.

    The image size is taken from the PPM when it exists, otherwise from
    `image_size`. A gray map `masks/<name>.pgm` on the stride-8 feature grid
    is loaded as the external segmentation mask of the image.
    :param root: the dataset directory.
    :param image_size: (width, height) used for annotations without an image.
    :param ann_format: annotation format, one of ANNOTATION_PARSERS.
    :raises ParameterError: if the annotation format is unknown.
    :return: items sorted by name.
    """
    parser = ANNOTATION_PARSERS.get(ann_format)
    if parser is None:
        raise ParameterError(f"unknown annotation format: {ann_format}")
    root = Path(root)
    items = []
    for annotation_file in sorted((root / "annotations").glob("*.txt")):
        image_file = root / "images" / f"{annotation_file.stem}.ppm"
        image = netpbm.read(image_file) if image_file.exists() else None
        width, height = (image.width, image.height) if image else image_size
        mask_file = root / "masks" / f"{annotation_file.stem}.pgm"
        items.append(
            DatasetItem(
                name=annotation_file.stem,
                scene=parser(annotation_file, width, height),
                image=image,
                mask=load_mask_pgm(mask_file) if mask_file.exists() else None,
            ),
        )
    logger.info("Loaded %d annotated images from %s", len(items), root)
    return items
