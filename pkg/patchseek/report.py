"""Run reports: one entry per image plus aggregate means, stored as versioned JSON."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from attr import asdict, define, field
from packaging.version import InvalidVersion, Version

from patchseek.errors import FormatError
from patchseek.metrics import BprResult, CostReport

logger = logging.getLogger(__name__)

SCHEMA_VERSION = Version("1.0")


@define(frozen=True)
class ImageReport:
    """What the pipeline measured on one image."""

    name: str
    mask_source: str
    strategy: str
    patch_count: int
    center_count: int
    detection_count: int
    cost: CostReport
    bpr: Optional[BprResult] = None
    mask_pr: Optional[Tuple[float, float]] = None

    @property
    def preserved_ratio(self) -> float:  # noqa: D102
        return self.cost.preserved_patch_ratio


def _mean(values: Sequence[float]) -> Optional[float]:
    if not values:
        return None
    return sum(values) / len(values)


@define(frozen=True)
class RunReport:
    """Image reports in input order."""

    images: Tuple[ImageReport, ...] = field(converter=tuple, factory=tuple)

    def aggregate(self) -> Dict[str, Any]:
        """
        Mean of every per-image value, None where no image has one.

        :return: the aggregate block.
        """
        images = self.images
        with_bpr = [image.bpr for image in images if image.bpr is not None]
        with_pr = [image.mask_pr for image in images if image.mask_pr is not None]
        return {
            "image_count": len(images),
            "patch_count": _mean([image.patch_count for image in images]),
            "center_count": _mean([image.center_count for image in images]),
            "detection_count": _mean([image.detection_count for image in images]),
            "preserved_patch_ratio": _mean([image.preserved_ratio for image in images]),
            "sliced_macs": _mean([image.cost.sliced_total for image in images]),
            "dense_macs": _mean([image.cost.dense_total for image in images]),
            "sliced_neck_head_macs": _mean([image.cost.sliced_neck_head for image in images]),
            "dense_neck_head_macs": _mean([image.cost.dense_neck_head for image in images]),
            "bpr_box": _mean([bpr.bpr_box for bpr in with_bpr]),
            "bpr_ctr": _mean([bpr.bpr_ctr for bpr in with_bpr]),
            "mask_precision": _mean([pr[0] for pr in with_pr]),
            "mask_recall": _mean([pr[1] for pr in with_pr]),
        }


def _image_to_dict(image: ImageReport) -> Dict[str, Any]:
    cost = asdict(image.cost)
    cost["sliced_total"] = image.cost.sliced_total
    cost["dense_total"] = image.cost.dense_total
    bpr = asdict(image.bpr) if image.bpr is not None else None
    mask_pr = None
    if image.mask_pr is not None:
        mask_pr = {"precision": image.mask_pr[0], "recall": image.mask_pr[1]}
    return {
        "name": image.name,
        "mask_source": image.mask_source,
        "strategy": image.strategy,
        "patch_count": image.patch_count,
        "center_count": image.center_count,
        "detection_count": image.detection_count,
        "preserved_patch_ratio": image.preserved_ratio,
        "cost": cost,
        "bpr": bpr,
        "mask_pr": mask_pr,
    }


def render_report(report: RunReport) -> str:
    """
    Serialize a report with a fixed key order and no timestamps.

    :param report: the report.
    :return: the JSON text.
    """
    document = {
        "schema": str(SCHEMA_VERSION),
        "images": [_image_to_dict(image) for image in report.images],
        "aggregate": report.aggregate(),
    }
    return json.dumps(document, indent=2) + "\n"


def emit_report(reports: Union[RunReport, Sequence[ImageReport]], path: Union[str, Path]) -> None:
    """
    Write a run report.

    :param reports: the report, or image reports in input order.
    :param path: the destination.
    """
    if not isinstance(reports, RunReport):
        reports = RunReport(reports)
    Path(path).write_text(render_report(reports))
    logger.info("Wrote report of %d images to %s", len(reports.images), path)


def _image_from_dict(raw: Dict[str, Any]) -> ImageReport:
    cost = {key: value for key, value in raw["cost"].items() if not key.endswith("_total")}
    bpr = raw.get("bpr")
    mask_pr = raw.get("mask_pr")
    return ImageReport(
        name=raw["name"],
        mask_source=raw["mask_source"],
        strategy=raw["strategy"],
        patch_count=raw["patch_count"],
        center_count=raw["center_count"],
        detection_count=raw["detection_count"],
        cost=CostReport(**cost),
        bpr=BprResult(**bpr) if bpr is not None else None,
        mask_pr=(mask_pr["precision"], mask_pr["recall"]) if mask_pr is not None else None,
    )


def load_report(path: Union[str, Path]) -> RunReport:
    """
    Read a report written by emit_report.

    :param path: the file.
    :raises FormatError: on invalid JSON, a missing field or a newer schema.
    :return: the report.
    """
    try:
        document = json.loads(Path(path).read_text())
        version = Version(document["schema"])
    except (json.JSONDecodeError, InvalidVersion, KeyError, TypeError) as error:
        raise FormatError(f"{path}: not a run report ({error})")
    if version.major > SCHEMA_VERSION.major:
        raise FormatError(
            f"{path}: report schema {version} is newer than the supported {SCHEMA_VERSION}",
        )
    try:
        images: List[ImageReport] = [_image_from_dict(raw) for raw in document["images"]]
    except (KeyError, TypeError) as error:
        raise FormatError(f"{path}: malformed image entry ({error})")
    return RunReport(images)
