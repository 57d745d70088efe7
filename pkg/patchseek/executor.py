import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from patchseek import netpbm
from patchseek.annotations import DatasetItem
from patchseek.config import MaskSource, PipelineConfig
from patchseek.errors import ParameterError
from patchseek.pipeline import PipelineResult, run_pipeline
from patchseek.render import render_overlay
from patchseek.report import RunReport
from patchseek.slicer import dump_plan
from patchseek.sparsehead import dump_detections
from patchseek.synth import render_scene_image

logger = logging.getLogger(__name__)


class Executor:
    """A class for running the pipeline over a dataset."""

    def __init__(  # noqa: WPS211
        self,
        config: PipelineConfig,
        items: Sequence[DatasetItem],
        out_dir: Optional[Path] = None,
        workers: int = 1,
        seed: int = 0,
        render: bool = False,
    ):
        """
        Initialize the class instance.

        :param config: the network and options.
        :param items: images with their annotations, in input order.
        :param out_dir: where plans, detections and overlays are written.
                        Nothing is written when it is None.
        :param workers: number of images processed concurrently.
        :param seed: seeds the stand-in images of annotations without an image.
        :param render: also write PPM overlays.
        """
        if workers < 1:
            raise ParameterError(f"workers must be at least 1, got {workers}")
        self.config = config
        self.items = list(items)
        self.out_dir = out_dir
        self.workers = workers
        self.seed = seed
        self.render = render

    def run(
        self,
        on_image: Optional[Callable[[DatasetItem, PipelineResult], None]] = None,
    ) -> RunReport:
        """
        Run the pipeline on every image.

        The first `warmup_images` images are sliced with the oracle mask.
        Results are merged in input order whatever the number of workers.
        :param on_image: callback that is called for each processed image.
        :return: the run report.
        """
        if self.out_dir is not None:
            folders = ["plans", "detections"] + (["overlays"] if self.render else [])
            for folder in folders:
                (self.out_dir / folder).mkdir(parents=True, exist_ok=True)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results: List[PipelineResult] = list(
                pool.map(self._process, range(len(self.items))),
            )

        for item, result in zip(self.items, results):
            if on_image:
                on_image(item, result)
        logger.info("Processed %d images", len(results))
        return RunReport(result.report for result in results)

    def _image(self, index: int) -> netpbm.Image:
        item = self.items[index]
        if item.image is not None:
            return item.image
        logger.info("No image for %s, rendering one from its annotation", item.name)
        rng = np.random.default_rng([self.seed, index])
        return netpbm.Image(pixels=render_scene_image(item.scene, rng), maxval=255)

    def _process(self, index: int) -> PipelineResult:
        item = self.items[index]
        mask_source = self.config.mask_source
        if index < self.config.warmup_images:
            mask_source = MaskSource.ORACLE
        image = self._image(index)
        result = run_pipeline(
            image,
            self.config,
            scene=item.scene,
            name=item.name,
            mask_source=mask_source,
            external=item.mask,
        )
        if self.out_dir is not None:
            dump_plan(result.plan, self.out_dir / "plans" / f"{item.name}.txt")
            dump_detections(
                result.detections,
                self.out_dir / "detections" / f"{item.name}.txt",
            )
            if self.render:
                render_overlay(
                    item.scene,
                    result.mask,
                    result.plan,
                    result.detections,
                    self.out_dir / "overlays" / f"{item.name}.ppm",
                    stride=self.config.stride,
                    image=image,
                )
        return result
