from typing import List, Optional

import numpy as np
import pytest

from patchseek.config import PipelineConfig, Settings, build_config
from patchseek.gridcore import Grid2D
from patchseek.metrics import BprResult, CostReport, SceneAnnotation
from patchseek.report import ImageReport
from patchseek.seeker import ObjectnessMask
from patchseek.synth import SynthParams, synth_scenes


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_config() -> PipelineConfig:
    return build_config(Settings(seed=7, num_categories=2, head_hidden=8, stem_channels=(4, 6, 8)))


@pytest.fixture(scope="session")
def synthetic_scenes() -> List[SceneAnnotation]:
    return synth_scenes(SynthParams(seed=2024), 1000)


def make_mask(values: np.ndarray) -> ObjectnessMask:
    return ObjectnessMask(Grid2D(values))


def blob_mask(shape: tuple, blobs: list) -> ObjectnessMask:
    """Mask with 0.9 on each (x, y, w, h) block and a 1.0 peak at its top-left cell."""
    values = np.zeros(shape)
    for x, y, w, h in blobs:
        values[y : y + h, x : x + w] = 0.9
        values[y, x] = 1.0
    return make_mask(values)


def image_report(name: str, bpr_ctr: Optional[float] = None, patches: int = 2) -> ImageReport:
    bpr = None
    if bpr_ctr is not None:
        bpr = BprResult(bpr_box=1.0, bpr_ctr=bpr_ctr, box_hits=[True], ctr_hits=[bpr_ctr == 1])
    return ImageReport(
        name=name,
        mask_source="predicted",
        strategy="greedy",
        patch_count=patches,
        center_count=3,
        detection_count=1,
        cost=CostReport(
            stem=10,
            seeker=5,
            neck=20 * patches,
            head=7,
            dense_neck=400,
            dense_head=100,
            preserved_patch_ratio=patches / 64,
        ),
        bpr=bpr,
        mask_pr=(0.5, 0.25) if bpr_ctr is not None else None,
    )
