import enum
import logging
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import numpy as np
from attr import define
from typer import Argument, Exit, Option, Typer

from patchseek import annotations, labelgen, metrics, netpbm, synth
from patchseek.annotations import DatasetItem
from patchseek.config import MaskSource, Settings, build_config, load_settings
from patchseek.executor import Executor
from patchseek.report import RunReport, emit_report, load_report
from patchseek.seeker import ObjectnessMask
from patchseek.slicer import Strategy, dump_plan, slice_mask

cli = Typer()

REPORT_NAME = "report.json"


class AnnotationFormat(str, enum.Enum):  # noqa: WPS600
    """Supported annotation formats."""

    VISDRONE = "visdrone"


@define
class State:
    """Storage of common options for commands."""

    settings: Settings
    out: Path
    ann_format: AnnotationFormat = AnnotationFormat.VISDRONE


state: Optional[State] = None


def _load_items(dataset: Path) -> List[DatasetItem]:
    if not state:
        raise Exit(2)
    settings = state.settings
    return annotations.load_dataset(
        dataset,
        (settings.image_w, settings.image_h),
        ann_format=state.ann_format.value,
    )


@cli.command(help="Print sparsity statistics of an annotated dataset.")
def stats(
    dataset: Path = Argument(..., help="Directory with annotations/ and optional images/."),
) -> None:  # noqa: D103
    if not state:
        raise Exit(2)

    try:
        items = _load_items(dataset)
        result = metrics.dataset_stats([item.scene for item in items], state.settings.k)
    except ValueError as e:
        print(f"Error during statistics: {str(e)}")
        raise Exit(1)

    print(f"Images: {result.count}")
    if not result.count:
        raise Exit()
    print(f"Mean objects per image: {result.mean_objects:.2f}")
    print(f"Mean pixel occupancy: {result.mean_occupancy:.4f}")
    print(f"Mean empty patches at k={state.settings.k}: {result.mean_emptiness:.4f}")


@cli.command(
    name="synth",
    help="Generate synthetic scenes with VisDrone annotations and PPM images.",
)
def synth_command(
    count: int = Argument(..., help="Number of scenes."),
    images: bool = Option(True, help="Also write PPM images."),
) -> None:  # noqa: D103
    if not state:
        raise Exit(2)

    settings = state.settings
    try:
        params = synth.SynthParams(
            seed=settings.seed,
            image_w=settings.image_w,
            image_h=settings.image_h,
            tau=settings.tau,
        )
        scenes = synth.synth_scenes(params, count)
    except ValueError as e:
        print(f"Error during synthesis: {str(e)}")
        raise Exit(1)

    (state.out / "annotations").mkdir(parents=True, exist_ok=True)
    if images:
        (state.out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(settings.seed)
    width = len(str(count))
    for index, scene in enumerate(scenes):
        name = f"scene_{index:0{width}d}"
        annotations.dump_visdrone(scene, state.out / "annotations" / f"{name}.txt")
        if images:
            netpbm.write(
                state.out / "images" / f"{name}.ppm",
                synth.render_scene_image(scene, rng),
            )
    print(f"Wrote {count} scenes to {state.out}.")


@cli.command(help="Run the sliced pipeline over a dataset and write a report.")
def run(
    dataset: Path = Argument(..., help="Directory with annotations/ and optional images/."),
    render: bool = Option(False, help="Also write PPM overlays."),
) -> None:  # noqa: D103
    if not state:
        raise Exit(2)

    settings = state.settings
    try:
        executor = Executor(
            config=build_config(settings),
            items=_load_items(dataset),
            out_dir=state.out,
            workers=settings.workers,
            seed=settings.seed,
            render=render,
        )
        report = executor.run(
            on_image=lambda item, result: print(
                f"{datetime.now()} "
                f"Image {item.name} PROCESSED ({result.report.patch_count} patches)",
            ),
        )
        state.out.mkdir(parents=True, exist_ok=True)
        emit_report(report, state.out / REPORT_NAME)
    except ValueError as e:
        print(f"Error during run: {str(e)}")
        raise Exit(1)

    print(f"Report written to {state.out / REPORT_NAME}.")


@cli.command(name="slice", help="Slice a PGM objectness mask into a patch plan.")
def slice_command(
    mask_path: Path = Argument(..., help="PGM mask, scaled into [0, 1] by its maxval."),
) -> None:  # noqa: D103
    if not state:
        raise Exit(2)

    settings = state.settings
    plan_path = state.out / f"{mask_path.stem}.plan.txt"
    try:
        mask = ObjectnessMask.from_label(labelgen.load_mask_pgm(mask_path))
        plan, centers = slice_mask(
            mask,
            settings.k,
            settings.strategy,
            settings.activation_threshold,
        )
        state.out.mkdir(parents=True, exist_ok=True)
        dump_plan(plan, plan_path)
    except ValueError as e:
        print(f"Error during slicing: {str(e)}")
        raise Exit(1)

    print(f"{len(centers)} centers, {len(plan)} patches of {plan.patch_w}x{plan.patch_h}.")
    print(f"Plan written to {plan_path}.")


@cli.command(help="Aggregate one or more run reports.")
def report(
    paths: List[Path] = Argument(..., help="Report files."),
    flops: bool = Option(False, "--flops", help="Show FLOPs (2 per MAC) instead of MACs."),
    bins: int = Option(10, help="Number of preserved-ratio buckets."),
) -> None:  # noqa: D103
    if not state:
        raise Exit(2)

    try:
        images = [image for path in paths for image in load_report(path).images]
        buckets = metrics.bucketize([image.cost for image in images], bins)
    except ValueError as e:
        print(f"Error during aggregation: {str(e)}")
        raise Exit(1)

    aggregate = RunReport(images).aggregate()
    unit, scale = ("FLOPs", 2) if flops else ("MACs", 1)
    print(f"Images: {aggregate['image_count']}")
    if not images:
        raise Exit()
    for key, value in aggregate.items():
        if key == "image_count" or value is None:
            continue
        if key.endswith("_macs"):
            print(f"{key[: -len('_macs')]} {unit}: {value * scale:.0f}")
        else:
            print(f"{key}: {value:.4f}")
    for bucket in buckets:
        if bucket.count:
            print(
                f"preserved [{bucket.lower:.1f}, {bucket.upper:.1f}): "  # noqa: WPS237
                f"{bucket.count} images, "
                f"sliced {bucket.mean_sliced * scale:.0f} {unit}, "
                f"dense {bucket.mean_dense * scale:.0f} {unit}",
            )


@cli.callback()
def main(  # noqa: WPS211, D103
    config: Optional[Path] = Option(
        None,
        help="The key = value configuration file.",
        envvar="PATCHSEEK_CONFIG",
    ),
    strategy: Optional[Strategy] = Option(None, help="The slicing strategy."),
    k: Optional[int] = Option(None, "--k", help="Patch grid divisions per axis."),
    tau: Optional[float] = Option(None, help="Gaussian label value at the box corners."),
    threshold: Optional[float] = Option(None, help="Mask activation threshold."),
    mask_source: Optional[MaskSource] = Option(
        None,
        help="Slice the seeker prediction or the ground-truth label.",
    ),
    seed: Optional[int] = Option(
        None,
        help="Seed of the toy network and the synthetic data.",
        envvar="PATCHSEEK_SEED",
    ),
    out: Path = Option(
        Path("out"),
        help="The output directory.",
        envvar="PATCHSEEK_OUT",
    ),
    ann_format: AnnotationFormat = Option(
        AnnotationFormat.VISDRONE,
        help="The annotation format.",
    ),
    workers: Optional[int] = Option(None, help="Images processed concurrently."),
    verbose: bool = Option(False, "--verbose", help="Log debug details."),
) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)
    try:
        settings = load_settings(config) if config else Settings()
        settings = settings.with_overrides(
            strategy=strategy,
            k=k,
            tau=tau,
            activation_threshold=threshold,
            mask_source=mask_source,
            seed=seed,
            workers=workers,
        )
    except ValueError as e:
        print(f"Error during configuration: {str(e)}")
        raise Exit(1)

    global state  # noqa: WPS420
    state = State(  # noqa: WPS442
        settings=settings,
        out=out,
        ann_format=ann_format,
    )
