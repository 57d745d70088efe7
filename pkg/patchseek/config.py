import enum
import logging
import math
import re
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from attr import define, evolve, field, fields_dict

from patchseek.errors import ParameterError, ParseError, ShapeError
from patchseek.gridcore import ConvSpec
from patchseek.labelgen import HybridMode
from patchseek.seeker import SeekerParams, init_params, load_params
from patchseek.slicer import Strategy
from patchseek.sparsehead import BOX_CHANNELS

logger = logging.getLogger(__name__)

STEM_STRIDE = 8
IMAGE_CHANNELS = 3

_LINE_PATTERN = re.compile(r"^\s*([a-z_]+)\s*=\s*(.*?)\s*$")


class MaskSource(str, enum.Enum):  # noqa: WPS600
    """What drives the slicing: the seeker prediction or the ground-truth label."""

    PREDICTED = "predicted"
    ORACLE = "oracle"


def _check_unit_interval(instance: Any, attribute: Any, value: float) -> None:
    if not 0 < value < 1:
        raise ParameterError(f"{attribute.name} must be in (0, 1), got {value}")


def _check_at_least(minimum: int) -> Callable[[Any, Any, int], None]:
    def check(instance: Any, attribute: Any, value: int) -> None:
        if value < minimum:
            raise ParameterError(f"{attribute.name} must be at least {minimum}, got {value}")

    return check


def _int_tuple(raw: Union[str, Tuple[int, ...], List[int]]) -> Tuple[int, ...]:
    if isinstance(raw, str):
        return tuple(int(part) for part in raw.split(",") if part.strip())
    return tuple(int(part) for part in raw)


def _optional_path(raw: Optional[Union[str, Path]]) -> Optional[Path]:
    if raw is None or raw == "":
        return None
    return Path(raw)


@define(frozen=True)
class Settings:
    """Scalar pipeline options, as read from a config file and command-line flags."""

    seed: int = field(default=0, converter=int)
    k: int = field(default=8, converter=int, validator=_check_at_least(1))
    activation_threshold: float = field(
        default=0.5,
        converter=float,
        validator=_check_unit_interval,
    )
    tau: float = field(default=0.5, converter=float, validator=_check_unit_interval)
    strategy: Strategy = field(default=Strategy.GREEDY, converter=Strategy)
    mask_source: MaskSource = field(default=MaskSource.PREDICTED, converter=MaskSource)
    hybrid_mode: HybridMode = field(default=HybridMode.PER_BOX, converter=HybridMode)
    num_categories: int = field(default=10, converter=int, validator=_check_at_least(1))
    score_threshold: float = field(
        default=0.5,
        converter=float,
        validator=_check_unit_interval,
    )
    dilation_radius: int = field(default=0, converter=int, validator=_check_at_least(0))
    image_w: int = field(default=1024, converter=int, validator=_check_at_least(1))
    image_h: int = field(default=1024, converter=int, validator=_check_at_least(1))
    stem_channels: Tuple[int, ...] = field(default=(8, 16, 32), converter=_int_tuple)
    neck_depth: int = field(default=2, converter=int, validator=_check_at_least(1))
    head_hidden: int = field(default=32, converter=int, validator=_check_at_least(1))
    warmup_images: int = field(default=0, converter=int, validator=_check_at_least(0))
    workers: int = field(default=1, converter=int, validator=_check_at_least(1))
    seeker_params: Optional[Path] = field(default=None, converter=_optional_path)

    def with_overrides(self, **overrides: Any) -> "Settings":
        """
        Replace the options that were given, e.g. command-line flags over file values.

        :param overrides: option values, None meaning not given.
        :return: the updated settings.
        """
        given = {name: value for name, value in overrides.items() if value is not None}
        return evolve(self, **given)


def load_settings(path: Union[str, Path]) -> Settings:
    """
    Read a `key = value` config file.

    Blank lines and lines starting with `#` are skipped.
    :param path: the file.
    :raises ParseError: on a malformed line, an unknown key or an invalid value.
    :return: the settings.
    """
    path = Path(path)
    known = fields_dict(Settings)
    values: Dict[str, str] = {}
    for line_number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        match = _LINE_PATTERN.match(line)
        if not match:
            raise ParseError(f"expected 'key = value', got {line!r}", path, line_number)
        key, raw = match.groups()
        if key not in known:
            raise ParseError(f"unknown option {key!r}", path, line_number)
        try:
            evolve(Settings(), **{key: raw})
        except (ValueError, TypeError) as error:
            raise ParseError(f"invalid value for {key}: {error}", path, line_number)
        values[key] = raw
    return Settings(**values)


def _check_stem(instance: "PipelineConfig", attribute: Any, value: Tuple[ConvSpec, ...]) -> None:
    stride = math.prod(layer.stride for layer in value)
    if stride != STEM_STRIDE:
        raise ParameterError(f"stem strides must multiply to {STEM_STRIDE}, got {stride}")


def _chain_channels(channels: int, layers: Tuple[ConvSpec, ...]) -> int:
    for layer in layers:
        if layer.in_channels != channels:
            raise ShapeError(
                f"layer reads {layer.in_channels} channels but receives {channels}",
            )
        channels = layer.out_channels
    return channels


@define(frozen=True)
class PipelineConfig:
    """The network and the slicing options of a pipeline run."""

    stem: Tuple[ConvSpec, ...] = field(converter=tuple, validator=_check_stem)
    seeker: SeekerParams
    neck: Tuple[ConvSpec, ...] = field(converter=tuple)
    head: Tuple[ConvSpec, ...] = field(converter=tuple)
    k: int = field(default=8, validator=_check_at_least(1))
    activation_threshold: float = field(default=0.5, validator=_check_unit_interval)
    tau: float = field(default=0.5, validator=_check_unit_interval)
    strategy: Strategy = field(default=Strategy.GREEDY, converter=Strategy)
    mask_source: MaskSource = field(default=MaskSource.PREDICTED, converter=MaskSource)
    hybrid_mode: HybridMode = field(default=HybridMode.PER_BOX, converter=HybridMode)
    num_categories: int = 10
    score_threshold: float = field(default=0.5, validator=_check_unit_interval)
    dilation_radius: int = field(default=0, validator=_check_at_least(0))
    warmup_images: int = field(default=0, validator=_check_at_least(0))

    def __attrs_post_init__(self) -> None:
        channels = _chain_channels(IMAGE_CHANNELS, self.stem)
        if channels != self.seeker.channels:
            raise ShapeError(
                f"stem produces {channels} channels, seeker reads {self.seeker.channels}",
            )
        _chain_channels(channels, (*self.neck, *self.head))
        expected = BOX_CHANNELS + self.num_categories
        if not self.head or self.head[-1].out_channels != expected:
            raise ShapeError(f"the head must end in {expected} channels")

    @property
    def stride(self) -> int:  # noqa: D102
        return STEM_STRIDE


def _he_normal(
    rng: np.random.Generator,
    out_channels: int,
    in_channels: int,
    kernel: int,
) -> np.ndarray:
    scale = math.sqrt(2 / (in_channels * kernel * kernel))
    return rng.normal(0, scale, size=(out_channels, in_channels, kernel, kernel))


def build_config(settings: Settings) -> PipelineConfig:
    """
    Build the toy network from the seed and attach the slicing options.

    The stem is a chain of stride-2 3x3 layers, the neck keeps the stem width
    with same-padded 3x3 layers, and the head is a 3x3 layer followed by a 1x1
    layer with 5 box channels plus one per category. Biases start at zero.
    :param settings: the options.
    :return: the pipeline configuration.
    """
    rng = np.random.default_rng(settings.seed)
    stem = []
    channels = IMAGE_CHANNELS
    for width in settings.stem_channels:
        stem.append(
            ConvSpec(
                weights=_he_normal(rng, width, channels, 3),
                bias=np.zeros(width),
                stride=2,
                padding=1,
            ),
        )
        channels = width
    if settings.seeker_params is not None:
        logger.info("Loading seeker parameters from %s", settings.seeker_params)
        seeker = load_params(settings.seeker_params)
    else:
        seeker = init_params(channels, rng)
    neck = [
        ConvSpec.same(_he_normal(rng, channels, channels, 3), np.zeros(channels))
        for _ in range(settings.neck_depth)
    ]
    outputs = BOX_CHANNELS + settings.num_categories
    head = [
        ConvSpec.same(
            _he_normal(rng, settings.head_hidden, channels, 3),
            np.zeros(settings.head_hidden),
        ),
        ConvSpec.same(_he_normal(rng, outputs, settings.head_hidden, 1), np.zeros(outputs)),
    ]
    return PipelineConfig(
        stem=stem,
        seeker=seeker,
        neck=neck,
        head=head,
        k=settings.k,
        activation_threshold=settings.activation_threshold,
        tau=settings.tau,
        strategy=settings.strategy,
        mask_source=settings.mask_source,
        hybrid_mode=settings.hybrid_mode,
        num_categories=settings.num_categories,
        score_threshold=settings.score_threshold,
        dilation_radius=settings.dilation_radius,
        warmup_images=settings.warmup_images,
    )
