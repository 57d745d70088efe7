import enum
from typing import Any, Callable, Tuple, TypeVar, Union

import numpy as np
from attr import define, evolve, field
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit

from patchseek.errors import ParameterError, ShapeError


def frozen_array(dtype: Any) -> Callable[[Any], np.ndarray]:
    """
    Build an attrs converter that copies its input into a read-only array.

    :param dtype: numpy dtype of the stored array.
    :return: the converter.
    """

    def convert(raw: Any) -> np.ndarray:
        array = np.array(raw, dtype=dtype)
        array.setflags(write=False)
        return array

    return convert


def _check_finite(instance: Any, attribute: Any, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise ParameterError(f"{type(instance).__name__}.{attribute.name} must be finite")


def _check_ndim(ndim: int) -> Callable[[Any, Any, np.ndarray], None]:
    def check(instance: Any, attribute: Any, value: np.ndarray) -> None:
        if value.ndim != ndim or min(value.shape) < 1:
            raise ShapeError(
                f"{type(instance).__name__}.{attribute.name} must be a non-empty "
                f"{ndim}-D array, got shape {value.shape}",
            )

    return check


@define(frozen=True, eq=False)
class Grid2D:
    """A dense 2-D grid of doubles, indexed as values[row, column]."""

    values: np.ndarray = field(
        converter=frozen_array(np.float64),
        validator=[_check_ndim(2), _check_finite],
    )

    @classmethod
    def zeros(cls, height: int, width: int) -> "Grid2D":
        """
        Make a grid filled with zeros.

        :param height: number of rows.
        :param width: number of columns.
        :return: the grid.
        """
        return cls(np.zeros((height, width)))

    @property
    def height(self) -> int:  # noqa: D102
        return int(self.values.shape[0])

    @property
    def width(self) -> int:  # noqa: D102
        return int(self.values.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:  # noqa: D102
        return (self.height, self.width)


@define(frozen=True, eq=False)
class FeatureStack:
    """A channel-major stack of 2-D feature maps, indexed as values[channel, row, column]."""

    values: np.ndarray = field(
        converter=frozen_array(np.float64),
        validator=[_check_ndim(3), _check_finite],
    )

    @property
    def channels(self) -> int:  # noqa: D102
        return int(self.values.shape[0])

    @property
    def height(self) -> int:  # noqa: D102
        return int(self.values.shape[1])

    @property
    def width(self) -> int:  # noqa: D102
        return int(self.values.shape[2])


@define(frozen=True, eq=False)
class BitGrid:
    """A 2-D boolean grid."""

    bits: np.ndarray = field(converter=frozen_array(np.bool_), validator=_check_ndim(2))

    @property
    def height(self) -> int:  # noqa: D102
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:  # noqa: D102
        return int(self.bits.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:  # noqa: D102
        return (self.height, self.width)


def _check_kernel(instance: "ConvSpec", attribute: Any, value: np.ndarray) -> None:
    if value.ndim != 4 or min(value.shape) < 1:
        raise ShapeError(f"ConvSpec weights must be (out, in, kh, kw), got {value.shape}")
    if value.shape[2] % 2 == 0 or value.shape[3] % 2 == 0:
        raise ParameterError(f"ConvSpec kernel must be odd, got {value.shape[2:]}")


def _check_bias(instance: "ConvSpec", attribute: Any, value: np.ndarray) -> None:
    if value.shape != (instance.weights.shape[0],):
        raise ShapeError(
            f"ConvSpec bias must have {instance.weights.shape[0]} values, got {value.shape}",
        )


def _check_positive(instance: Any, attribute: Any, value: int) -> None:
    if value < 1:
        raise ParameterError(f"{attribute.name} must be positive, got {value}")


def _check_non_negative(instance: Any, attribute: Any, value: int) -> None:
    if value < 0:
        raise ParameterError(f"{attribute.name} must be non-negative, got {value}")


@define(frozen=True, eq=False)
class ConvSpec:
    """Parameters of a single convolutional layer."""

    weights: np.ndarray = field(
        converter=frozen_array(np.float64),
        validator=[_check_kernel, _check_finite],
    )
    bias: np.ndarray = field(
        converter=frozen_array(np.float64),
        validator=[_check_bias, _check_finite],
    )
    stride: int = field(default=1, validator=_check_positive)
    padding: int = field(default=0, validator=_check_non_negative)

    @classmethod
    def same(cls, weights: Any, bias: Any, stride: int = 1) -> "ConvSpec":
        """
        Make a layer with same padding, (k - 1) / 2.

        :param weights: (out, in, kh, kw) kernel.
        :param bias: (out,) bias.
        :param stride: layer stride.
        :return: the layer.
        """
        kernel_h = np.shape(weights)[2]
        return cls(weights=weights, bias=bias, stride=stride, padding=(kernel_h - 1) // 2)

    @classmethod
    def identity(cls, channels: int) -> "ConvSpec":
        """
        Make a 1x1 layer that copies its input.

        :param channels: number of input and output channels.
        :return: the layer.
        """
        return cls(
            weights=np.eye(channels).reshape(channels, channels, 1, 1),
            bias=np.zeros(channels),
        )

    @property
    def out_channels(self) -> int:  # noqa: D102
        return int(self.weights.shape[0])

    @property
    def in_channels(self) -> int:  # noqa: D102
        return int(self.weights.shape[1])

    @property
    def kernel_h(self) -> int:  # noqa: D102
        return int(self.weights.shape[2])

    @property
    def kernel_w(self) -> int:  # noqa: D102
        return int(self.weights.shape[3])

    def output_shape(
        self,
        height: int,
        width: int,
        floor_mode: bool = False,
    ) -> Tuple[int, int]:
        """
        Compute the spatial output size for an input size.

        :param height: input rows.
        :param width: input columns.
        :param floor_mode: round non-integer sizes down instead of failing.
        :return: (out_h, out_w).
        """
        return (
            _output_size(height, self.kernel_h, self.stride, self.padding, floor_mode),
            _output_size(width, self.kernel_w, self.stride, self.padding, floor_mode),
        )


class Activation(str, enum.Enum):  # noqa: WPS600
    """Pointwise non-linearities."""

    RELU = "relu"
    SIGMOID = "sigmoid"


def _output_size(
    size: int,
    kernel: int,
    stride: int,
    padding: int,
    floor_mode: bool,
) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} does not fit input {size} with padding {padding}")
    if span % stride and not floor_mode:
        raise ShapeError(
            f"output size ({size} + 2*{padding} - {kernel})/{stride} + 1 is not an integer",
        )
    return span // stride + 1


def conv2d_at(
    features: FeatureStack,
    spec: ConvSpec,
    rows: np.ndarray,
    cols: np.ndarray,
) -> np.ndarray:
    """
    Evaluate a convolutional layer at selected output positions only.

    Dense convolution is this function applied to every output position,
    so a sparse evaluation over all positions reproduces it exactly.
    :param features: layer input.
    :param spec: layer parameters.
    :param rows: output rows of the positions to evaluate.
    :param cols: output columns of the positions to evaluate.
    :raises ShapeError: if the channel counts do not match.
    :return: (N, out_channels) array aligned with the positions.
    """
    if spec.in_channels != features.channels:
        raise ShapeError(
            f"layer expects {spec.in_channels} channels, got {features.channels}",
        )
    pad = spec.padding
    padded = np.pad(features.values, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    gathered = windows[
        :,
        np.asarray(rows, dtype=np.intp) * spec.stride,
        np.asarray(cols, dtype=np.intp) * spec.stride,
    ]
    responses = np.tensordot(gathered, spec.weights, axes=([0, 2, 3], [1, 2, 3]))
    return responses + spec.bias


def conv2d(
    features: FeatureStack,
    spec: ConvSpec,
    floor_mode: bool = False,
) -> FeatureStack:
    """
    Cross-correlate a feature stack with a layer kernel and add the bias.

    Reads outside of the input under padding contribute zero.
    :param features: layer input.
    :param spec: layer parameters.
    :param floor_mode: round a non-integer output size down instead of failing.
    :return: layer output.
    """
    out_h, out_w = spec.output_shape(features.height, features.width, floor_mode)
    rows, cols = np.divmod(np.arange(out_h * out_w), out_w)
    responses = conv2d_at(features, spec, rows, cols)
    return FeatureStack(responses.T.reshape(spec.out_channels, out_h, out_w))


def depthwise_conv(
    features: FeatureStack,
    kernel_size: int,
    weights: Any,
    bias: Any,
) -> FeatureStack:
    """
    Convolve every channel with its own kernel, same padding.

    :param features: input stack.
    :param kernel_size: odd kernel size.
    :param weights: (channels, k, k) kernels.
    :param bias: (channels,) bias.
    :raises ParameterError: if the kernel size is even.
    :raises ShapeError: if parameter shapes do not match the input.
    :return: output stack with the input shape.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"depthwise kernel size must be odd, got {kernel_size}")
    kernels = np.asarray(weights, dtype=np.float64)
    offsets = np.asarray(bias, dtype=np.float64)
    expected = (features.channels, kernel_size, kernel_size)
    if kernels.shape != expected or offsets.shape != (features.channels,):
        raise ShapeError(
            f"depthwise parameters must be {expected} and ({features.channels},), "
            f"got {kernels.shape} and {offsets.shape}",
        )
    channels = [
        ndimage.correlate(plane, kernel, mode="constant", cval=0.0) + offset
        for plane, kernel, offset in zip(features.values, kernels, offsets)
    ]
    return FeatureStack(np.stack(channels))


def _check_window(window: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"pooling window must be odd, got {window}")


def maxpool_same(grid: Grid2D, window: int = 3) -> Grid2D:
    """
    Take the maximum over every window x window neighbourhood, shape preserved.

    Cells outside the grid never win.
    :param grid: input grid.
    :param window: odd window size.
    :return: pooled grid.
    """
    _check_window(window)
    return Grid2D(
        ndimage.maximum_filter(grid.values, size=window, mode="constant", cval=-np.inf),
    )


def avgpool_same(grid: Grid2D, window: int = 9) -> Grid2D:
    """
    Sum every window x window neighbourhood and divide by window squared.

    The divisor stays window squared at the borders, so the result is a
    monotone function of the in-bounds sum.
    :param grid: input grid.
    :param window: odd window size.
    :return: pooled grid.
    """
    _check_window(window)
    sums = ndimage.correlate(
        grid.values,
        np.ones((window, window)),
        mode="constant",
        cval=0.0,
    )
    return Grid2D(sums / (window * window))


Carrier = TypeVar("Carrier", Grid2D, FeatureStack)


def pointwise(carrier: Carrier, kind: Union[Activation, str]) -> Carrier:
    """
    Apply an elementwise non-linearity.

    :param carrier: a grid or a feature stack.
    :param kind: relu or sigmoid.
    :return: the same kind of carrier with mapped values.
    """
    kind = Activation(kind)
    if kind is Activation.RELU:
        mapped = np.maximum(carrier.values, 0.0)
    else:
        mapped = expit(carrier.values)
    return evolve(carrier, values=mapped)


def batchnorm_apply(  # noqa: WPS211
    stack: FeatureStack,
    mean: Any,
    var: Any,
    gamma: Any,
    beta: Any,
    eps: float,
) -> FeatureStack:
    """
    Apply inference-mode batch normalization per channel.

    :param stack: input stack.
    :param mean: running means, one per channel.
    :param var: running variances, one per channel.
    :param gamma: scales.
    :param beta: shifts.
    :param eps: variance offset.
    :raises ParameterError: on a negative variance or a non-positive denominator.
    :raises ShapeError: if a parameter does not have one value per channel.
    :return: normalized stack.
    """
    params = [np.asarray(param, dtype=np.float64) for param in (mean, var, gamma, beta)]
    for param in params:
        if param.shape != (stack.channels,):
            raise ShapeError(
                f"batchnorm parameters need {stack.channels} values, got {param.shape}",
            )
    mean_, var_, gamma_, beta_ = params
    if (var_ < 0).any():
        raise ParameterError("batchnorm variance must be non-negative")
    if eps < 0 or (var_ + eps <= 0).any():
        raise ParameterError("batchnorm var + eps must be positive")
    scale = gamma_ / np.sqrt(var_ + eps)
    shift = beta_ - mean_ * scale
    return FeatureStack(stack.values * scale[:, None, None] + shift[:, None, None])
